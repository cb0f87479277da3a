import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swiattn.data import (DIGITS, EOS, LETTERS, NEEDLE_LEN, NEEDLE_MARK, QUERY, SyntheticTask, answer_span, decode,
                          encode, make_niah, motif_stream)
from swiattn.errors import ContractError


class TestCodec:
    def test_round_trip(self):
        assert decode(encode("ab#7?\n")) == "ab#7?\n"


class TestMotif:
    def test_periodic(self):
        s = motif_stream(30, np.random.default_rng(0))
        period = next(p for p in range(2, 7) if np.array_equal(s[p:], s[:-p]))
        assert len(set(s[:period])) == period and set(s) <= set(LETTERS)


class TestNiah:
    def test_depth_zero_is_start(self):
        inst = make_niah(30, 0, 16, np.random.default_rng(1))
        assert inst.needle_start == 0 and inst.tokens[0] == NEEDLE_MARK

    def test_depth_hundred_is_before_query(self):
        inst = make_niah(60, 100, 16, np.random.default_rng(2))
        assert inst.needle_start == len(inst.tokens) - len(QUERY) - NEEDLE_LEN
        assert inst.window_relation == "inside"

    def test_far_needle_is_outside(self):
        inst = make_niah(60, 0, 16, np.random.default_rng(3))
        assert inst.window_relation == "outside" and not inst.inside_window

    @settings(max_examples=60)
    @given(st.integers(NEEDLE_LEN + len(QUERY), 120), st.floats(0, 100), st.integers(1, 40), st.integers(0, 2**31))
    def test_round_trip_and_metadata(self, ctx, depth, window, seed):
        inst = make_niah(ctx, depth, window, np.random.default_rng(seed))
        assert len(inst.tokens) == ctx
        np.testing.assert_array_equal(answer_span(inst), inst.answer)
        assert inst.tokens[inst.needle_start] == NEEDLE_MARK
        assert list(inst.tokens[-len(QUERY):]) == list(QUERY)
        assert set(inst.answer) <= set(DIGITS)
        # the needle is the only place digits or the mark appear before the query
        body = inst.tokens[:-len(QUERY)]
        assert (body == NEEDLE_MARK).sum() == 1 and np.isin(body, DIGITS).sum() == len(inst.answer)
        hay = ctx - NEEDLE_LEN - len(QUERY)
        assert inst.needle_start == round(depth / 100 * hay)
        inside = inst.distance < window
        assert (inst.window_relation == "inside") == inside

    def test_full_sequence(self):
        inst = make_niah(20, 50, 16, np.random.default_rng(4), needle=[ord("7")])
        assert decode(inst.full_sequence[-3:]) == "#7\n"

    @pytest.mark.parametrize("ctx,depth", [(3, 50), (20, -1), (20, 101)])
    def test_impossible(self, ctx, depth):
        with pytest.raises(ContractError):
            make_niah(ctx, depth, 16, np.random.default_rng(0))


class TestTask:
    @pytest.mark.parametrize("kind", ["lm_corpus", "copy", "induction", "niah"])
    def test_fixed_length(self, kind):
        b = SyntheticTask(kind=kind, seq_len=40).batch(5, np.random.default_rng(0))
        assert b.shape == (5, 40) and b.dtype == np.int64

    def test_seeded(self):
        t = SyntheticTask()
        np.testing.assert_array_equal(t.batch(4, np.random.default_rng(9)), t.batch(4, np.random.default_rng(9)))

    def test_recall_samples_hold_one_needle(self):
        b = SyntheticTask(kind="niah", seq_len=64).batch(20, np.random.default_rng(1))
        for row in b:
            end = list(row).index(EOS)
            assert (row[:end] == NEEDLE_MARK).sum() == 2 and row[end - 1] in DIGITS

    def test_recall_fraction_extremes(self):
        rng = np.random.default_rng(2)
        assert not (SyntheticTask(recall_fraction=0.0).batch(10, rng) == NEEDLE_MARK).any()
        assert (SyntheticTask(recall_fraction=1.0).batch(10, rng) == NEEDLE_MARK).any(axis=1).all()

    def test_copy_pool(self):
        t = SyntheticTask(kind="copy", seq_len=8, params={"pool_size": 2})
        rows = {tuple(r) for r in t.batch(30, np.random.default_rng(0))}
        assert len(rows) <= 2

    def test_bad_kind(self):
        with pytest.raises(ContractError):
            SyntheticTask(kind="poetry")
