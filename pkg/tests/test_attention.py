import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swiattn import numerics as nx
from swiattn.attention import (AttentionConfig, QKVProjection, apply_rope, attention_mask, full_attention,
                               project_qkv, sliding_window_attention)
from swiattn.errors import ConfigError, ContractError
from swiattn.numerics import Tensor


def make(T=6, d=8, heads=4, kv=2, hd=4, window=3, seed=0):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(d_model=d, n_heads=heads, n_kv_heads=kv, head_dim=hd, window=window)
    proj = QKVProjection.init(cfg, rng)
    h = rng.normal(size=(T, d))
    return cfg, proj, h


def naive_attention(h, proj, cfg, window=None):
    """Triple-loop reference: per head, per query, per key."""
    wq, wk, wv, wo = (p.data for p in (proj.wq, proj.wk, proj.wv, proj.wo))
    T, hd, g = h.shape[0], cfg.head_dim, cfg.group_size
    out = np.zeros((T, cfg.n_heads * hd))
    for head in range(cfg.n_heads):
        kvh = head // g
        for t in range(T):
            q = np.array([sum(h[t, i] * wq[i, head * hd + j] for i in range(cfg.d_model)) for j in range(hd)])
            scores, vals = [], []
            for s in range(T):
                if s > t or (window is not None and t - s >= window):
                    continue
                k = np.array([sum(h[s, i] * wk[i, kvh * hd + j] for i in range(cfg.d_model)) for j in range(hd)])
                v = np.array([sum(h[s, i] * wv[i, kvh * hd + j] for i in range(cfg.d_model)) for j in range(hd)])
                scores.append(float(q @ k) / math.sqrt(hd))
                vals.append(v)
            w = np.exp(np.array(scores) - max(scores))
            w /= w.sum()
            out[t, head * hd:(head + 1) * hd] = sum(wi * vi for wi, vi in zip(w, vals))
    return out @ wo


def branches(h, proj, cfg, window=None):
    q, k, v = project_qkv(Tensor(h), proj, cfg)
    full = full_attention(q, k, v, proj)
    swa = sliding_window_attention(q, k, v, proj, cfg.window if window is None else window)
    return full.data, swa.data


class TestProjection:
    def test_zero_weights(self):
        cfg = AttentionConfig(d_model=4, n_heads=2, n_kv_heads=1, head_dim=2)
        z = lambda *s: Tensor(np.zeros(s))
        proj = QKVProjection(z(4, 4), z(4, 2), z(4, 2), z(4, 4))
        for x in project_qkv(Tensor(np.ones((3, 4))), proj, cfg):
            assert not x.data.any()

    def test_identity_single_head(self):
        cfg = AttentionConfig(d_model=4, n_heads=1, n_kv_heads=1, head_dim=4)
        eye = Tensor(np.eye(4))
        h = np.random.default_rng(0).normal(size=(5, 4))
        q, _, _ = project_qkv(Tensor(h), QKVProjection(eye, eye, eye, eye), cfg)
        np.testing.assert_array_equal(q.data[0], h)

    def test_per_head_oracle(self):
        cfg, proj, h = make()
        q, k, v = project_qkv(Tensor(h), proj, cfg)
        assert q.shape == (4, 6, 4) and k.shape == (2, 6, 4) and v.shape == (2, 6, 4)
        for head in range(2):
            cols = slice(head * 4, head * 4 + 4)
            np.testing.assert_allclose(k.data[head], h @ proj.wk.data[:, cols], atol=1e-14)
            np.testing.assert_allclose(v.data[head], h @ proj.wv.data[:, cols], atol=1e-14)

    def test_width_mismatch(self):
        cfg, proj, _ = make()
        with pytest.raises(ConfigError):
            project_qkv(Tensor(np.ones((3, 5))), proj, cfg)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            AttentionConfig(n_heads=3, n_kv_heads=2)
        with pytest.raises(ConfigError):
            AttentionConfig(head_dim=5)
        with pytest.raises(ConfigError):
            AttentionConfig(window=0)


class TestRope:
    def test_position_zero_is_identity(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 8))
        np.testing.assert_array_equal(apply_rope(Tensor(x), [0]).data, x)

    @settings(max_examples=30)
    @given(st.integers(0, 5000), st.integers(0, 2**31))
    def test_norm_preserved(self, pos, seed):
        x = np.random.default_rng(seed).normal(size=(1, 1, 16))
        y = apply_rope(Tensor(x), [pos]).data
        assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x), abs=1e-12)

    def test_closed_form(self):
        y = apply_rope(Tensor(np.array([[[1.0, 0.0, 1.0, 0.0]]])), [1]).data.ravel()
        theta1 = 10000 ** -0.5
        np.testing.assert_allclose(y, [math.cos(1), math.sin(1), math.cos(theta1), math.sin(theta1)], atol=1e-15)

    def test_relative_scores(self):
        # rotated dot products depend only on the position difference
        rng = np.random.default_rng(2)
        q, k = rng.normal(size=(1, 1, 8)), rng.normal(size=(1, 1, 8))
        a = (apply_rope(Tensor(q), [7]).data * apply_rope(Tensor(k), [3]).data).sum()
        b = (apply_rope(Tensor(q), [104]).data * apply_rope(Tensor(k), [100]).data).sum()
        assert a == pytest.approx(b, abs=1e-12)


class TestBranches:
    def test_full_matches_naive(self):
        cfg, proj, h = make(T=6)
        full, _ = branches(h, proj, cfg)
        assert np.abs(full - naive_attention(h, proj, cfg)).max() < 1e-10

    def test_swa_matches_naive(self):
        cfg, proj, h = make(T=8, window=3)
        _, swa = branches(h, proj, cfg)
        assert np.abs(swa - naive_attention(h, proj, cfg, window=3)).max() < 1e-10

    def test_single_token(self):
        cfg, proj, h = make(T=1)
        full, swa = branches(h, proj, cfg)
        v = h @ proj.wv.data
        expected = np.concatenate([v[:, :4], v[:, :4], v[:, 4:], v[:, 4:]], axis=-1) @ proj.wo.data
        np.testing.assert_allclose(full, expected, atol=1e-14)
        np.testing.assert_allclose(swa, expected, atol=1e-14)

    def test_identical_keys_give_running_mean(self):
        rng = np.random.default_rng(3)
        q, v = Tensor(rng.normal(size=(1, 5, 4))), Tensor(rng.normal(size=(1, 5, 4)))
        k = Tensor(np.tile(rng.normal(size=4), (1, 5, 1)))
        wo = Tensor(rng.normal(size=(4, 4)))
        proj = QKVProjection(None, None, None, wo)
        out = full_attention(q, k, v, proj).data
        means = np.cumsum(v.data[0], axis=0) / np.arange(1, 6)[:, None]
        np.testing.assert_allclose(out, means @ wo.data, atol=1e-13)

    def test_window_one_is_value_projection(self):
        cfg, proj, h = make(T=7, heads=2, kv=2, window=1)
        _, swa = branches(h, proj, cfg)
        np.testing.assert_allclose(swa, (h @ proj.wv.data) @ proj.wo.data, atol=1e-13)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 9), st.integers(0, 6), st.sampled_from([(2, 1), (2, 2), (4, 2), (4, 1)]),
           st.integers(0, 2**31))
    def test_wide_window_equals_full(self, T, extra, heads, seed):
        cfg, proj, h = make(T=T, heads=heads[0], kv=heads[1], window=T + extra, seed=seed)
        full, swa = branches(h, proj, cfg)
        assert np.abs(full - swa).max() < 1e-12

    def test_empty_sequence(self):
        cfg, proj, _ = make()
        empty = Tensor(np.zeros((4, 0, 4)))
        with pytest.raises(ContractError):
            full_attention(empty, empty, empty, proj)
        with pytest.raises(ContractError):
            sliding_window_attention(empty, empty, empty, proj, 2)


class TestMaskProperties:
    def test_mask_semantics(self):
        m = attention_mask(np.arange(5), np.arange(5), window=2)
        expected = np.array([[1, 0, 0, 0, 0], [1, 1, 0, 0, 0], [0, 1, 1, 0, 0], [0, 0, 1, 1, 0], [0, 0, 0, 1, 1]])
        np.testing.assert_array_equal(m, expected.astype(bool))

    @pytest.mark.parametrize("j", [0, 2, 5])
    def test_causality(self, j):
        cfg, proj, h = make(T=7, window=3)
        full, swa = branches(h, proj, cfg)
        h2 = h.copy()
        h2[j] += 3.0
        full2, swa2 = branches(h2, proj, cfg)
        assert (full2[:j] == full[:j]).all() and (swa2[:j] == swa[:j]).all()
        assert not np.allclose(full2[j], full[j])

    @pytest.mark.parametrize("j", [0, 1, 3])
    def test_window_locality(self, j):
        cfg, proj, h = make(T=9, window=3)
        _, swa = branches(h, proj, cfg)
        h2 = h.copy()
        h2[j] += 3.0
        _, swa2 = branches(h2, proj, cfg)
        changed = np.abs(swa2 - swa).max(axis=-1) > 0
        t = np.arange(9)
        assert not changed[(t - j >= 3) | (t < j)].any()
        assert changed[(t >= j) & (t - j < 3)].all()

    def test_batch_permutation_commutes(self):
        cfg, proj, _ = make()
        hb = np.random.default_rng(4).normal(size=(3, 5, 8))
        full, swa = branches(hb, proj, cfg)
        perm = [2, 0, 1]
        full_p, swa_p = branches(hb[perm], proj, cfg)
        np.testing.assert_array_equal(full_p, full[perm])
        np.testing.assert_array_equal(swa_p, swa[perm])


class TestGradients:
    @pytest.mark.parametrize("window", [None, 2])
    def test_branch_gradients(self, window):
        cfg, proj, h = make(T=5, d=6, heads=2, kv=1, hd=4, window=2)
        w = np.random.default_rng(5).normal(size=(5, 6))
        arrays = [h] + [p.data for p in proj.parameters().values()]

        def f(x, wq, wk, wv, wo):
            p = QKVProjection(wq, wk, wv, wo)
            q, k, v = project_qkv(x, p, cfg)
            pos = np.arange(5)
            q, k = apply_rope(q, pos), apply_rope(k, pos)
            o = full_attention(q, k, v, p) if window is None else sliding_window_attention(q, k, v, p, window)
            return (o * w).sum()
        assert nx.gradcheck(f, arrays) < 1e-5
