import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swiattn import numerics as nx
from swiattn.errors import ShapeError
from swiattn.numerics import Tensor
from swiattn.routing import GateRecord, Router, gate_records, hard_gate, mix_outputs, soft_gate


def sig(x):
    return float(1 / (1 + mpmath.e ** (-mpmath.mpf(x))))


class TestSoftGate:
    def test_zero_router_is_half(self):
        h = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
        np.testing.assert_array_equal(soft_gate(h, Router.init(8, bias=0.0)).data, 0.5)

    @pytest.mark.parametrize("bias", [10.0, -10.0, 2.0])
    def test_bias_only(self, bias):
        h = Tensor(np.random.default_rng(1).normal(size=(3, 4)))
        out = soft_gate(h, Router.init(4, bias=bias)).data
        np.testing.assert_allclose(out, sig(bias), rtol=1e-14)

    def test_oracle_values(self):
        assert sig(10) == pytest.approx(0.99995, abs=1e-5)
        assert sig(-10) == pytest.approx(4.54e-5, rel=1e-3)

    def test_default_init_selects_full(self):
        r = Router.init(6)
        assert r.bias.item() == 2.0 and not r.weight.data.any()
        assert soft_gate(Tensor(np.ones((2, 6))), r).data[0] > 0.5

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            Router.init(4).logits(Tensor(np.ones((2, 5))))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        h, w, b = rng.normal(size=(4, 5)), rng.normal(size=5), np.array(0.3)
        c = rng.normal(size=4)
        assert nx.gradcheck(lambda x, ww, bb: (soft_gate(x, Router(ww, bb)) * c).sum(), [h, w, b]) < 1e-6


class TestHardGate:
    @pytest.mark.parametrize("soft,expected", [(0.7, 1.0), (0.5, 0.0), (0.3, 0.0), (0.500001, 1.0)])
    def test_forward(self, soft, expected):
        assert hard_gate(Tensor(soft)).item() == expected

    @pytest.mark.parametrize("s", [0.7, 0.3])
    def test_ste_derivative(self, s):
        logit = Tensor(np.log(s / (1 - s)), requires_grad=True)
        hard_gate(nx.sigmoid(logit)).backward()
        assert logit.grad == pytest.approx(0.21, abs=1e-12)

    @settings(max_examples=60)
    @given(st.floats(-30, 30))
    def test_ste_matches_sigmoid_derivative(self, x):
        logit = Tensor(x, requires_grad=True)
        out = hard_gate(nx.sigmoid(logit))
        assert out.item() in (0.0, 1.0)
        out.backward()
        s = sig(x)
        assert logit.grad == pytest.approx(s * (1 - s), rel=1e-12, abs=1e-300)

    def test_custom_tau(self):
        np.testing.assert_array_equal(hard_gate(Tensor([0.6, 0.8, 0.95]), tau=0.8).data, [0, 0, 1])


class TestMix:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.full, self.swa = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))

    def test_all_ones_is_full(self):
        np.testing.assert_array_equal(mix_outputs(Tensor(np.ones(3)), self.full, self.swa).data, self.full.data)

    def test_all_zeros_is_swa(self):
        np.testing.assert_array_equal(mix_outputs(Tensor(np.zeros(3)), self.full, self.swa).data, self.swa.data)

    def test_row_pick(self):
        out = mix_outputs(Tensor([1.0, 0.0, 1.0]), self.full, self.swa).data
        expected = np.stack([self.full.data[0], self.swa.data[1], self.full.data[2]])
        np.testing.assert_array_equal(out, expected)

    def test_unselected_branch_is_invisible(self):
        g = Tensor([1.0, 0.0, 1.0])
        base = mix_outputs(g, self.full, self.swa).data
        swa2 = self.swa.data.copy()
        swa2[[0, 2]] += 123.0
        full2 = self.full.data.copy()
        full2[1] -= 55.0
        np.testing.assert_array_equal(mix_outputs(g, Tensor(full2), Tensor(swa2)).data, base)

    def test_unselected_branch_gets_zero_gradient(self):
        full = Tensor(self.full.data, requires_grad=True)
        swa = Tensor(self.swa.data, requires_grad=True)
        mix_outputs(Tensor([1.0, 0.0, 1.0]), full, swa).sum().backward()
        assert not full.grad[1].any() and not swa.grad[[0, 2]].any()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mix_outputs(Tensor(np.ones(3)), self.full, Tensor(np.ones((3, 5))))
        with pytest.raises(ShapeError):
            mix_outputs(Tensor(np.ones(2)), self.full, self.swa)


class TestMonotonicity:
    @settings(max_examples=40)
    @given(st.integers(0, 2**31), st.floats(0, 5))
    def test_raising_bias(self, seed, delta):
        rng = np.random.default_rng(seed)
        h = Tensor(rng.normal(size=(6, 4)))
        w = Tensor(rng.normal(size=4))
        lo = soft_gate(h, Router(w, Tensor(0.1)))
        hi = soft_gate(h, Router(w, Tensor(0.1 + delta)))
        assert (hi.data >= lo.data).all()
        assert (hard_gate(hi).data >= hard_gate(lo).data).all()


class TestGateRecords:
    def test_fields_consistent(self):
        recs = gate_records(2, [-1.0, 0.0, 3.0], offset=5)
        assert [r.token_index for r in recs] == [5, 6, 7]
        assert [r.hard_gate for r in recs] == [0, 0, 1]
        for r in recs:
            assert r.layer == 2
            assert r.soft_gate == pytest.approx(sig(r.logit), rel=1e-14)
        assert GateRecord.FIELDS == ("layer", "token_index", "logit", "soft_gate", "hard_gate")
        assert recs[2].as_row()[:2] == (2, 7)
