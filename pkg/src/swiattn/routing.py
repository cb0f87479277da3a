"""Per-token router choosing between the full and sliding-window branches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ShapeError
from .numerics import Tensor

DEFAULT_TAU = 0.5
DEFAULT_BIAS_INIT = 2.0


class Router:
    """Linear map from a normalised hidden state to one scalar logit per token."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, d_model: int, bias: float = DEFAULT_BIAS_INIT) -> "Router":
        # zero weights + positive bias: every token starts on the full branch
        return cls(Tensor(np.zeros(d_model), requires_grad=True),
                   Tensor(np.array(bias), requires_grad=True))

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def logits(self, h_normed: Tensor) -> Tensor:
        if h_normed.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"router expects width {self.weight.shape[0]}, got {h_normed.shape[-1]}")
        return (h_normed * self.weight).sum(axis=-1) + self.bias


def soft_gate(h_normed: Tensor, router: Router) -> Tensor:
    return nx.sigmoid(router.logits(h_normed))


def hard_gate(soft: Tensor, tau: float = DEFAULT_TAU) -> Tensor:
    """Exactly 1.0 where soft > tau else 0.0; gradients pass straight through to ``soft``.

    A soft gate equal to tau selects the sliding-window branch.
    """
    return nx.straight_through_threshold(soft, tau)


def mix_outputs(gate: Tensor, o_full: Tensor, o_swa: Tensor) -> Tensor:
    """Row-wise branch selection: gate * o_full + (1 - gate) * o_swa."""
    if o_full.shape != o_swa.shape:
        raise ShapeError(f"branch outputs differ in shape: {o_full.shape} vs {o_swa.shape}")
    if gate.shape != o_full.shape[:-1]:
        raise ShapeError(f"gate shape {gate.shape} does not match branch rows {o_full.shape[:-1]}")
    g = gate.reshape(gate.shape + (1,))
    return g * o_full + (1.0 - g) * o_swa


@dataclass(frozen=True)
class GateRecord:
    layer: int
    token_index: int
    logit: float
    soft_gate: float
    hard_gate: int

    FIELDS = ("layer", "token_index", "logit", "soft_gate", "hard_gate")

    def as_row(self) -> tuple:
        return (self.layer, self.token_index, self.logit, self.soft_gate, self.hard_gate)


def gate_records(layer: int, logits: np.ndarray, tau: float = DEFAULT_TAU, offset: int = 0) -> list:
    """GateRecords for one layer of a single sequence of router logits."""
    logits = np.asarray(logits, dtype=float).reshape(-1)
    soft = nx._sigmoid_np(logits)
    return [GateRecord(layer, offset + i, float(z), float(s), int(s > tau))
            for i, (z, s) in enumerate(zip(logits, soft))]
