"""Language-modelling loss plus the adaptive router regulariser.

Per token t and layer l the router logit z is penalised by gamma * softplus(z), with

    gamma = gamma_base / (epsilon + NLL(t) + alpha * ||o_full - o_swa||^2)

NLL and the branch disagreement are treated as constants (no gradient), so the
penalty only ever reaches the router logit.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .numerics import Tensor


@dataclass(frozen=True)
class RegularizerConfig:
    gamma_base: float = 1e-3
    epsilon: float = 0.1
    alpha: float = 100.0

    def __post_init__(self):
        if self.gamma_base < 0:
            raise ConfigError("gamma_base must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")

    @property
    def gamma_max(self) -> float:
        return self.gamma_base / self.epsilon

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenLossBreakdown:
    """Detached per-token quantities; layer-indexed arrays are shaped (L, ..., T)."""
    nll: np.ndarray
    mse: np.ndarray
    gamma: np.ndarray
    reg: np.ndarray


def _target_mask(tokens: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return np.ones(tokens[..., 1:].shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    return mask[..., 1:] & mask[..., :-1]


def lm_loss(logits: Tensor, tokens, mask=None):
    """Next-token loss: logits at position t are scored against tokens[t + 1].

    Returns the scalar mean over valid positions and the detached per-position
    NLL array (shape ``tokens.shape[:-1] + (T - 1,)``; invalid positions are 0).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if logits.shape[:-1] != tokens.shape:
        raise ShapeError(f"logits {logits.shape} do not match tokens {tokens.shape}")
    valid = _target_mask(tokens, mask)
    pad = np.zeros(tokens.shape[:-1] + (1,), dtype=np.int64)
    targets = np.concatenate([tokens[..., 1:], pad], axis=-1)
    weights = np.concatenate([valid, pad.astype(bool)], axis=-1).astype(float)
    nll = nx.cross_entropy(logits, targets)
    n = max(int(valid.sum()), 1)
    loss = (nll * weights).sum() * (1.0 / n)
    return loss, np.where(valid, nll.data[..., :-1], 0.0)


def gate_nll(nll: np.ndarray, tokens, mask=None) -> np.ndarray:
    """NLL attributed to each gate position.

    The gate at position t governs the prediction of token t + 1; the final position
    predicts nothing and takes the sequence-mean NLL instead.
    """
    tokens = np.asarray(tokens)
    valid = _target_mask(tokens, mask)
    counts = np.maximum(valid.sum(axis=-1, keepdims=True), 1)
    seq_mean = (nll * valid).sum(axis=-1, keepdims=True) / counts
    return np.concatenate([nll, seq_mean], axis=-1)


def branch_mse(o_full, o_swa) -> np.ndarray:
    """Squared L2 distance between branch outputs along the last axis (not divided by width)."""
    a = o_full.data if isinstance(o_full, Tensor) else np.asarray(o_full, dtype=float)
    b = o_swa.data if isinstance(o_swa, Tensor) else np.asarray(o_swa, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"branch outputs differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    return (diff * diff).sum(axis=-1)


def adaptive_weight(nll, mse, cfg: RegularizerConfig = RegularizerConfig()):
    out = cfg.gamma_base / (cfg.epsilon + np.asarray(nll, dtype=float) + cfg.alpha * np.asarray(mse, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def token_regularizer(router_logit: Tensor, gamma) -> Tensor:
    return nx.softplus(router_logit) * np.asarray(gamma, dtype=float)


def total_loss(lm: Tensor, regs, mask=None) -> Tensor:
    """L_LM plus the mean of the per-layer, per-token regularisers.

    ``regs`` is a sequence (one per layer) of tensors shaped like the token batch.
    Positions where ``mask`` is False are left out of both the sum and the count.
    """
    regs = list(regs)
    if not regs:
        return lm
    w = np.ones(regs[0].shape) if mask is None else np.asarray(mask, dtype=float)
    n = max(float(w.sum()) * len(regs), 1.0)
    acc = None
    for r in regs:
        term = (r * w).sum()
        acc = term if acc is None else acc + term
    return lm + acc * (1.0 / n)


def swiattn_objective(out, tokens, cfg: RegularizerConfig, mask=None):
    """Full training loss for a forward pass of a routed model.

    Returns the differentiable total, the LM term, and a TokenLossBreakdown.
    """
    lm, nll = lm_loss(out.logits, tokens, mask)
    tok_nll = gate_nll(nll, tokens, mask)
    regs, mses, gammas, vals = [], [], [], []
    for layer in out.layers:
        if layer.router_logits is None:
            continue
        mse = branch_mse(layer.o_full, layer.o_swa)
        gamma = adaptive_weight(tok_nll, mse, cfg)
        reg = token_regularizer(layer.router_logits, gamma)
        regs.append(reg)
        mses.append(mse)
        gammas.append(np.asarray(gamma))
        vals.append(reg.data)
    total = total_loss(lm, regs, mask)
    stack = (lambda xs: np.stack(xs) if xs else np.zeros((0,) + tok_nll.shape))
    return total, lm, TokenLossBreakdown(tok_nll, stack(mses), stack(gammas), stack(vals))
