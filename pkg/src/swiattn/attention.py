"""Full causal attention and sliding-window attention over one shared QKV projection.

Tensors are laid out ``(..., heads, T, head_dim)``. Query heads are grouped over
key/value heads (GQA): query head ``h`` reads kv head ``h // (n_heads // n_kv_heads)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, ShapeError
from .numerics import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 128
    n_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 32
    window: int = 16
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("d_model", "n_heads", "n_kv_heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} is not a multiple of n_kv_heads={self.n_kv_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary encoding, got {self.head_dim}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def to_dict(self) -> dict:
        return asdict(self)


class QKVProjection:
    """Query/key/value maps plus the output projection, shared by both branches."""

    def __init__(self, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor):
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: np.random.Generator, out_scale: float = 1.0) -> "QKVProjection":
        d, hq, hkv = cfg.d_model, cfg.n_heads * cfg.head_dim, cfg.n_kv_heads * cfg.head_dim
        std = d ** -0.5

        def w(shape, s):
            return Tensor(rng.normal(0.0, s, size=shape), requires_grad=True)
        return cls(w((d, hq), std), w((d, hkv), std), w((d, hkv), std), w((hq, d), out_scale * hq ** -0.5))

    def parameters(self) -> dict:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    def check(self, cfg: AttentionConfig) -> None:
        hq, hkv = cfg.n_heads * cfg.head_dim, cfg.n_kv_heads * cfg.head_dim
        expected = {"wq": (cfg.d_model, hq), "wk": (cfg.d_model, hkv), "wv": (cfg.d_model, hkv),
                    "wo": (hq, cfg.d_model)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")


def _split_heads(x: Tensor, n: int, head_dim: int) -> Tensor:
    # (..., T, n*hd) -> (..., n, T, hd)
    lead = x.shape[:-1]
    x = x.reshape(lead + (n, head_dim))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return x.transpose(tuple(axes))


def merge_heads(x: Tensor) -> Tensor:
    """(..., H, T, hd) -> (..., T, H*hd)."""
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = x.transpose(tuple(axes))
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def project_qkv(h: Tensor, proj: QKVProjection, cfg: AttentionConfig):
    """Map hidden states (..., T, d_model) to per-head Q, K, V.

    One call serves both attention branches.
    """
    if h.ndim < 2 or h.shape[-2] < 1:
        raise ContractError("project_qkv needs at least one token")
    if h.shape[-1] != cfg.d_model:
        raise ConfigError(f"hidden size {h.shape[-1]} does not match d_model={cfg.d_model}")
    q = _split_heads(h @ proj.wq, cfg.n_heads, cfg.head_dim)
    k = _split_heads(h @ proj.wk, cfg.n_kv_heads, cfg.head_dim)
    v = _split_heads(h @ proj.wv, cfg.n_kv_heads, cfg.head_dim)
    return q, k, v


def apply_rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    return nx.rope(x, positions, base)


def attention_mask(q_positions, k_positions, window: int | None = None) -> np.ndarray:
    """Boolean (Tq, Tk) mask, True where query i may read key j.

    Causal: k <= q. With a window W, additionally q - k < W (the window counts the query itself).
    """
    q = np.asarray(q_positions)[:, None]
    k = np.asarray(k_positions)[None, :]
    allowed = k <= q
    if window is not None:
        allowed &= (q - k) < window
    return allowed


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention before the output projection.

    q: (..., H, Tq, hd); k, v: (..., Hkv, Tk, hd). Returns (..., Tq, H*hd).
    """
    h, hkv, hd = q.shape[-3], k.shape[-3], q.shape[-1]
    if h % hkv:
        raise ShapeError(f"{h} query heads cannot be grouped over {hkv} kv heads")
    lead = q.shape[:-3]
    qg = q.reshape(lead + (hkv, h // hkv) + q.shape[-2:])
    kg = k.reshape(k.shape[:-3] + (hkv, 1) + k.shape[-2:])
    vg = v.reshape(v.shape[:-3] + (hkv, 1) + v.shape[-2:])
    scores = (qg @ kg.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
    weights = nx.softmax_rows(scores, mask)
    out = (weights @ vg).reshape(lead + (h,) + q.shape[-2:])
    return merge_heads(out)


def _positions(T: int, positions):
    return np.arange(T) if positions is None else np.asarray(positions)


def full_attention(q: Tensor, k: Tensor, v: Tensor, proj: QKVProjection, positions=None) -> Tensor:
    """Causal attention over every earlier position, then the output projection."""
    T = q.shape[-2]
    if T == 0:
        raise ContractError("attention over an empty sequence")
    pos = _positions(T, positions)
    return attend(q, k, v, attention_mask(pos, pos)) @ proj.wo


def sliding_window_attention(q: Tensor, k: Tensor, v: Tensor, proj: QKVProjection, window: int,
                             positions=None) -> Tensor:
    """Causal attention restricted to the ``window`` most recent positions (self included)."""
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    T = q.shape[-2]
    if T == 0:
        raise ContractError("attention over an empty sequence")
    pos = _positions(T, positions)
    return attend(q, k, v, attention_mask(pos, pos, window)) @ proj.wo
