"""Prefill/decode with one shared KV cache per layer, plus analytic cost accounting.

During decode each layer computes only the branch its gate selects. The full branch
reads the whole cache, the windowed branch reads the last ``min(t, W)`` rows of the
same cache.
"""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import apply_rope, attend, project_qkv
from .errors import ContractError, SessionStateError
from .model import ModelConfig, SwiAttnModel, ffn
from .numerics import Tensor
from .routing import GateRecord


class LayerKVCache:
    """Append-only key/value store for one layer; rows are post-rotary keys."""

    def __init__(self, n_kv_heads: int, head_dim: int, capacity: int = 64):
        self._k = np.zeros((n_kv_heads, capacity, head_dim))
        self._v = np.zeros_like(self._k)
        self.length = 0

    def append(self, keys: np.ndarray, values: np.ndarray) -> None:
        """Add rows shaped (n_kv_heads, n, head_dim)."""
        n = keys.shape[-2]
        need = self.length + n
        if need > self._k.shape[1]:
            cap = max(need, 2 * self._k.shape[1])
            grow = ((0, 0), (0, cap - self._k.shape[1]), (0, 0))
            self._k, self._v = np.pad(self._k, grow), np.pad(self._v, grow)
        self._k[:, self.length:need] = keys
        self._v[:, self.length:need] = values
        self.length = need

    @property
    def keys(self) -> np.ndarray:
        return self._k[:, :self.length]

    @property
    def values(self) -> np.ndarray:
        return self._v[:, :self.length]

    def view(self, span: int | None = None):
        """(keys, values) over the last ``span`` rows, or everything when span is None."""
        start = 0 if span is None else max(self.length - span, 0)
        return self._k[:, start:self.length], self._v[:, start:self.length]


# -- cost accounting ------------------------------------------------------------

def _fixed_flops_per_token(cfg: ModelConfig) -> tuple:
    a = cfg.attention
    d, hq, hkv = a.d_model, a.n_heads * a.head_dim, a.n_kv_heads * a.head_dim
    layer = 2 * d * hq + 2 * 2 * d * hkv + 2 * hq * d + 3 * 2 * d * cfg.ffn_hidden
    router = 2 * d
    head = 2 * d * cfg.vocab_size
    return layer, router, head


def attention_flops(cfg: ModelConfig, span) -> np.ndarray:
    """Score and value FLOPs for one query reading ``span`` keys (2 FLOPs per multiply-add)."""
    hq = cfg.attention.n_heads * cfg.attention.head_dim
    return 4.0 * hq * np.asarray(span, dtype=float)


def count_prefill_flops(cfg: ModelConfig, T: int, gates) -> np.ndarray:
    """Analytic FLOPs at each prompt position under a gate trace of shape (L, T).

    Position t (1-based) reads t keys on the full branch and min(t, W) on the
    windowed branch. Projections, router, FFN and LM head are gate-independent;
    norms and elementwise ops are not counted.
    """
    gates = np.asarray(gates, dtype=float)
    if gates.shape != (cfg.n_layers, T):
        raise ContractError(f"gate trace has shape {gates.shape}, expected {(cfg.n_layers, T)}")
    layer, router, head = _fixed_flops_per_token(cfg)
    n_routed = sum(k == "routed" for k in cfg.layer_kinds())
    t = np.arange(1, T + 1)
    full, swa = attention_flops(cfg, t), attention_flops(cfg, np.minimum(t, cfg.window))
    attn = (gates * full + (1.0 - gates) * swa).sum(axis=0)
    return cfg.n_layers * layer + n_routed * router + head + attn


def decode_access(length: int, gate: int, window: int) -> int:
    """KV rows read by one decode step at cache length ``length``."""
    return length if gate else min(length, window)


@dataclass
class CostReport:
    prefill_flops_by_position: np.ndarray = field(default_factory=lambda: np.zeros(0))
    decode_positions: list = field(default_factory=list)
    decode_mem_access: list = field(default_factory=list)

    def record_decode(self, position: int, per_layer: list) -> None:
        if any(x < 0 for x in per_layer):
            raise ContractError("negative memory access count")
        self.decode_positions.append(int(position))
        self.decode_mem_access.append([int(x) for x in per_layer])

    @property
    def prefill_gflops(self) -> np.ndarray:
        return np.asarray(self.prefill_flops_by_position) / 1e9

    def mean_decode_access(self) -> float:
        if not self.decode_mem_access:
            raise ContractError("no decode steps recorded")
        return float(np.mean(self.decode_mem_access))

    def rows(self):
        """(position, flops, mem_tokens) rows; prefill positions have no memory count and vice versa."""
        for i, f in enumerate(self.prefill_flops_by_position, start=1):
            yield i, float(f), ""
        for p, m in zip(self.decode_positions, self.decode_mem_access):
            yield p, "", float(np.mean(m))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "flops", "mem_tokens"])
            w.writerows(self.rows())
        return path


def decode_mem_access_summary(report: CostReport, positions=None) -> dict:
    """Mean over layers of KV rows read at each requested decode position."""
    if not report.decode_mem_access:
        raise ContractError("empty cost report")
    table = dict(zip(report.decode_positions, report.decode_mem_access))
    positions = report.decode_positions if positions is None else positions
    missing = [p for p in positions if p not in table]
    if missing:
        raise ContractError(f"no decode step recorded at positions {missing}")
    return {p: float(np.mean(table[p])) for p in positions}


def mem_access_for_trace(gates, position: int, window: int) -> float:
    """Mean per-layer access at one position for a hand-specified layer gate vector."""
    return float(np.mean([decode_access(position, g, window) for g in np.atleast_1d(gates)]))


# -- sessions -----------------------------------------------------------------

@dataclass
class Generation:
    tokens: list
    gate_log: list
    cost: CostReport


class InferenceSession:
    """One generation stream over an immutable model."""

    def __init__(self, model: SwiAttnModel, force_gate: int | None = None):
        self.model = model
        self.cfg = model.cfg
        a = self.cfg.attention
        self.caches = [LayerKVCache(a.n_kv_heads, a.head_dim) for _ in range(self.cfg.n_layers)]
        self.tokens: list = []
        self.gate_log: list = []
        self.prefill_gate_log: list = []
        self.cost = CostReport()
        self.branch_calls: Counter = Counter()
        self.force_gate = force_gate
        self._prefilled = False

    @property
    def position(self) -> int:
        return len(self.tokens)

    def prefill(self, prompt) -> np.ndarray:
        if self._prefilled:
            raise SessionStateError("session already prefilled")
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ContractError("empty prompt")
        force = None
        if self.force_gate is not None:
            force = float(self.force_gate)
        with nx.no_grad():
            out = self.model.forward(np.asarray(prompt), force_gates=force)
        for cache, lo in zip(self.caches, out.layers):
            cache.append(lo.keys, lo.values)
        recs = out.gate_records(self.cfg.tau)
        if force is not None:
            recs = [GateRecord(r.layer, r.token_index, r.logit, r.soft_gate, int(force)) for r in recs]
        self.prefill_gate_log.extend(recs)
        self.cost.prefill_flops_by_position = count_prefill_flops(self.cfg, len(prompt), out.gates())
        self.tokens.extend(prompt)
        self._prefilled = True
        return out.logits.data[-1].copy()

    def decode_step(self, token: int) -> np.ndarray:
        if not self._prefilled:
            raise SessionStateError("decode_step before prefill")
        cfg, a = self.cfg, self.cfg.attention
        pos = self.position
        if pos + 1 > cfg.max_seq_len:
            raise ContractError(f"sequence would exceed max_seq_len={cfg.max_seq_len}")
        kinds = cfg.layer_kinds()
        access = []
        with nx.no_grad():
            h = nx.embedding(self.model.embed, np.array([int(token)]))
            for i, (layer, cache) in enumerate(zip(self.model.layers, self.caches)):
                x = nx.rms_norm(h, layer.attn_norm)
                q, k, v = project_qkv(x, layer.attn, a)
                q, k = apply_rope(q, [pos], a.rope_base), apply_rope(k, [pos], a.rope_base)
                cache.append(k.data, v.data)
                if kinds[i] == "routed":
                    logit = float(layer.router.logits(x).data[0])
                    soft = float(nx._sigmoid_np(np.array(logit)))
                    gate = int(soft > cfg.tau)
                    if self.force_gate is not None:
                        gate = int(self.force_gate)
                    self.gate_log.append(GateRecord(i, pos, logit, soft, gate))
                else:
                    gate = int(kinds[i] == "full")
                    self.gate_log.append(GateRecord(i, pos, np.inf if gate else -np.inf, float(gate), gate))
                span = None if gate else a.window
                keys, values = cache.view(span)
                self.branch_calls["full" if gate else "swa"] += 1
                access.append(keys.shape[1])
                ctx = attend(q, Tensor(keys), Tensor(values), np.ones((1, keys.shape[1]), dtype=bool))
                h = h + ctx @ layer.attn.wo
                h = h + ffn(nx.rms_norm(h, layer.ffn_norm), layer.w_gate, layer.w_up, layer.w_down)
            logits = nx.rms_norm(h, self.model.final_norm) @ self.model.embed.transpose()
        self.tokens.append(int(token))
        self.cost.record_decode(pos + 1, access)
        return logits.data[0].copy()

    def generate(self, prompt, max_new: int, stop_token: int | None = None, temperature: float = 0.0,
                 rng: np.random.Generator | None = None) -> list:
        """Greedy continuation (sampling only when temperature > 0). Returns the new tokens."""
        if max_new < 1:
            raise ContractError("max_new must be >= 1")
        logits = self.prefill(prompt)
        out = []
        while True:
            tok = _pick(logits, temperature, rng)
            out.append(tok)
            if tok == stop_token or len(out) >= max_new:
                break
            logits = self.decode_step(tok)
        return out


def _pick(logits: np.ndarray, temperature: float, rng) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    rng = rng or np.random.default_rng()
    z = logits / temperature
    p = np.exp(z - z.max())
    return int(rng.choice(len(p), p=p / p.sum()))


def generate(model: SwiAttnModel, prompt, max_new: int, stop_token: int | None = None) -> Generation:
    session = InferenceSession(model)
    toks = session.generate(prompt, max_new, stop_token)
    return Generation(toks, session.prefill_gate_log + session.gate_log, session.cost)
