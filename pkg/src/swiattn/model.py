"""Pre-norm decoder stack whose attention layers route each token to a full or windowed branch."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .attention import (AttentionConfig, QKVProjection, apply_rope, full_attention, project_qkv,
                        sliding_window_attention)
from .errors import ConfigError, ContractError, IncompatibleDonorError
from .numerics import Tensor
from .objective import RegularizerConfig
from .routing import DEFAULT_BIAS_INIT, DEFAULT_TAU, Router, gate_records, hard_gate, mix_outputs

ATTENTION_MODES = ("swiattn", "full_only", "swa_only", "static_hybrid")
DEFAULT_HYBRID_PATTERN = ("swa", "swa", "swa", "full")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    n_layers: int = 4
    attention: AttentionConfig = AttentionConfig()
    ffn_hidden: int = 256
    attention_mode: str = "swiattn"
    hybrid_pattern: tuple | None = None
    tau: float = DEFAULT_TAU
    router_bias_init: float = DEFAULT_BIAS_INIT
    regularizer: RegularizerConfig = RegularizerConfig()
    max_seq_len: int = 256
    embed_std: float = 0.1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.ffn_hidden < 1 or self.max_seq_len < 1:
            raise ConfigError("ffn_hidden and max_seq_len must be >= 1")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}; expected one of {ATTENTION_MODES}")
        if self.hybrid_pattern is not None:
            pattern = tuple(self.hybrid_pattern)
            object.__setattr__(self, "hybrid_pattern", pattern)
            if len(pattern) != self.n_layers or set(pattern) - {"full", "swa"}:
                raise ConfigError(f"hybrid_pattern must list 'full'/'swa' for each of {self.n_layers} layers")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")

    @property
    def d_model(self) -> int:
        return self.attention.d_model

    @property
    def window(self) -> int:
        return self.attention.window

    def layer_kinds(self) -> list:
        """Per layer: 'routed', 'full' or 'swa'."""
        if self.attention_mode == "swiattn":
            return ["routed"] * self.n_layers
        if self.attention_mode == "full_only":
            return ["full"] * self.n_layers
        if self.attention_mode == "swa_only":
            return ["swa"] * self.n_layers
        pattern = self.hybrid_pattern
        if pattern is None:
            pattern = tuple(DEFAULT_HYBRID_PATTERN[i % 4] for i in range(self.n_layers))
        return list(pattern)

    def with_mode(self, mode: str, hybrid_pattern=None) -> "ModelConfig":
        return replace(self, attention_mode=mode, hybrid_pattern=hybrid_pattern)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hybrid_pattern"] = list(self.hybrid_pattern) if self.hybrid_pattern is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if isinstance(d.get("attention"), dict):
            d["attention"] = AttentionConfig(**d["attention"])
        if isinstance(d.get("regularizer"), dict):
            d["regularizer"] = RegularizerConfig(**d["regularizer"])
        if d.get("hybrid_pattern") is not None:
            d["hybrid_pattern"] = tuple(d["hybrid_pattern"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def param_count(cfg: ModelConfig) -> int:
    a = cfg.attention
    d, hq, hkv = a.d_model, a.n_heads * a.head_dim, a.n_kv_heads * a.head_dim
    per_layer = d + d * hq + 2 * d * hkv + hq * d + d + 3 * d * cfg.ffn_hidden
    routed = sum(k == "routed" for k in cfg.layer_kinds())
    return cfg.vocab_size * d + cfg.n_layers * per_layer + routed * (d + 1) + d


@dataclass
class Layer:
    attn_norm: Tensor
    attn: QKVProjection
    ffn_norm: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    router: Router | None = None

    def parameters(self) -> dict:
        out = {"attn_norm": self.attn_norm}
        out.update({f"attn.{k}": v for k, v in self.attn.parameters().items()})
        if self.router is not None:
            out.update({f"router.{k}": v for k, v in self.router.parameters().items()})
        out.update({"ffn_norm": self.ffn_norm, "ffn.w_gate": self.w_gate, "ffn.w_up": self.w_up,
                    "ffn.w_down": self.w_down})
        return out


def ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """Gated MLP: down(silu(x @ w_gate) * (x @ w_up))."""
    return (nx.silu(x @ w_gate) * (x @ w_up)) @ w_down


@dataclass
class LayerOutput:
    kind: str
    gate: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    router_logits: Tensor | None = None
    soft_gate: Tensor | None = None
    hard_gate: Tensor | None = None
    o_full: Tensor | None = None
    o_swa: Tensor | None = None


@dataclass
class ForwardOutput:
    logits: Tensor
    layers: list = field(default_factory=list)

    def gates(self) -> np.ndarray:
        """Forward hard gates stacked to (L, ..., T)."""
        return np.stack([lo.gate for lo in self.layers])

    def gate_records(self, tau: float = DEFAULT_TAU) -> list:
        """GateRecords for a single (unbatched) sequence. Non-routed layers report logit +/-inf."""
        recs = []
        for i, lo in enumerate(self.layers):
            if lo.router_logits is not None:
                recs.extend(gate_records(i, lo.router_logits.data, tau))
            else:
                z = np.where(lo.gate.reshape(-1) > 0, np.inf, -np.inf)
                recs.extend(gate_records(i, z, tau))
        return recs


class SwiAttnModel:
    """Parameters plus the training-time forward pass."""

    def __init__(self, cfg: ModelConfig, embed: Tensor, layers: list, final_norm: Tensor):
        self.cfg = cfg
        self.embed = embed
        self.layers = layers
        self.final_norm = final_norm

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int | np.random.Generator = 0) -> "SwiAttnModel":
        rng = np.random.default_rng(seed)
        a = cfg.attention
        d, f = a.d_model, cfg.ffn_hidden
        out_scale = (2 * cfg.n_layers) ** -0.5

        def w(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True)
        embed = w((cfg.vocab_size, d), cfg.embed_std)
        layers = []
        for kind in cfg.layer_kinds():
            layers.append(Layer(
                attn_norm=ones(d), attn=QKVProjection.init(a, rng, out_scale), ffn_norm=ones(d),
                w_gate=w((d, f), d ** -0.5), w_up=w((d, f), d ** -0.5), w_down=w((f, d), out_scale * f ** -0.5),
                router=Router.init(d, cfg.router_bias_init) if kind == "routed" else None))
        return cls(cfg, embed, layers, ones(d))

    # -- parameters ------------------------------------------------------
    def named_parameters(self) -> dict:
        out = {"embed": self.embed}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.parameters().items()})
        out["final_norm"] = self.final_norm
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def load_parameters(self, arrays: dict, strict: bool = True) -> None:
        """Copy arrays into matching parameters; shapes must agree."""
        params = self.named_parameters()
        if strict and set(arrays) != set(params):
            missing, extra = set(params) - set(arrays), set(arrays) - set(params)
            raise IncompatibleDonorError(f"parameter names differ: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in arrays.items():
            if name not in params:
                continue
            if params[name].shape != arr.shape:
                raise IncompatibleDonorError(f"{name}: shape {arr.shape} != {params[name].shape}")
            params[name].data = np.array(arr, dtype=nx.DTYPE)

    def swap_parameters(self, tensors: dict) -> dict:
        """Install the given Tensor objects under their names; returns the ones they replaced.

        Used to run the forward pass on substitute leaves (finite-difference checks).
        """
        old = self.named_parameters()
        unknown = set(tensors) - set(old)
        if unknown:
            raise IncompatibleDonorError(f"unknown parameters {sorted(unknown)}")
        for name, t in tensors.items():
            if t.shape != old[name].shape:
                raise IncompatibleDonorError(f"{name}: shape {t.shape} != {old[name].shape}")
            if name in ("embed", "final_norm"):
                setattr(self, name, t)
                continue
            _, i, rest = name.split(".", 2)
            layer = self.layers[int(i)]
            owner, _, attr = rest.rpartition(".")
            target = {"": layer, "attn": layer.attn, "router": layer.router, "ffn": layer}[owner]
            setattr(target, attr, t)
        return {k: old[k] for k in tensors}

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    # -- forward ---------------------------------------------------------
    def forward(self, tokens, force_gates=None) -> ForwardOutput:
        """Whole-sequence forward.

        ``tokens`` is (T,) or (B, T). ``force_gates`` (scalar or (L, ..., T)) replaces the
        routed layers' hard gates; router logits are still computed.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        T = tokens.shape[-1]
        if T < 1:
            raise ContractError("empty token sequence")
        if T > self.cfg.max_seq_len:
            raise ContractError(f"sequence of {T} tokens exceeds max_seq_len={self.cfg.max_seq_len}")
        a = self.cfg.attention
        pos = np.arange(T)
        h = nx.embedding(self.embed, tokens)
        outs = []
        for i, layer in enumerate(self.layers):
            kind = self.cfg.layer_kinds()[i]
            x = nx.rms_norm(h, layer.attn_norm)
            q, k, v = project_qkv(x, layer.attn, a)
            q, k = apply_rope(q, pos, a.rope_base), apply_rope(k, pos, a.rope_base)
            lo = LayerOutput(kind=kind, gate=None, keys=k.data, values=v.data)
            if kind == "routed":
                lo.router_logits = layer.router.logits(x)
                lo.soft_gate = nx.sigmoid(lo.router_logits)
                lo.hard_gate = hard_gate(lo.soft_gate, self.cfg.tau)
                gate = lo.hard_gate
                if force_gates is not None:
                    forced = np.broadcast_to(np.asarray(force_gates, dtype=float), (self.cfg.n_layers,) + tokens.shape)
                    gate = Tensor(forced[i])
                lo.o_full = full_attention(q, k, v, layer.attn, pos)
                lo.o_swa = sliding_window_attention(q, k, v, layer.attn, a.window, pos)
                o = mix_outputs(gate, lo.o_full, lo.o_swa)
                lo.gate = gate.data.copy()
            elif kind == "full":
                o = lo.o_full = full_attention(q, k, v, layer.attn, pos)
                lo.gate = np.ones(tokens.shape)
            else:
                o = lo.o_swa = sliding_window_attention(q, k, v, layer.attn, a.window, pos)
                lo.gate = np.zeros(tokens.shape)
            h = h + o
            h = h + ffn(nx.rms_norm(h, layer.ffn_norm), layer.w_gate, layer.w_up, layer.w_down)
            outs.append(lo)
        logits = nx.rms_norm(h, self.final_norm) @ self.embed.transpose()
        return ForwardOutput(logits, outs)

    __call__ = forward


def init_from_full(donor, cfg: ModelConfig | None = None, seed: int = 0) -> SwiAttnModel:
    """Build a routed model whose attention, FFN and embeddings are copied from a full-attention donor.

    ``donor`` is a SwiAttnModel or a Checkpoint. Routers get the fresh init (zero weights,
    positive bias), so with every gate on the full branch the new model reproduces the donor.
    """
    donor_cfg = donor.cfg if isinstance(donor, SwiAttnModel) else donor.config
    arrays = donor.state_dict() if isinstance(donor, SwiAttnModel) else donor.params
    if donor_cfg.attention_mode != "full_only":
        raise IncompatibleDonorError(f"donor must be a full_only model, got {donor_cfg.attention_mode!r}")
    cfg = cfg or donor_cfg.with_mode("swiattn")
    da, ca = donor_cfg.attention, cfg.attention
    shared = [("vocab_size", donor_cfg.vocab_size, cfg.vocab_size), ("n_layers", donor_cfg.n_layers, cfg.n_layers),
              ("ffn_hidden", donor_cfg.ffn_hidden, cfg.ffn_hidden)]
    shared += [(k, getattr(da, k), getattr(ca, k)) for k in ("d_model", "n_heads", "n_kv_heads", "head_dim")]
    bad = [f"{k}: donor {x} vs {y}" for k, x, y in shared if x != y]
    if bad:
        raise IncompatibleDonorError("donor does not match config: " + "; ".join(bad))
    model = SwiAttnModel.init(cfg, seed)
    model.load_parameters(arrays, strict=False)
    own = set(model.named_parameters())
    missing = [k for k in own if k not in arrays and ".router." not in k]
    if missing:
        raise IncompatibleDonorError(f"donor lacks parameters {missing}")
    return model
