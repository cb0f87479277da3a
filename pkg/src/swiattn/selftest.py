"""Fast invariant checks run by ``swiattn selftest``."""
from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import AttentionConfig, QKVProjection, full_attention, project_qkv, sliding_window_attention
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError
from .inference import InferenceSession, mem_access_for_trace
from .model import ModelConfig, SwiAttnModel
from .objective import RegularizerConfig, adaptive_weight

TOY = ModelConfig(vocab_size=32, n_layers=2, attention=AttentionConfig(d_model=16, n_heads=4, n_kv_heads=2,
                                                                        head_dim=4, window=4),
                  ffn_hidden=24, max_seq_len=32)


def _op_gradients():
    rng = np.random.default_rng(0)
    x, w, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 4))
    mask = np.tril(np.ones((3, 3), dtype=bool))
    err = max(
        nx.gradcheck(lambda a, b: nx.sigmoid(a @ b).sum(), [x, w]),
        nx.gradcheck(lambda a: (nx.softplus(a) * nx.silu(a)).sum(), [x]),
        nx.gradcheck(lambda a: (nx.softmax_rows(a[:, :3], mask) * x[:, :3]).sum(), [x]),
        nx.gradcheck(lambda a: (nx.rms_norm(a, nx.Tensor(np.ones(4))) * c).sum(), [x]),
    )
    return err < 1e-5, f"max rel err {err:.1e}"


def _branch_equivalence():
    rng = np.random.default_rng(1)
    cfg = AttentionConfig(d_model=8, n_heads=2, n_kv_heads=1, head_dim=4, window=8)
    proj = QKVProjection.init(cfg, rng)
    h = nx.Tensor(rng.normal(size=(6, 8)))
    q, k, v = project_qkv(h, proj, cfg)
    diff = np.abs(full_attention(q, k, v, proj).data - sliding_window_attention(q, k, v, proj, 8).data).max()
    return diff < 1e-12, f"max diff {diff:.1e}"


def _decode_matches_forward():
    model = SwiAttnModel.init(TOY, 0)
    tokens = np.random.default_rng(2).integers(0, TOY.vocab_size, 12)
    with nx.no_grad():
        ref = model(tokens).logits.data
    session = InferenceSession(model)
    rows = [session.prefill(tokens[:5])]
    rows += [session.decode_step(int(t)) for t in tokens[5:]]
    diff = np.abs(np.stack(rows) - ref[4:]).max()
    return diff < 1e-9, f"max diff {diff:.1e}"


def _memory_access():
    full, swa = mem_access_for_trace([1, 1], 32, 16), mem_access_for_trace([0, 0], 32, 16)
    return (full, swa) == (32.0, 16.0), f"full={full} swa={swa}"


def _gamma_bound():
    g = adaptive_weight(np.zeros(4), np.zeros(4), RegularizerConfig())
    return bool(np.allclose(g, 0.01)), f"gamma at zero loss {float(g[0]):.4g}"


def _checkpoint_roundtrip():
    model = SwiAttnModel.init(TOY, 3)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(model, path)
        same = all(np.array_equal(a, load_checkpoint(path).params[k]) for k, a in model.state_dict().items())
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        try:
            load_checkpoint(path)
            rejected = False
        except CheckpointError:
            rejected = True
    return same and rejected, f"bit-exact={same} truncation-rejected={rejected}"


CHECKS = {
    "op_gradients": _op_gradients,
    "branch_equivalence": _branch_equivalence,
    "decode_matches_forward": _decode_matches_forward,
    "memory_access": _memory_access,
    "gamma_bound": _gamma_bound,
    "checkpoint_roundtrip": _checkpoint_roundtrip,
}


def run_selftest() -> list:
    """[(name, ok, detail)] for every check; exceptions count as failures."""
    results = []
    for name, check in CHECKS.items():
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failed check, reported not raised
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
