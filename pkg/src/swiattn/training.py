"""Optimisation loop: warmup + cosine schedule, Adam, full-attention pretraining and routed CPT."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint, save_checkpoint
from .data import SyntheticTask
from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from .model import ModelConfig, SwiAttnModel, init_from_full
from .objective import lm_loss, swiattn_objective

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 1000
    batch_size: int = 16
    seq_len: int = 64
    peak_lr: float = 3e-3
    warmup_steps: int = 100
    decay_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("total_steps, batch_size must be >= 1 and seq_len >= 2")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must lie in [0, total_steps)")
        if self.decay_steps is not None and not 0 < self.decay_steps <= self.total_steps - self.warmup_steps:
            raise ConfigError("decay_steps must lie in (0, total_steps - warmup_steps]")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to peak, optional constant plateau, cosine decay to 0 at total_steps."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    decay = cfg.decay_steps or (cfg.total_steps - cfg.warmup_steps)
    start = cfg.total_steps - decay
    if step <= start:
        return cfg.peak_lr
    progress = (step - start) / decay
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam with global-norm gradient clipping; no weight decay."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.95, eps=1e-8, grad_clip: float | None = 1.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.grad_clip = beta1, beta2, eps, grad_clip
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm")
        scale = min(1.0, self.grad_clip / (norm + 1e-12)) if self.grad_clip else 1.0
        self.t += 1
        c1, c2 = 1.0 - self.beta1 ** self.t, 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm

    def state(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array(float(self.t))
        return out


@dataclass
class TrainResult:
    model: SwiAttnModel
    history: list = field(default_factory=list)
    optimizer: Adam | None = None

    def series(self, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.history])

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.model.cfg, self.model.state_dict(), len(self.history),
                          self.optimizer.state() if self.optimizer else None)


def train_step(model: SwiAttnModel, batch: np.ndarray, opt: Adam, lr: float) -> dict:
    """One optimisation step; returns the telemetry row (without step/lr)."""
    model.zero_grad()
    out = model(batch)
    routed = any(lo.router_logits is not None for lo in out.layers)
    if routed:
        total, lm, br = swiattn_objective(out, batch, model.cfg.regularizer)
    else:
        total, _ = lm_loss(out.logits, batch)
        lm, br = total, None
    if not math.isfinite(total.item()):
        raise DivergenceError("non-finite loss")
    total.backward()
    gnorm = opt.step(lr)
    gates = out.gates()
    row = {"loss": total.item(), "lm_loss": lm.item(), "grad_norm": gnorm,
           "full_ratio": float(gates.mean()),
           "layer_full_ratio": [float(g.mean()) for g in gates]}
    if br is not None:
        row.update(reg_mean=float(br.reg.mean()), gamma_mean=float(br.gamma.mean()),
                   gamma_max=float(br.gamma.max()), mse_mean=float(br.mse.mean()))
    else:
        row.update(reg_mean=0.0, gamma_mean=0.0, gamma_max=0.0, mse_mean=0.0)
    return row


def train(model: SwiAttnModel, task: SyntheticTask, cfg: TrainConfig, log_every: int = 0) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.grad_clip)
    result = TrainResult(model, [], opt)
    for step in range(1, cfg.total_steps + 1):
        batch = task.batch(cfg.batch_size, rng)
        lr = lr_at(step, cfg)
        try:
            row = train_step(model, batch, opt, lr)
        except NonFiniteError as exc:
            raise DivergenceError(f"step {step}: {exc}") from exc
        row.update(step=step, lr=lr)
        result.history.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d lm %.4f reg %.2e full %.3f", step, row["lm_loss"], row["reg_mean"], row["full_ratio"])
    return result


def pretrain_full(model_cfg: ModelConfig, task: SyntheticTask, cfg: TrainConfig, out_dir=None,
                  log_every: int = 0) -> TrainResult:
    """Train a full-attention donor from scratch."""
    if model_cfg.attention_mode != "full_only":
        raise ConfigError("pretrain_full needs attention_mode='full_only'")
    model = SwiAttnModel.init(model_cfg, cfg.seed)
    result = train(model, task, cfg, log_every)
    if out_dir is not None:
        write_run(result, out_dir, "donor.ckpt")
    return result


def cpt_swiattn(donor, task: SyntheticTask, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                out_dir=None, log_every: int = 0) -> TrainResult:
    """Continual pretraining: copy the donor into a routed model and train with the regularised loss.

    The optimiser starts fresh.
    """
    model = init_from_full(donor, model_cfg, seed=cfg.seed)
    result = train(model, task, cfg, log_every)
    if out_dir is not None:
        write_run(result, out_dir, "swiattn.ckpt")
    return result


def evaluate_lm(model: SwiAttnModel, batches) -> float:
    """Mean next-token NLL over the given batches."""
    losses = []
    with nx.no_grad():
        for b in batches:
            loss, _ = lm_loss(model(b).logits, b)
            losses.append(loss.item())
    if not losses:
        raise ContractError("no evaluation batches")
    return float(np.mean(losses))


def eval_batches(task: SyntheticTask, n: int, batch_size: int, seed: int) -> list:
    rng = np.random.default_rng(seed)
    return [task.batch(batch_size, rng) for _ in range(n)]


# -- telemetry files ------------------------------------------------------------

def write_loss_csv(history: list, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lm_loss", "reg_mean", "lr"])
        for row in history:
            w.writerow([row["step"], repr(row["lm_loss"]), repr(row["reg_mean"]), repr(row["lr"])])
    return path


def write_ratio_csv(history: list, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "layer", "full_ratio"])
        for row in history:
            for layer, r in enumerate(row["layer_full_ratio"]):
                w.writerow([row["step"], layer, repr(r)])
    return path


def write_run(result: TrainResult, out_dir, ckpt_name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_loss_csv(result.history, out / "loss.csv")
    write_ratio_csv(result.history, out / "ratios.csv")
    save_checkpoint(result.model, out / ckpt_name, step=len(result.history),
                    optimizer_state=result.optimizer.state() if result.optimizer else None)
    return out
