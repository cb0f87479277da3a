"""Hybrid transformer with per-token, per-layer routing between full and sliding-window attention."""
from .attention import AttentionConfig
from .checkpoint import Checkpoint, load_checkpoint, load_model, save_checkpoint
from .data import SyntheticTask, make_niah
from .estimator import SwiAttnLM
from .inference import InferenceSession, generate
from .model import ModelConfig, SwiAttnModel, init_from_full, param_count
from .objective import RegularizerConfig
from .training import TrainConfig, cpt_swiattn, lr_at, pretrain_full

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "Checkpoint", "InferenceSession", "ModelConfig", "RegularizerConfig", "SwiAttnLM",
    "SwiAttnModel", "SyntheticTask", "TrainConfig", "cpt_swiattn", "generate", "init_from_full",
    "load_checkpoint", "load_model", "lr_at", "make_niah", "param_count", "pretrain_full", "save_checkpoint",
]
