"""scikit-learn style wrapper around the model and training loop.

``X`` is always a 2-D integer array of token sequences with shape (n_sequences, T).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import numerics as nx
from .attention import AttentionConfig
from .errors import ContractError
from .inference import InferenceSession
from .model import ModelConfig, SwiAttnModel, init_from_full
from .objective import lm_loss
from .training import TrainConfig, train


def check_tokens(X, vocab_size: int, max_len: int | None = None) -> np.ndarray:
    """Validate a token matrix: 2-D, integral, within [0, vocab_size), at least 2 columns."""
    X = check_array(X, dtype=None, ensure_min_features=2)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ContractError("token ids must be integers")
        X = X.astype(np.int64)
    if X.min() < 0 or X.max() >= vocab_size:
        raise ContractError(f"token ids must lie in [0, {vocab_size})")
    if max_len is not None and X.shape[1] > max_len:
        raise ContractError(f"sequences of {X.shape[1]} tokens exceed max_seq_len={max_len}")
    return X.astype(np.int64, copy=False)


class _ArrayTask:
    """Draws training rows uniformly from a fixed token matrix."""

    def __init__(self, X: np.ndarray):
        self.X = X

    def batch(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return self.X[rng.integers(0, len(self.X), batch_size)]


class SwiAttnLM(BaseEstimator):
    """Byte-level language model with per-token routing between full and windowed attention.

    ``fit`` trains from scratch, or continues from ``donor`` (a fitted full_only
    estimator or model) when given.
    """

    def __init__(self, attention_mode="swiattn", n_layers=2, d_model=32, n_heads=4, n_kv_heads=2, head_dim=8,
                 window=16, ffn_hidden=64, vocab_size=256, max_seq_len=256, tau=0.5, total_steps=200,
                 batch_size=8, peak_lr=3e-3, warmup_steps=20, seed=0, donor=None):
        self.attention_mode = attention_mode
        self.n_layers = n_layers
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.window = window
        self.ffn_hidden = ffn_hidden
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len
        self.tau = tau
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.seed = seed
        self.donor = donor

    def model_config(self) -> ModelConfig:
        attn = AttentionConfig(d_model=self.d_model, n_heads=self.n_heads, n_kv_heads=self.n_kv_heads,
                               head_dim=self.head_dim, window=self.window)
        return ModelConfig(vocab_size=self.vocab_size, n_layers=self.n_layers, attention=attn,
                           ffn_hidden=self.ffn_hidden, attention_mode=self.attention_mode, tau=self.tau,
                           max_seq_len=self.max_seq_len)

    def fit(self, X, y=None):
        cfg = self.model_config()
        X = check_tokens(X, cfg.vocab_size, cfg.max_seq_len)
        tcfg = TrainConfig(total_steps=self.total_steps, batch_size=self.batch_size, seq_len=X.shape[1],
                           peak_lr=self.peak_lr, warmup_steps=self.warmup_steps, seed=self.seed)
        if self.donor is not None:
            donor = self.donor.model_ if isinstance(self.donor, SwiAttnLM) else self.donor
            model = init_from_full(donor, cfg, seed=self.seed)
        else:
            model = SwiAttnModel.init(cfg, self.seed)
        result = train(model, _ArrayTask(X), tcfg)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def _forward(self, X):
        check_is_fitted(self, "model_")
        X = check_tokens(X, self.vocab_size, self.max_seq_len)
        with nx.no_grad():
            return X, self.model_(X)

    def predict(self, X) -> np.ndarray:
        """Greedy next-token prediction at every position, shape (n, T)."""
        _, out = self._forward(X)
        return out.logits.data.argmax(-1)

    def predict_log_proba(self, X) -> np.ndarray:
        _, out = self._forward(X)
        z = out.logits.data
        m = z.max(-1, keepdims=True)
        return z - m - np.log(np.exp(z - m).sum(-1, keepdims=True))

    def transform(self, X) -> np.ndarray:
        """Hard gates (1 = full attention) per layer and token, shape (n, L, T)."""
        _, out = self._forward(X)
        return np.moveaxis(out.gates(), 0, 1)

    def score(self, X, y=None) -> float:
        """Negative mean next-token NLL (higher is better)."""
        X, out = self._forward(X)
        loss, _ = lm_loss(out.logits, X)
        return -loss.item()

    def generate(self, prompt, max_new: int = 16, stop_token: int | None = None) -> list:
        check_is_fitted(self, "model_")
        return InferenceSession(self.model_).generate(prompt, max_new, stop_token)
