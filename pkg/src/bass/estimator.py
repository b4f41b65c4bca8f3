"""scikit-learn style wrapper around training and inference.

``X`` is a sequence of ``[N_i, D]`` feature arrays (lengths may differ) and
``y`` a sequence of summaries given as token-id lists without BOS/EOS.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .data import Utterance, segment_for_model
from .inference import InferConfig, evaluating, infer_block, infer_standard
from .layers import min_subsample_frames
from .metrics import corpus_rouge
from .model import BOS, EOS, ModelConfig, carry_context, step_block
from .training import MODES, TrainConfig, train


def check_feature_sequences(X, feature_dim: Optional[int] = None) -> List[np.ndarray]:
    """Validate a ragged batch of feature matrices; returns float32 copies."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a sequence of 2-D feature arrays, got a single 2-D array")
    out = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"X[{i}] has {arr.ndim} dimensions, expected 2")
        if len(arr) < min_subsample_frames():
            raise ValueError(f"X[{i}] has {len(arr)} frames; at least {min_subsample_frames()} are needed")
        if feature_dim is not None and arr.shape[1] != feature_dim:
            raise ValueError(f"X[{i}] has feature dim {arr.shape[1]}, expected {feature_dim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"X[{i}] contains NaN or infinity")
        feature_dim = arr.shape[1]
        out.append(arr)
    if not out:
        raise ValueError("X is empty")
    return out


def check_summaries(y, n: int, vocab_size: Optional[int] = None) -> List[List[int]]:
    """Validate token-id summaries (no BOS/EOS/PAD inside)."""
    seqs = [list(map(int, s)) for s in y]
    if len(seqs) != n:
        raise ValueError(f"X has {n} samples but y has {len(seqs)}")
    for i, s in enumerate(seqs):
        for t in s:
            if t in (0, BOS, EOS) or t < 0 or (vocab_size is not None and t >= vocab_size):
                raise ValueError(f"y[{i}] contains invalid token id {t}")
    return seqs


class BassSummarizer(BaseEstimator):
    """Block-wise speech summarizer.

    ``mode`` selects truncated training (``trunc``), block-wise training from
    scratch (``bass_train``) or block-wise adaptation of ``base_checkpoint``
    (``bass_adapt``). ``strategy`` picks standard or block inference.
    """

    def __init__(
        self,
        mode: str = "trunc",
        epochs: int = 30,
        peak_lr: float = 1e-3,
        warmup_steps: int = 400,
        label_smoothing: float = 0.15,
        train_maxlen_frames: int = 400,
        block_size_frames: int = 400,
        model_dim: int = 64,
        heads: int = 4,
        encoder_layers: int = 2,
        decoder_layers: int = 2,
        ff_dim: int = 128,
        dropout_rate: float = 0.2,
        updater_kind: str = "gated",
        markov_window: int = 1,
        vocab_size: Optional[int] = None,
        beam_size: int = 8,
        max_decode_len: int = 12,
        strategy: str = "block",
        base_checkpoint: Optional[str] = None,
        seed: int = 0,
    ):
        self.mode = mode
        self.epochs = epochs
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.label_smoothing = label_smoothing
        self.train_maxlen_frames = train_maxlen_frames
        self.block_size_frames = block_size_frames
        self.model_dim = model_dim
        self.heads = heads
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.ff_dim = ff_dim
        self.dropout_rate = dropout_rate
        self.updater_kind = updater_kind
        self.markov_window = markov_window
        self.vocab_size = vocab_size
        self.beam_size = beam_size
        self.max_decode_len = max_decode_len
        self.strategy = strategy
        self.base_checkpoint = base_checkpoint
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, peak_lr=self.peak_lr, warmup_steps=self.warmup_steps,
            label_smoothing=self.label_smoothing, train_maxlen_frames=self.train_maxlen_frames,
            block_size_frames=self.block_size_frames, seed=self.seed, mode=self.mode,
            base_checkpoint=self.base_checkpoint,
        )

    def _infer_config(self) -> InferConfig:
        return InferConfig(self.beam_size, self.max_decode_len, self.block_size_frames)

    def fit(self, X, y):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.strategy not in ("standard", "block"):
            raise ValueError(f"strategy must be 'standard' or 'block', got {self.strategy!r}")
        feats = check_feature_sequences(X)
        summaries = check_summaries(y, len(feats), self.vocab_size)
        dataset = [
            Utterance(f"fit-{i:06d}", x, [BOS] + s + [EOS]) for i, (x, s) in enumerate(zip(feats, summaries))
        ]
        tcfg = self._train_config()
        if self.mode == "bass_adapt":
            if self.base_checkpoint is None:
                raise ValueError("mode 'bass_adapt' needs base_checkpoint")
            base = load_checkpoint(self.base_checkpoint)
            model_cfg = base.config
            overrides = dict(updater_kind=self.updater_kind, markov_window=self.markov_window)
        else:
            vocab = self.vocab_size or max([max(s, default=3) for s in summaries]) + 1
            model_cfg = ModelConfig(
                feature_dim=feats[0].shape[1], model_dim=self.model_dim, heads=self.heads,
                encoder_layers=self.encoder_layers, decoder_layers=self.decoder_layers, ff_dim=self.ff_dim,
                vocab_size=max(vocab, 4), dropout_rate=self.dropout_rate, updater_kind=self.updater_kind,
                markov_window=self.markov_window, max_decode_len=self.max_decode_len,
            )
            overrides = {}
        self.model_, self.report_ = train(model_cfg, tcfg, dataset, None, **overrides)
        self.n_features_in_ = self.model_.config.feature_dim
        return self

    def _check_X(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        return check_feature_sequences(X, self.n_features_in_)

    def predict(self, X) -> List[List[int]]:
        """Summaries as token-id lists (no BOS/EOS)."""
        feats = self._check_X(X)
        cfg = self._infer_config()
        if self.strategy == "standard":
            return [infer_standard(self.model_, x, cfg).summary for x in feats]
        return [infer_block(self.model_, x, cfg)[1].summary for x in feats]

    def transform(self, X) -> np.ndarray:
        """``[n, model_dim]`` mean of the final block's semantic embeddings for each input."""
        feats = self._check_X(X)
        out = np.zeros((len(feats), self.model_.config.model_dim), dtype=np.float32)
        with evaluating(self.model_):
            for i, x in enumerate(feats):
                size = self.block_size_frames if self.strategy == "block" else len(x)
                context = []
                for block in segment_for_model(x, size):
                    S, enc = step_block(self.model_, context, block)
                    context = carry_context(self.model_, context, S, enc)
                out[i] = S.data.mean(axis=0)
        ad.clear_tape()
        return out

    def score(self, X, y) -> float:
        """Corpus ROUGE-L F1 (0-100) of :meth:`predict` against ``y``."""
        refs = check_summaries(y, len(X))
        return corpus_rouge(self.predict(X), refs)["ROUGE-L"].f1
