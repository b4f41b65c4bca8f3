"""Adam, the warmup schedule and the three training procedures.

* ``trunc``: every utterance cut to ``train_maxlen_frames`` and trained as a
  single block;
* ``bass_train``: block-wise training from random initialization, one
  optimizer step per block;
* ``bass_adapt``: the same block-wise loop started from a truncated-input
  checkpoint.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Utterance, segment_for_model
from .model import ModelConfig, Summarizer, block_loss, carry_context, forward_standard, step_block

logger = logging.getLogger(__name__)

MODES = ("trunc", "bass_train", "bass_adapt")


@dataclass
class TrainConfig:
    epochs: int = 30
    peak_lr: float = 1e-3
    warmup_steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.15
    train_maxlen_frames: int = 400
    block_size_frames: int = 400
    grad_clip: float = 5.0
    seed: int = 0
    mode: str = "trunc"
    base_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.block_size_frames < 1 or self.train_maxlen_frames < 1:
            raise ValueError("frame counts must be positive")
        if self.block_size_frames > self.train_maxlen_frames:
            raise ValueError(
                f"block_size_frames {self.block_size_frames} exceeds train_maxlen_frames {self.train_maxlen_frames}"
            )
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def warmup_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, then inverse square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def clip_grad_norm(grads: Dict[str, Optional[np.ndarray]], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for g in grads.values():
            if g is not None:
                g *= g.dtype.type(factor)
    return total


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    betas=(0.9, 0.98),
    eps: float = 1e-9,
) -> None:
    """Bias-corrected Adam update in place; parameter gradients are zeroed afterwards.

    A missing gradient counts as zero.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        p.grad = None


class Optimizer:
    """Adam with warmup schedule and gradient clipping bound to one model."""

    def __init__(self, model: Summarizer, config: TrainConfig):
        self.model = model
        self.config = config
        self.state = AdamState()

    @property
    def steps(self) -> int:
        return self.state.step

    def step(self) -> float:
        cfg = self.config
        grads = {n: p.grad for n, p in self.model.params.items()}
        clip_grad_norm(grads, cfg.grad_clip)
        lr = warmup_lr(self.state.step + 1, cfg.peak_lr, cfg.warmup_steps)
        adam_step(self.model.params, grads, self.state, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
        return lr


@dataclass
class RunReport:
    epoch_losses: List[float] = field(default_factory=list)
    block_losses: List[List[float]] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    checkpoint_path: Optional[str] = None

    def to_text(self) -> str:
        """``epoch <e> loss <x>`` lines and a summary line (wall time excluded, so reports are reproducible)."""
        lines = [f"epoch {e} loss {loss:.6f}" for e, loss in enumerate(self.epoch_losses, 1)]
        final = self.epoch_losses[-1] if self.epoch_losses else float("nan")
        lines.append(f"final epochs {len(self.epoch_losses)} steps {self.steps} loss {final:.6f}")
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> List[float]:
    """Epoch losses from :meth:`RunReport.to_text` output."""
    out = []
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0] == "epoch" and parts[2] == "loss":
            out.append(float(parts[3]))
    return out


def truncate(features: np.ndarray, maxlen: int) -> np.ndarray:
    return features[:maxlen]


def truncated_step(model: Summarizer, features, reference, optimizer: Optimizer) -> float:
    loss, _ = forward_standard(model, features, reference, optimizer.config.label_smoothing)
    ad.backward(loss)
    optimizer.step()
    return loss.item()


def block_training_step(
    model: Summarizer, features, reference, optimizer: Optimizer, block_size: int
) -> List[float]:
    """Forward, backward and one optimizer step per block, carrying detached context."""
    blocks = segment_for_model(np.asarray(features), block_size)
    context: List[Tensor] = []
    losses = []
    for block in blocks:
        S, enc = step_block(model, context, block)
        loss, _ = block_loss(model, S, reference, context, optimizer.config.label_smoothing)
        ad.backward(loss)
        optimizer.step()
        losses.append(loss.item())
        context = carry_context(model, context, S, enc)
    return losses


def _run(model: Summarizer, config: TrainConfig, dataset: Sequence[Utterance], blockwise: bool,
         checkpoint_path=None):
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    start = time.perf_counter()
    ad.clear_tape()
    order_rng = np.random.default_rng([config.seed, 2])
    opt = Optimizer(model, config)
    report = RunReport()
    model.train()
    try:
        for epoch in range(1, config.epochs + 1):
            epoch_losses = []
            for idx in order_rng.permutation(len(dataset)):
                utt = dataset[idx]
                feats = truncate(utt.features, config.train_maxlen_frames)
                if blockwise:
                    per = block_training_step(model, feats, utt.reference, opt, config.block_size_frames)
                else:
                    per = [truncated_step(model, feats, utt.reference, opt)]
                report.block_losses.append(per)
                epoch_losses.append(math.fsum(per) / len(per))
            report.epoch_losses.append(math.fsum(epoch_losses) / len(epoch_losses))
            logger.info("epoch %d loss %.6f", epoch, report.epoch_losses[-1])
    finally:
        model.eval()
    report.steps = opt.steps
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
        report.checkpoint_path = str(checkpoint_path)
    report.wall_time = time.perf_counter() - start
    return model, report


def _expect_mode(config: TrainConfig, mode: str) -> None:
    if config.mode != mode:
        raise ValueError(f"config.mode is {config.mode!r}, expected {mode!r}")


def train_truncated(model_config: ModelConfig, config: TrainConfig, dataset, checkpoint_path=None):
    """Truncated baseline: each utterance cut to ``train_maxlen_frames``, one step per utterance.

    Returns ``(model, report)``.
    """
    _expect_mode(config, "trunc")
    model = Summarizer(model_config, seed=config.seed)
    return _run(model, config, dataset, False, checkpoint_path)


def bass_train(model_config: ModelConfig, config: TrainConfig, dataset, checkpoint_path=None):
    """Block-wise training from random initialization."""
    _expect_mode(config, "bass_train")
    model = Summarizer(model_config, seed=config.seed)
    return _run(model, config, dataset, True, checkpoint_path)


def bass_adapt(base_checkpoint, config: TrainConfig, dataset, checkpoint_path=None, **overrides):
    """Block-wise fine-tuning initialized from a truncated-input checkpoint.

    ``overrides`` (e.g. ``updater_kind="gated"``) adjust the loaded model
    configuration; updater parameters missing from the base are initialized
    fresh, with the gate at zero.
    """
    _expect_mode(config, "bass_adapt")
    model = load_checkpoint(base_checkpoint, seed=config.seed, **overrides)
    return _run(model, config, dataset, True, checkpoint_path)


def train(model_config: ModelConfig, config: TrainConfig, dataset, checkpoint_path=None, **overrides):
    """Dispatch on ``config.mode``."""
    if config.mode == "trunc":
        return train_truncated(model_config, config, dataset, checkpoint_path)
    if config.mode == "bass_train":
        return bass_train(model_config, config, dataset, checkpoint_path)
    if config.base_checkpoint is None:
        raise ValueError("bass_adapt needs base_checkpoint")
    return bass_adapt(config.base_checkpoint, config, dataset, checkpoint_path, **overrides)
