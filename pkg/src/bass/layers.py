"""Transformer building blocks expressed through :mod:`bass.autodiff`.

Layers are pure functions over an explicit parameter map (``dict`` of name to
:class:`~bass.autodiff.Tensor`) plus a name prefix, so the same function
serves every layer instance of a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SUBSAMPLE_KERNEL = 3
SUBSAMPLE_STRIDE = 2


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    heads: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.model_dim < 1 or self.heads < 1:
            raise ValueError("model_dim and heads must be positive")
        if self.model_dim % self.heads:
            raise ValueError(
                f"model_dim {self.model_dim} is not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


Params = Mapping[str, Tensor]


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ W + b`` with ``b`` added to every row."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input {list(x.shape)} does not match weight {list(W.shape)}")
    out = ad.matmul(x, W)
    return out if b is None else ad.add_bias(out, b)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return ad.layer_norm_op(x, gamma, beta, eps)


def sinusoidal_positions(length: int, dim: int, dtype=None) -> np.ndarray:
    """Absolute sinusoidal encoding: even columns sin, odd columns cos."""
    if dim % 2:
        raise ValueError(f"positional dim must be even, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table.astype(dtype or ad.get_default_dtype())


def attention_mask(allowed: np.ndarray) -> np.ndarray:
    """Additive mask: 0 where allowed, -inf where forbidden."""
    allowed = np.asarray(allowed, dtype=bool)
    if not allowed.any(axis=-1).all():
        raise ValueError("attention mask has a query row with every key forbidden")
    return np.where(allowed, 0.0, -np.inf)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def attention_weights(
    q: Tensor, k: Tensor, heads: int, mask: Optional[np.ndarray] = None
) -> Tensor:
    """Per-head softmax(QK^T / sqrt(d_head) + mask) over already projected Q, K.

    Returns a ``[heads, m, n]`` tensor.
    """
    m, d = q.shape
    n = k.shape[0]
    dh = d // heads
    qh = ad.transpose(ad.reshape(q, (m, heads, dh)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(k, (n, heads, dh)), (1, 2, 0))
    scores = ad.scale(ad.matmul(qh, kh), 1.0 / math.sqrt(dh))
    if mask is not None:
        add = attention_mask(mask).astype(scores.dtype)
        scores = ad.add(scores, Tensor(np.broadcast_to(add, scores.shape).copy()))
    return ad.softmax(scores, axis=-1)


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    params: Params,
    prefix: str,
    cfg: AttentionConfig,
    mask: Optional[np.ndarray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with ``cfg.heads`` heads.

    ``mask`` is a boolean ``[m, n]`` array, True where the query may attend.
    Parameters ``{prefix}.W_q/b_q/W_k/W_v/b_v/W_o/b_o`` are read from
    ``params``; a key bias ``b_k`` is used when present.
    """
    d = cfg.model_dim
    if query.shape[-1] != d or key.shape[-1] != d or value.shape[-1] != d:
        raise ValueError(f"attention inputs must have model_dim {d}")
    if key.shape[0] != value.shape[0]:
        raise ValueError("attention keys and values differ in length")
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    q = linear(query, p("W_q"), p("b_q"))
    k = linear(key, p("W_k"), params.get(f"{prefix}.b_k"))
    v = linear(value, p("W_v"), p("b_v"))
    weights = attention_weights(q, k, cfg.heads, mask)
    attn = dropout(weights, cfg.dropout_rate, training, rng)
    m, n, h = query.shape[0], key.shape[0], cfg.heads
    vh = ad.transpose(ad.reshape(v, (n, h, d // h)), (1, 0, 2))
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, vh), (1, 0, 2)), (m, d))
    out = linear(ctx, p("W_o"), p("b_o"))
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, params: Params, prefix: str) -> Tensor:
    h = ad.relu(linear(x, params[f"{prefix}.W_1"], params[f"{prefix}.b_1"]))
    return linear(h, params[f"{prefix}.W_2"], params[f"{prefix}.b_2"])


def subsampled_length(n: int, kernel: int = SUBSAMPLE_KERNEL) -> int:
    """Output length of two stride-2 valid convolutions."""
    first = (n - kernel) // SUBSAMPLE_STRIDE + 1
    return (first - kernel) // SUBSAMPLE_STRIDE + 1


def min_subsample_frames(kernel: int = SUBSAMPLE_KERNEL) -> int:
    """Smallest input length that yields at least one output frame."""
    return kernel + SUBSAMPLE_STRIDE * (kernel - 1)


def _conv1d_stride2(x: Tensor, W: Tensor, b: Tensor, kernel: int) -> Tensor:
    # im2col: row t gathers frames 2t .. 2t+kernel-1
    n = x.shape[0]
    out_len = (n - kernel) // SUBSAMPLE_STRIDE + 1
    taps = [
        ad.slice(x, 0, j, j + SUBSAMPLE_STRIDE * (out_len - 1) + 1, SUBSAMPLE_STRIDE)
        for j in range(kernel)
    ]
    return linear(ad.concat(taps, axis=1), W, b)


def conv_subsample(x: Tensor, params: Params, prefix: str, kernel: int = SUBSAMPLE_KERNEL) -> Tensor:
    """Two stride-2 1-D convolutions with relu, then a projection to model_dim.

    Reduces time by roughly 4: ``L = ((N - k)//2 + 1 - k)//2 + 1``.
    """
    n = x.shape[0]
    need = min_subsample_frames(kernel)
    if n < need:
        raise ValueError(f"input has {n} frames; convolutional subsampling needs at least {need}")
    h = ad.relu(_conv1d_stride2(x, params[f"{prefix}.conv1_W"], params[f"{prefix}.conv1_b"], kernel))
    h = ad.relu(_conv1d_stride2(h, params[f"{prefix}.conv2_W"], params[f"{prefix}.conv2_b"], kernel))
    return linear(h, params[f"{prefix}.proj_W"], params[f"{prefix}.proj_b"])


def dropout(
    x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return ad.mul(x, Tensor(keep))


def smoothed_targets(
    targets: np.ndarray, vocab_size: int, epsilon: float, pad_id: int
) -> np.ndarray:
    """Target distribution: 1-eps on gold, eps spread evenly over the other non-pad classes."""
    support = vocab_size - 2 if 0 <= pad_id < vocab_size else vocab_size - 1
    q = np.full((len(targets), vocab_size), epsilon / support if support else 0.0)
    if 0 <= pad_id < vocab_size:
        q[:, pad_id] = 0.0
    q[np.arange(len(targets)), targets] = 1.0 - epsilon
    return q


def label_smoothed_cross_entropy(
    logits: Tensor, targets, epsilon: float = 0.15, pad_id: int = 0
) -> Tensor:
    """Mean KL(smoothed target || softmax(logits)) over non-pad positions."""
    targets = np.asarray(targets, dtype=np.int64)
    L, V = logits.shape
    if targets.shape != (L,):
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {L}")
    keep = targets != pad_id
    if not keep.any():
        raise ValueError("label_smoothed_cross_entropy: every target is padding")
    if targets.min() < 0 or targets.max() >= V:
        raise ValueError(f"target id out of range [0, {V})")
    q = smoothed_targets(targets[keep], V, epsilon, pad_id)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = float(np.sum(np.where(q > 0, q * np.log(q), 0.0)))
    rows = logits if keep.all() else _take_rows(logits, np.flatnonzero(keep))
    logp = ad.log_softmax(rows, axis=-1)
    cross = ad.sum(ad.mul(logp, Tensor(q.astype(logp.dtype))))
    n = int(keep.sum())
    return ad.scale(ad.add(ad.neg(cross), entropy), 1.0 / n)


def _take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    return ad.concat([ad.slice(x, 0, int(r), int(r) + 1) for r in rows], axis=0)
