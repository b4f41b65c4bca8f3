"""Encoder / semantic updater / decoder summarizer operating on abutting blocks.

The encoder maps a block of frames to a semantic embedding, the updater folds
in the (detached) embeddings carried from earlier blocks, and the decoder
scores summary tokens given the current semantic embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (
    AttentionConfig,
    causal_mask,
    conv_subsample,
    dropout,
    feed_forward,
    label_smoothed_cross_entropy,
    layer_norm,
    linear,
    min_subsample_frames,
    multi_head_attention,
    sinusoidal_positions,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
UPDATER_KINDS = ("concat", "gated", "hierarchical")


@dataclass
class ModelConfig:
    feature_dim: int = 16
    model_dim: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 128
    vocab_size: int = 68
    dropout_rate: float = 0.2
    updater_kind: str = "gated"
    markov_window: int = 1
    max_decode_len: int = 12

    def __post_init__(self):
        for name in ("feature_dim", "model_dim", "heads", "ff_dim", "max_decode_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.model_dim % 2:
            raise ValueError("model_dim must be even for sinusoidal positions")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must include the PAD/BOS/EOS/UNK ids (>= 4)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.updater_kind not in UPDATER_KINDS:
            raise ValueError(f"updater_kind must be one of {UPDATER_KINDS}, got {self.updater_kind!r}")
        if self.markov_window < 1:
            raise ValueError("markov_window must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def is_updater_param(name: str) -> bool:
    return name.startswith("upd.") or name.endswith(".hier_W")


def parameter_shapes(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) list; the parameter layout is a pure function of ``cfg``."""
    d, f, D, V, k = cfg.model_dim, cfg.ff_dim, cfg.feature_dim, cfg.vocab_size, 3
    shapes = [
        ("sub.conv1_W", (k * D, d)),
        ("sub.conv1_b", (d,)),
        ("sub.conv2_W", (k * d, d)),
        ("sub.conv2_b", (d,)),
        ("sub.proj_W", (d, d)),
        ("sub.proj_b", (d,)),
    ]

    def attn(prefix):
        out = []
        for m in ("q", "k", "v", "o"):
            out.append((f"{prefix}.W_{m}", (d, d)))
            # no key bias: it shifts every score of a query equally
            if m != "k":
                out.append((f"{prefix}.b_{m}", (d,)))
        return out

    def ln(prefix):
        return [(f"{prefix}_g", (d,)), (f"{prefix}_b", (d,))]

    def ff(prefix):
        return [(f"{prefix}.W_1", (d, f)), (f"{prefix}.b_1", (f,)), (f"{prefix}.W_2", (f, d)), (f"{prefix}.b_2", (d,))]

    for i in range(cfg.encoder_layers):
        p = f"enc.{i}"
        shapes += ln(f"{p}.ln1") + attn(f"{p}.attn") + ln(f"{p}.ln2") + ff(f"{p}.ff")
    shapes += ln("enc.ln")
    shapes.append(("tok_emb", (V, d)))
    for i in range(cfg.decoder_layers):
        p = f"dec.{i}"
        shapes += ln(f"{p}.ln1") + attn(f"{p}.self") + ln(f"{p}.ln2") + attn(f"{p}.cross")
        shapes += ln(f"{p}.ln3") + ff(f"{p}.ff")
        if cfg.updater_kind == "hierarchical":
            shapes.append((f"{p}.hier_W", (d, d)))
    shapes += ln("dec.ln") + [("out_W", (d, V)), ("out_b", (V,))]
    if cfg.updater_kind == "gated":
        shapes += attn("upd.attn") + [("upd.gate", (1,))]
    return shapes


def init_parameter(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith("_g"):
        return np.ones(shape)
    if name == "tok_emb":
        return rng.normal(0.0, 1.0, size=shape)
    if len(shape) == 1:
        # biases, layer-norm shifts and the updater gate start at zero
        return np.zeros(shape)
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


class Summarizer:
    """Parameters plus configuration of one block-wise summarizer.

    ``training`` toggles dropout; the dropout generator is seeded so runs are
    reproducible.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        self.config = config
        self.dtype = np.dtype(dtype or ad.get_default_dtype())
        self.seed = seed
        self.training = False
        self.rng = np.random.default_rng([seed, 1])
        init_rng = np.random.default_rng([seed, 0])
        self.params = {}
        for name, shape in parameter_shapes(config):
            value = init_parameter(name, shape, init_rng).astype(self.dtype)
            self.params[name] = Tensor(value, requires_grad=True)

    @property
    def attn_cfg(self) -> AttentionConfig:
        return AttentionConfig(self.config.model_dim, self.config.heads, self.config.dropout_rate)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def train(self, mode: bool = True) -> "Summarizer":
        self.training = mode
        return self

    def eval(self) -> "Summarizer":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.config.dropout_rate, self.training, self.rng)

    def _mha(self, q, k, v, prefix, mask=None):
        return multi_head_attention(
            q, k, v, self.params, prefix, self.attn_cfg, mask=mask,
            training=self.training, rng=self.rng,
        )

    def _ln(self, x, prefix):
        return layer_norm(x, self.params[f"{prefix}_g"], self.params[f"{prefix}_b"])


def _as_features(model: Summarizer, features) -> Tensor:
    if isinstance(features, Tensor):
        return features
    return Tensor(np.asarray(features, dtype=model.dtype))


def encode_block(model: Summarizer, features) -> Tensor:
    """Subsample a ``[N, D]`` block, add block-local positions, run the encoder stack."""
    x = _as_features(model, features)
    if x.ndim != 2 or x.shape[1] != model.config.feature_dim:
        raise ValueError(
            f"features must be [N, {model.config.feature_dim}], got {list(x.shape)}"
        )
    need = min_subsample_frames()
    if x.shape[0] < need:
        raise ValueError(f"block has {x.shape[0]} frames; the encoder needs at least {need}")
    h = conv_subsample(x, model.params, "sub")
    pos = sinusoidal_positions(h.shape[0], model.config.model_dim, model.dtype)
    h = model._drop(ad.add(h, Tensor(pos)))
    for i in range(model.config.encoder_layers):
        p = f"enc.{i}"
        y = model._ln(h, f"{p}.ln1")
        h = ad.add(h, model._drop(model._mha(y, y, y, f"{p}.attn")))
        y = model._ln(h, f"{p}.ln2")
        h = ad.add(h, model._drop(feed_forward(y, model.params, f"{p}.ff")))
    return model._ln(h, "enc.ln")


# ---------------------------------------------------------------------------
# semantic updaters


def _stack_context(prev: Sequence[Tensor]) -> Tensor:
    return prev[0] if len(prev) == 1 else ad.concat(list(prev), axis=0)


def updater_concat(prev: Sequence[Tensor], enc_out: Tensor) -> Tensor:
    """Carried embeddings (oldest first) followed by the current encoding along time."""
    if not prev:
        return enc_out
    return ad.concat(list(prev) + [enc_out], axis=0)


def updater_gated(model: Summarizer, prev: Sequence[Tensor], enc_out: Tensor) -> Tensor:
    """``enc + w * Attn(query=enc, key/value=prev)`` with a learned scalar gate ``w``."""
    if not prev:
        return enc_out
    ctx = _stack_context(prev)
    attended = model._mha(enc_out, ctx, ctx, "upd.attn")
    return ad.add(enc_out, ad.scale(attended, model.params["upd.gate"]))


def update_semantics(model: Summarizer, prev: Sequence[Tensor], enc_out: Tensor) -> Tensor:
    """Combine carried context with the current block encoding.

    The hierarchical updater works inside the decoder, so here it passes the
    encoding through unchanged.
    """
    if not prev:
        return enc_out
    kind = model.config.updater_kind
    if kind == "concat":
        return updater_concat(prev, enc_out)
    if kind == "gated":
        return updater_gated(model, prev, enc_out)
    return enc_out


def carry_context(
    model: Summarizer, context: Sequence[Tensor], semantics: Tensor, enc_out: Tensor
) -> List[Tensor]:
    """Next block's context: detached, at most ``markov_window`` entries.

    The concat updater carries the block's own encoding (bounded length);
    the attention updaters carry the updated embedding itself.
    """
    item = enc_out if model.config.updater_kind == "concat" else semantics
    window = model.config.markov_window
    return (list(context) + [item.detach()])[-window:]


# ---------------------------------------------------------------------------
# decoder


def _hierarchical_cross(model: Summarizer, y: Tensor, S: Tensor, prev: Tensor, prefix: str) -> Tensor:
    d = model.config.model_dim
    c_cur = model._mha(y, S, S, f"{prefix}.cross")
    c_prev = model._mha(y, prev, prev, f"{prefix}.cross")
    q = ad.matmul(y, model.params[f"{prefix}.hier_W"])
    ones_col = Tensor(np.ones((d, 1), dtype=model.dtype))
    ones_row = Tensor(np.ones((1, d), dtype=model.dtype))
    s_prev = ad.matmul(ad.mul(q, c_prev), ones_col)
    s_cur = ad.matmul(ad.mul(q, c_cur), ones_col)
    a = ad.softmax(ad.scale(ad.concat([s_prev, s_cur], axis=1), 1.0 / math.sqrt(d)), axis=1)
    w_prev = ad.matmul(ad.slice(a, 1, 0, 1), ones_row)
    w_cur = ad.matmul(ad.slice(a, 1, 1, 2), ones_row)
    return ad.add(ad.mul(w_prev, c_prev), ad.mul(w_cur, c_cur))


def decode_batch(
    model: Summarizer,
    S: Tensor,
    prefixes: Sequence[Sequence[int]],
    prev: Sequence[Tensor] = (),
) -> Tensor:
    """Next-token logits for several equal-length prefixes at once.

    Prefixes are stacked row-wise with a block-diagonal causal mask, giving a
    ``[B * L, V]`` result.
    """
    if not prefixes or not len(prefixes[0]):
        raise ValueError("decoder prefix must be non-empty")
    L = len(prefixes[0])
    if any(len(p) != L for p in prefixes):
        raise ValueError("decode_batch needs prefixes of equal length")
    B, d = len(prefixes), model.config.model_dim
    ids = np.concatenate([np.asarray(p, dtype=np.int64) for p in prefixes])
    pos = sinusoidal_positions(L, d, model.dtype)
    x = ad.add(ad.embedding(model.params["tok_emb"], ids), Tensor(np.tile(pos, (B, 1))))
    x = model._drop(x)
    mask = causal_mask(L) if B == 1 else np.kron(np.eye(B, dtype=bool), causal_mask(L))
    hier = model.config.updater_kind == "hierarchical" and len(prev) > 0
    ctx = _stack_context(prev) if hier else None
    for i in range(model.config.decoder_layers):
        p = f"dec.{i}"
        y = model._ln(x, f"{p}.ln1")
        x = ad.add(x, model._drop(model._mha(y, y, y, f"{p}.self", mask=mask)))
        y = model._ln(x, f"{p}.ln2")
        if hier:
            c = _hierarchical_cross(model, y, S, ctx, p)
        else:
            c = model._mha(y, S, S, f"{p}.cross")
        x = ad.add(x, model._drop(c))
        y = model._ln(x, f"{p}.ln3")
        x = ad.add(x, model._drop(feed_forward(y, model.params, f"{p}.ff")))
    x = model._ln(x, "dec.ln")
    return linear(x, model.params["out_W"], model.params["out_b"])


def decode_logits(
    model: Summarizer, S: Tensor, prefix: Sequence[int], prev: Sequence[Tensor] = ()
) -> Tensor:
    """``[len(prefix), V]`` next-token logits for a BOS-rooted prefix."""
    if len(prefix) == 0:
        raise ValueError("decoder prefix must be non-empty")
    if prefix[0] != BOS:
        raise ValueError("decoder prefix must start with BOS")
    return decode_batch(model, S, [list(prefix)], prev)


# ---------------------------------------------------------------------------
# full forward passes


def _check_reference(reference) -> np.ndarray:
    ref = np.asarray(reference, dtype=np.int64)
    if ref.ndim != 1 or len(ref) < 2 or ref[0] != BOS or ref[-1] != EOS:
        raise ValueError("reference must be a BOS ... EOS framed token sequence")
    return ref


def block_loss(
    model: Summarizer, S: Tensor, reference, prev: Sequence[Tensor] = (), label_smoothing: float = 0.15
) -> Tuple[Tensor, Tensor]:
    """Teacher-forced label-smoothed loss of the full reference given ``S``."""
    ref = _check_reference(reference)
    logits = decode_logits(model, S, ref[:-1], prev)
    loss = label_smoothed_cross_entropy(logits, ref[1:], label_smoothing, pad_id=PAD)
    return loss, logits


def forward_standard(model: Summarizer, features, reference, label_smoothing: float = 0.15):
    """Whole input as a single block with no carried context. Returns (loss, logits)."""
    S = encode_block(model, features)
    return block_loss(model, S, reference, (), label_smoothing)


def step_block(model: Summarizer, context: Sequence[Tensor], block):
    """Encode one block and update semantics. Returns (S, enc_out)."""
    enc = encode_block(model, block)
    return update_semantics(model, context, enc), enc


def forward_blockwise(
    model: Summarizer, blocks, reference, label_smoothing: float = 0.15, context=()
) -> Tuple[List[Tensor], List[Tensor]]:
    """Per-block losses against the full reference plus the final carried context.

    Context crossing a block boundary is detached, so each loss only has a
    gradient path into its own block.
    """
    if len(blocks) == 0:
        raise ValueError("forward_blockwise needs at least one block")
    context = list(context)
    losses = []
    for block in blocks:
        S, enc = step_block(model, context, block)
        loss, _ = block_loss(model, S, reference, context, label_smoothing)
        losses.append(loss)
        context = carry_context(model, context, S, enc)
    return losses, context

