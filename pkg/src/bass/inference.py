"""Greedy and beam decoding plus standard (whole input) and block inference."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import segment_for_model
from .model import BOS, EOS, PAD, Summarizer, carry_context, decode_batch, encode_block, step_block

logger = logging.getLogger(__name__)


@dataclass
class InferConfig:
    beam_size: int = 8
    max_decode_len: int = 12
    block_size_frames: int = 400
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be >= 1")
        if self.block_size_frames < 1:
            raise ValueError("block_size_frames must be >= 1")


@dataclass
class Hypothesis:
    tokens: List[int] = field(default_factory=lambda: [BOS])
    score: float = 0.0
    finished: bool = False

    @property
    def summary(self) -> List[int]:
        """Generated tokens without BOS and EOS."""
        body = self.tokens[1:]
        return body[:-1] if self.finished else body


@contextlib.contextmanager
def evaluating(model: Summarizer):
    """Dropout off and no tape recording for the duration of the block."""
    was = model.training
    model.training = False
    try:
        with ad.no_grad():
            yield model
    finally:
        model.training = was


def next_token_logprobs(
    model: Summarizer, S: Tensor, prefixes: Sequence[Sequence[int]], prev: Sequence[Tensor] = ()
) -> np.ndarray:
    """``[B, V]`` float64 log-probabilities of the next token; PAD and BOS are never emitted."""
    with evaluating(model):
        logits = decode_batch(model, S, prefixes, prev).data
    B, L = len(prefixes), len(prefixes[0])
    last = logits.reshape(B, L, -1)[:, -1, :].astype(np.float64)
    z = last - last.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp[:, PAD] = -np.inf
    logp[:, BOS] = -np.inf
    return logp


def greedy_decode(model: Summarizer, S: Tensor, max_len: int, prev: Sequence[Tensor] = ()) -> Hypothesis:
    """Argmax decoding from BOS until EOS or ``max_len`` generated tokens (ties to the lowest id)."""
    hyp = Hypothesis()
    for _ in range(max_len):
        logp = next_token_logprobs(model, S, [hyp.tokens], prev)[0]
        tok = int(np.argmax(logp))
        hyp = Hypothesis(hyp.tokens + [tok], hyp.score + float(logp[tok]), tok == EOS)
        if hyp.finished:
            break
    return hyp


def _final_score(h: Hypothesis, alpha: float) -> float:
    if alpha == 0.0:
        return h.score
    return h.score / (len(h.tokens) - 1) ** alpha


def beam_search(model: Summarizer, S: Tensor, cfg: InferConfig, prev: Sequence[Tensor] = ()) -> Hypothesis:
    """Length-synchronous beam search over summed log-probabilities.

    Each step ranks every (hypothesis, token) extension by score, then token
    id, then hypothesis order, and keeps the best ``beam_size``; extensions
    ending in EOS retire. If nothing finishes within ``max_decode_len``
    tokens the best unfinished hypothesis is returned with
    ``finished=False``.
    """
    k, alpha = cfg.beam_size, cfg.length_penalty
    live = [Hypothesis()]
    done: List[Hypothesis] = []
    for _ in range(cfg.max_decode_len):
        logp = next_token_logprobs(model, S, [h.tokens for h in live], prev)
        cand = []
        for b, h in enumerate(live):
            for tok in np.flatnonzero(np.isfinite(logp[b])):
                cand.append((h.score + float(logp[b, tok]), int(tok), b))
        cand.sort(key=lambda c: (-c[0], c[1], c[2]))
        parents, live = live, []
        for score, tok, b in cand[:k]:
            h = Hypothesis(parents[b].tokens + [tok], score, tok == EOS)
            (done if h.finished else live).append(h)
        if done and alpha == 0.0:
            # scores only decrease, so nothing below the best finished one can win
            best = max(h.score for h in done)
            live = [h for h in live if h.score > best]
        if not live:
            break
    if done:
        return max(done, key=lambda h: _final_score(h, alpha))
    logger.warning("no hypothesis reached EOS within %d tokens", cfg.max_decode_len)
    return live[0]


def infer_standard(model: Summarizer, features, cfg: InferConfig) -> Hypothesis:
    """Encode the entire input as one block and decode it."""
    if len(features) == 0:
        raise ValueError("cannot summarize an empty feature sequence")
    with evaluating(model):
        S = encode_block(model, features)
        return beam_search(model, S, cfg)


def infer_block(model: Summarizer, features, cfg: InferConfig) -> Tuple[List[Hypothesis], Hypothesis]:
    """Feed abutting blocks, re-decoding a full summary after each one.

    Returns the per-block hypotheses and the final one (after the last block).
    """
    blocks = segment_for_model(np.asarray(features), cfg.block_size_frames)
    hyps: List[Hypothesis] = []
    context: List[Tensor] = []
    with evaluating(model):
        for block in blocks:
            S, enc = step_block(model, context, block)
            hyps.append(beam_search(model, S, cfg, context))
            context = carry_context(model, context, S, enc)
    return hyps, hyps[-1]


def format_trace(block_texts: Sequence[str]) -> str:
    """``block <i>\\t<summary>`` lines, blocks numbered from 1."""
    return "".join(f"block {i}\t{t}\n" for i, t in enumerate(block_texts, 1))
