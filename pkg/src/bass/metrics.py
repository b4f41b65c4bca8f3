"""ROUGE-1/2/L on token lists, scaled to [0, 100]."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Hashable, List, Sequence


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "RougeScore":
        if precision + recall == 0:
            return cls(precision, recall, 0.0)
        return cls(precision, recall, 2 * precision * recall / (precision + recall))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Length of the longest common subsequence (row-by-row DP)."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hyp: Sequence[Hashable], ref: Sequence[Hashable], n: int) -> RougeScore:
    """Clipped n-gram overlap; an empty denominator scores 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    h, r = _ngrams(hyp, n), _ngrams(ref, n)
    overlap = sum((h & r).values())
    hn, rn = sum(h.values()), sum(r.values())
    p = 100.0 * overlap / hn if hn else 0.0
    rec = 100.0 * overlap / rn if rn else 0.0
    return RougeScore.from_pr(p, rec)


def rouge_l(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> RougeScore:
    lcs = lcs_length(hyp, ref)
    p = 100.0 * lcs / len(hyp) if hyp else 0.0
    r = 100.0 * lcs / len(ref) if ref else 0.0
    return RougeScore.from_pr(p, r)


METRICS = ("ROUGE-1", "ROUGE-2", "ROUGE-L")


def sentence_rouge(hyp, ref) -> Dict[str, RougeScore]:
    return {"ROUGE-1": rouge_n(hyp, ref, 1), "ROUGE-2": rouge_n(hyp, ref, 2), "ROUGE-L": rouge_l(hyp, ref)}


def corpus_rouge(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> Dict[str, RougeScore]:
    """Unweighted mean of per-pair precision, recall and F1 for each metric.

    Sums are exactly rounded, so the result does not depend on pair order.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")
    per_pair: List[Dict[str, RougeScore]] = [sentence_rouge(h, r) for h, r in zip(hyps, refs)]
    out = {}
    for m in METRICS:
        scores = [s[m] for s in per_pair]
        k = len(scores)
        out[m] = RougeScore(
            math.fsum(s.precision for s in scores) / k,
            math.fsum(s.recall for s in scores) / k,
            math.fsum(s.f1 for s in scores) / k,
        )
    return out


def format_report(scores: Dict[str, RougeScore]) -> str:
    """``ROUGE-1 <f>\\tROUGE-2 <f>\\tROUGE-L <f>`` with two decimals."""
    return "\t".join(f"{m} {scores[m].f1:.2f}" for m in METRICS)
