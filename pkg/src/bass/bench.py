"""Synthetic long-input benchmark: truncated baseline versus block-wise adaptation.

Pipeline:

1. generate the scattered-keyword dataset;
2. train the truncated baseline on the first ``train_maxlen_frames`` frames;
3. adapt it block-wise once per requested updater;
4. score the baseline with standard inference on the full test inputs and
   every adapted model with block inference.

Everything is written under one output directory. Reports contain no timing
so two runs with the same seed are byte-identical.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .config import RunConfig, format_config
from .data import SyntheticDataset, Utterance, detokenize, generate_synthetic, write_dataset
from .inference import InferConfig, format_trace, infer_block, infer_standard
from .metrics import METRICS, RougeScore, corpus_rouge
from .model import Summarizer
from .training import bass_adapt, train_truncated

logger = logging.getLogger(__name__)


@dataclass
class SystemResult:
    name: str
    scores: Dict[str, RougeScore]
    hypotheses: List[List[int]] = field(default_factory=list)

    @property
    def rouge_l(self) -> float:
        return self.scores["ROUGE-L"].f1


@dataclass
class BenchResult:
    baseline: SystemResult
    baseline_truncated: SystemResult
    adapted: Dict[str, SystemResult]
    primary: str = "gated"
    wall_time: float = 0.0

    @property
    def gap(self) -> float:
        """ROUGE-L of the primary adapted model minus the baseline's full-input ROUGE-L."""
        return self.adapted[self.primary].rouge_l - self.baseline.rouge_l

    def table(self) -> str:
        rows = [("Trunc (first block only)", self.baseline_truncated), ("Trunc (full input)", self.baseline)]
        rows += [(f"BASS-Adapt {kind} (block inference)", r) for kind, r in self.adapted.items()]
        width = max(len(name) for name, _ in rows)
        head = f"{'system':<{width}}  " + "  ".join(f"{m:>7}" for m in METRICS)
        lines = [head, "-" * len(head)]
        for name, r in rows:
            lines.append(f"{name:<{width}}  " + "  ".join(f"{r.scores[m].f1:7.2f}" for m in METRICS))
        return "\n".join(lines) + "\n"

    def report(self) -> str:
        ranking = sorted(self.adapted.items(), key=lambda kv: (-kv[1].rouge_l, kv[0]))
        lines = [
            self.table(),
            "updater ranking by ROUGE-L: " + " > ".join(k for k, _ in ranking),
            f"primary updater {self.primary}: ROUGE-L gap over truncated baseline {self.gap:+.2f}",
        ]
        return "\n".join(lines) + "\n"


def _references(utts: Sequence[Utterance]) -> List[List[int]]:
    return [list(u.reference[1:-1]) for u in utts]


def evaluate_standard(model: Summarizer, utts: Sequence[Utterance], cfg: InferConfig, name: str,
                      max_frames: Optional[int] = None) -> SystemResult:
    hyps = [infer_standard(model, u.features[:max_frames], cfg).summary for u in utts]
    return SystemResult(name, corpus_rouge(hyps, _references(utts)), hyps)


def evaluate_block(model: Summarizer, utts: Sequence[Utterance], cfg: InferConfig, name: str,
                   traces: Optional[List[List[List[int]]]] = None) -> SystemResult:
    hyps = []
    for u in utts:
        per_block, final = infer_block(model, u.features, cfg)
        hyps.append(final.summary)
        if traces is not None:
            traces.append([h.summary for h in per_block])
    return SystemResult(name, corpus_rouge(hyps, _references(utts)), hyps)


def _write_hyps(path: Path, dataset: SyntheticDataset, hyps: Sequence[Sequence[int]]) -> None:
    path.write_text("".join(detokenize(dataset.vocab, h) + "\n" for h in hyps), encoding="utf-8")


def run_bench(cfg: RunConfig, out_dir, write_data: bool = False) -> BenchResult:
    """Run the whole benchmark and write checkpoints, hypotheses and ``report.txt`` to ``out_dir``."""
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    dataset = generate_synthetic(cfg.data)
    if write_data:
        write_dataset(dataset, out / "data")
    test = dataset["test"]
    infer_cfg = cfg.infer

    trunc_cfg = replace(cfg.train, mode="trunc", base_checkpoint=None)
    base_path = out / "trunc.ckpt"
    logger.info("training truncated baseline for %d epochs", trunc_cfg.epochs)
    base, base_report = train_truncated(cfg.model, trunc_cfg, dataset["train"], base_path)
    (out / "trunc.train.txt").write_text(base_report.to_text(), encoding="utf-8")

    baseline = evaluate_standard(base, test, infer_cfg, "trunc")
    baseline_trunc = evaluate_standard(base, test, infer_cfg, "trunc-first-block", trunc_cfg.train_maxlen_frames)
    _write_hyps(out / "trunc.hyp.txt", dataset, baseline.hypotheses)
    (out / "test.ref.txt").write_text(
        "".join(detokenize(dataset.vocab, u.reference) + "\n" for u in test), encoding="utf-8"
    )

    bench = cfg.bench
    # adaptation sees the full utterances, not the baseline's truncation
    full_length = max(len(u.features) for u in dataset["train"])
    adapt_cfg = replace(
        cfg.train, mode="bass_adapt", epochs=bench.adapt_epochs, peak_lr=bench.adapt_peak_lr,
        warmup_steps=bench.adapt_warmup_steps, base_checkpoint=str(base_path),
        train_maxlen_frames=max(full_length, cfg.train.block_size_frames),
    )
    adapted: Dict[str, SystemResult] = {}
    for kind in bench.updaters:
        logger.info("adapting with the %s updater for %d epochs", kind, adapt_cfg.epochs)
        ckpt = out / f"adapt-{kind}.ckpt"
        model, report = bass_adapt(base_path, adapt_cfg, dataset["train"], ckpt, updater_kind=kind)
        (out / f"adapt-{kind}.train.txt").write_text(report.to_text(), encoding="utf-8")
        traces: List[List[List[int]]] = []
        adapted[kind] = evaluate_block(model, test, infer_cfg, kind, traces)
        _write_hyps(out / f"adapt-{kind}.hyp.txt", dataset, adapted[kind].hypotheses)
        trace_text = "".join(
            f"{u.id}\n" + format_trace([detokenize(dataset.vocab, h) for h in t]) for u, t in zip(test, traces)
        )
        (out / f"adapt-{kind}.trace.txt").write_text(trace_text, encoding="utf-8")

    primary = "gated" if "gated" in adapted else next(iter(adapted))
    result = BenchResult(baseline, baseline_trunc, adapted, primary)
    (out / "report.txt").write_text(result.report(), encoding="utf-8")
    result.wall_time = time.perf_counter() - start
    return result
