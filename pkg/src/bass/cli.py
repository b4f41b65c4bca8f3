"""Command line entry point: ``bass <subcommand> [flags]``.

Subcommands: gen-data, train, adapt, infer, eval, gradcheck, bench. Bad
arguments print usage and exit with status 2; runtime failures print a
one-line reason to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .data import Vocabulary, detokenize, generate_synthetic, load_split, write_dataset
from .inference import format_trace, infer_block, infer_standard
from .metrics import corpus_rouge, format_report
from .training import bass_adapt, train

logger = logging.getLogger("bass")


class CommandError(Exception):
    """A failure reported to the user as a single line."""


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bass", description="Block-wise speech summarization toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text, description=help_text)
        if "config" in flags:
            p.add_argument("--config", metavar="PATH", help="key = value configuration file")
        if "seed" in flags:
            p.add_argument("--seed", type=_u64, metavar="U64", help="override every seed in the config")
        if "out" in flags:
            p.add_argument("--out", required=True, metavar="DIR", help="output directory")
        if "data" in flags:
            p.add_argument("--data", required=True, metavar="DIR", help="dataset directory written by gen-data")
            p.add_argument("--split", default=None, metavar="NAME", help="dataset split")
        return p

    add("gen-data", "write the synthetic benchmark dataset", "config", "seed", "out")
    p = add("train", "train from scratch (truncated or block-wise)", "config", "seed", "out", "data")
    p.add_argument("--mode", choices=("trunc", "bass_train"), default=None)
    p = add("adapt", "block-wise adaptation of a truncated-input checkpoint", "config", "seed", "out", "data")
    p.add_argument("--base-checkpoint", required=True, metavar="PATH")
    p.add_argument("--mode", choices=("bass_adapt",), default="bass_adapt")
    p = add("infer", "summarize a dataset split", "config", "out", "data")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--strategy", choices=("standard", "block"), default="block")
    p = sub.add_parser("eval", help="score hypotheses against references", description="score hypotheses")
    p.add_argument("--hyp", required=True, metavar="PATH")
    p.add_argument("--ref", required=True, metavar="PATH")
    p = add("gradcheck", "finite-difference gradient oracle", "seed")
    p = add("bench", "run the synthetic benchmark end to end", "config", "seed", "out")
    return parser


def _load_config(args) -> RunConfig:
    cfg = parse_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.train = replace(cfg.train, seed=seed)
        cfg.data = replace(cfg.data, seed=seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> None:
    cfg = _load_config(args)
    paths = write_dataset(generate_synthetic(cfg.data), _out_dir(args))
    for split, path in paths.items():
        print(f"{split}\t{path}")


def _train_common(args, cfg: RunConfig, mode: str):
    utts = load_split(args.data, args.split or "train")
    out = _out_dir(args)
    ckpt = out / "model.ckpt"
    tcfg = replace(cfg.train, mode=mode)
    if mode == "bass_adapt":
        # adaptation trains on whole utterances; train_maxlen_frames is the baseline's truncation
        full = max(max(len(u.features) for u in utts), tcfg.block_size_frames)
        tcfg = replace(tcfg, base_checkpoint=args.base_checkpoint, train_maxlen_frames=full)
        model, report = bass_adapt(args.base_checkpoint, tcfg, utts, ckpt, updater_kind=cfg.model.updater_kind,
                                   markov_window=cfg.model.markov_window)
    else:
        model, report = train(cfg.model, tcfg, utts, ckpt)
    (out / "train.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text().splitlines()[-1])
    print(f"checkpoint\t{ckpt}")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    mode = args.mode or cfg.train.mode
    if mode == "bass_adapt":
        raise CommandError("the config selects bass_adapt; use the adapt subcommand")
    _train_common(args, cfg, mode)


def cmd_adapt(args) -> None:
    _train_common(args, _load_config(args), "bass_adapt")


def cmd_infer(args) -> None:
    cfg = _load_config(args)
    vocab = Vocabulary.load(Path(args.data) / "vocab.txt")
    utts = sorted(load_split(args.data, args.split or "test", vocab), key=lambda u: u.id)
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    hyps, refs, trace = [], [], []
    for u in utts:
        if args.strategy == "standard":
            hyp = infer_standard(model, u.features, cfg.infer)
        else:
            per_block, hyp = infer_block(model, u.features, cfg.infer)
            trace.append(f"{u.id}\n" + format_trace([detokenize(vocab, h.summary) for h in per_block]))
        hyps.append(detokenize(vocab, hyp.summary))
        refs.append(detokenize(vocab, u.reference))
    (out / "hyp.txt").write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    (out / "ref.txt").write_text("".join(r + "\n" for r in refs), encoding="utf-8")
    (out / "ids.txt").write_text("".join(u.id + "\n" for u in utts), encoding="utf-8")
    if trace:
        (out / "trace.txt").write_text("".join(trace), encoding="utf-8")
    print(format_report(corpus_rouge([h.split() for h in hyps], [r.split() for r in refs])))


def _read_lines(path) -> List[List[str]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CommandError(f"{path} does not exist") from None
    return [line.split() for line in text.splitlines()]


def cmd_eval(args) -> None:
    hyps, refs = _read_lines(args.hyp), _read_lines(args.ref)
    if len(hyps) != len(refs):
        raise CommandError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    print(format_report(corpus_rouge(hyps, refs)))


def cmd_gradcheck(args) -> None:
    from .gradcheck import format_results, run_gradcheck

    results = run_gradcheck(seed=args.seed or 0)
    sys.stdout.write(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandError("gradient check failed for " + ", ".join(failed))


def cmd_bench(args) -> None:
    from .bench import run_bench

    result = run_bench(_load_config(args), _out_dir(args))
    sys.stdout.write(result.report())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (CommandError, ConfigError, CheckpointError, ValueError, IndexError, OSError, FloatingPointError) as exc:
        reason = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"bass {args.command}: error: {reason}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
