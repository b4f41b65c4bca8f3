"""Blocks, vocabulary, synthetic long-input summarization data and file formats.

File formats (all little-endian / UTF-8):

* feature file: ``b"BASSFEAT"``, u32 version (=1), u64 N, u32 D, then N*D
  float32 values row-major;
* reference file: one whitespace-tokenized summary per line;
* manifest: ``<feature-path>\\t<line-index>`` per line, paths relative to the
  manifest's directory;
* vocabulary: one token per line, line number == id.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .layers import min_subsample_frames

PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

FEATURE_MAGIC = b"BASSFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIQI")


class FeatureFileError(ValueError):
    """Malformed feature file; the message names the offending byte offset."""


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Bijective token <-> id map with PAD/BOS/EOS/UNK fixed at ids 0..3."""

    def __init__(self, words: Sequence[str] = ()):
        self.tokens: List[str] = list(RESERVED)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if not word or any(c.isspace() for c in word):
            raise ValueError(f"invalid token {word!r}")
        if word not in self.index:
            self.index[word] = len(self.tokens)
            self.tokens.append(word)
        return self.index[word]

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, word):
        return word in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise ValueError(f"{path}: first four tokens must be {' '.join(RESERVED)}")
        if len(set(lines)) != len(lines):
            raise ValueError(f"{path}: duplicate tokens")
        return cls(lines[4:])


def tokenize(vocab: Vocabulary, text: str) -> List[int]:
    """Whitespace split, unknown words to UNK, framed with BOS/EOS."""
    return [BOS_ID] + [vocab.id(w) for w in text.split()] + [EOS_ID]


def detokenize(vocab: Vocabulary, tokens: Sequence[int]) -> str:
    """Inverse of :func:`tokenize`: drop BOS/PAD, stop at the first EOS."""
    words = []
    for t in tokens:
        t = int(t)
        if t == EOS_ID:
            break
        if t in (BOS_ID, PAD_ID):
            continue
        words.append(vocab.token(t))
    return " ".join(words)


# ---------------------------------------------------------------------------
# blocks


def segment_blocks(features: np.ndarray, block_size: int) -> List[np.ndarray]:
    """Abutting blocks ``[0,B), [B,2B), ...``; the last one holds ``N mod B`` frames if nonzero."""
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    n = len(features)
    return [features[s : s + block_size] for s in range(0, n, block_size)]


def segment_for_model(
    features: np.ndarray, block_size: int, min_frames: Optional[int] = None
) -> List[np.ndarray]:
    """:func:`segment_blocks` with a too-short final block merged into its predecessor."""
    min_frames = min_subsample_frames() if min_frames is None else min_frames
    if block_size < min_frames:
        raise ValueError(f"block size {block_size} is below the encoder minimum of {min_frames} frames")
    if len(features) < min_frames:
        raise ValueError(f"input has {len(features)} frames; the encoder needs at least {min_frames}")
    blocks = segment_blocks(features, block_size)
    if len(blocks) > 1 and len(blocks[-1]) < min_frames:
        start = (len(blocks) - 2) * block_size
        blocks = blocks[:-2] + [features[start:]]
    return blocks


# ---------------------------------------------------------------------------
# feature files


def save_features(path, features: np.ndarray) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {arr.shape}")
    n, d = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d))
        fh.write(payload)


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, version, n, d = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version} at byte offset 8")
    need = n * d * 4
    have = len(raw) - _HEADER.size
    if have != need:
        kind = "truncated" if have < need else "oversized"
        raise FeatureFileError(
            f"{path}: {kind} payload, expected {need} bytes from byte offset {_HEADER.size}, found {have}"
        )
    arr = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=n * d)
    return arr.reshape(n, d).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SyntheticConfig:
    feature_dim: int = 16
    frames_per_word: int = 4
    noise_sigma: float = 0.1
    vocab_words: int = 64
    keywords_per_utterance: int = 6
    utterance_frames: int = 1200
    num_train: int = 400
    num_val: int = 50
    num_test: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_word < 1 or self.utterance_frames % self.frames_per_word:
            raise ValueError("utterance_frames must be divisible by frames_per_word")
        if self.keywords_per_utterance < 1:
            raise ValueError("keywords_per_utterance must be >= 1")
        if self.vocab_words < 2:
            raise ValueError("vocab_words must be >= 2 (keywords and fillers)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    @property
    def words_per_utterance(self) -> int:
        return self.utterance_frames // self.frames_per_word

    @property
    def num_keywords(self) -> int:
        return self.vocab_words // 2


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    reference: List[int]
    words: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        ref = self.reference
        if len(ref) < 2 or ref[0] != BOS_ID or ref[-1] != EOS_ID or PAD_ID in ref:
            raise ValueError(f"utterance {self.id}: reference must be BOS ... EOS without PAD")


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    vocab: Vocabulary
    templates: np.ndarray
    splits: Dict[str, List[Utterance]]

    def __getitem__(self, split: str) -> List[Utterance]:
        return self.splits[split]


def synthetic_vocabulary(config: SyntheticConfig) -> Vocabulary:
    """Keyword words ``k00..`` first, then filler words ``f00..``."""
    nk = config.num_keywords
    nf = config.vocab_words - nk
    return Vocabulary([f"k{i:02d}" for i in range(nk)] + [f"f{i:02d}" for i in range(nf)])


def _make_utterance(config, vocab, templates, seed, index, uid) -> Utterance:
    rng = np.random.default_rng([seed, 1, index])
    n_words = config.words_per_utterance
    nk = config.num_keywords
    kpu = config.keywords_per_utterance
    fillers = rng.integers(nk, config.vocab_words, size=n_words)
    slots = np.sort(rng.choice(n_words, size=kpu, replace=False))
    keywords = rng.choice(nk, size=kpu, replace=False)
    words = fillers.copy()
    words[slots] = keywords
    frames = templates[words].reshape(-1, config.feature_dim)
    if config.noise_sigma > 0:
        frames = frames + config.noise_sigma * rng.standard_normal(frames.shape)
    # word index w has vocabulary id w + 4
    reference = [BOS_ID] + [int(w) + len(RESERVED) for w in keywords] + [EOS_ID]
    return Utterance(uid, frames.astype(np.float32), reference, words)


def generate_synthetic(config: SyntheticConfig, seed: Optional[int] = None) -> SyntheticDataset:
    """Scattered-keyword summarization data.

    Every word owns a fixed ``[frames_per_word, D]`` Gaussian template. An
    utterance is a word sequence of filler words with
    ``keywords_per_utterance`` distinct keywords placed uniformly at random;
    its summary lists the keywords in order of appearance. Each utterance has
    its own generator derived from ``(seed, index)``.
    """
    seed = config.seed if seed is None else seed
    if config.keywords_per_utterance > config.words_per_utterance:
        raise ValueError(
            f"{config.keywords_per_utterance} keywords do not fit in "
            f"{config.words_per_utterance} word slots"
        )
    if config.keywords_per_utterance > config.num_keywords:
        raise ValueError("keywords_per_utterance exceeds the keyword pool")
    vocab = synthetic_vocabulary(config)
    templates = np.random.default_rng([seed, 0]).standard_normal(
        (config.vocab_words, config.frames_per_word, config.feature_dim)
    )
    splits, index = {}, 0
    for split, count in (("train", config.num_train), ("val", config.num_val), ("test", config.num_test)):
        utts = []
        for j in range(count):
            utts.append(_make_utterance(config, vocab, templates, seed, index, f"{split}-{j:05d}"))
            index += 1
        splits[split] = utts
    return SyntheticDataset(config, vocab, templates, splits)


# ---------------------------------------------------------------------------
# on-disk datasets


def write_split(out_dir, split: str, utterances: Sequence[Utterance], vocab: Vocabulary) -> Path:
    """Write features, references and manifest of one split; returns the manifest path."""
    split_dir = Path(out_dir) / split
    (split_dir / "feats").mkdir(parents=True, exist_ok=True)
    refs, manifest = [], []
    for i, utt in enumerate(utterances):
        rel = f"feats/{utt.id}.feat"
        save_features(split_dir / rel, utt.features)
        refs.append(detokenize(vocab, utt.reference))
        manifest.append(f"{rel}\t{i}")
    (split_dir / "references.txt").write_text("".join(r + "\n" for r in refs), encoding="utf-8")
    path = split_dir / "manifest.tsv"
    path.write_text("".join(m + "\n" for m in manifest), encoding="utf-8")
    return path


def write_dataset(dataset: SyntheticDataset, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset.vocab.save(out / "vocab.txt")
    return {s: write_split(out, s, u, dataset.vocab) for s, u in dataset.splits.items()}


def read_manifest(path) -> List[Tuple[Path, int]]:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            feat, idx = line.split("\t")
            entry = (path.parent / feat, int(idx))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected '<feature-path>\\t<line-index>'") from None
        if not entry[0].exists():
            raise FileNotFoundError(f"{path}:{lineno}: missing feature file {entry[0]}")
        entries.append(entry)
    return entries


def read_references(path) -> List[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def load_split(data_dir, split: str, vocab: Optional[Vocabulary] = None) -> List[Utterance]:
    """Load ``<data_dir>/<split>`` written by :func:`write_split`."""
    data_dir = Path(data_dir)
    vocab = vocab or Vocabulary.load(data_dir / "vocab.txt")
    split_dir = data_dir / split
    refs = read_references(split_dir / "references.txt")
    utts = []
    for feat_path, idx in read_manifest(split_dir / "manifest.tsv"):
        if not 0 <= idx < len(refs):
            raise IndexError(f"reference line {idx} out of range for {split_dir / 'references.txt'}")
        uid = os.path.splitext(feat_path.name)[0]
        utts.append(Utterance(uid, load_features(feat_path), tokenize(vocab, refs[idx])))
    return utts
