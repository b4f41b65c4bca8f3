"""Bit-exact binary checkpoints of a :class:`~bass.model.Summarizer`.

Layout (little-endian)::

    b"BASSCKPT" | u32 version=1 | u32 manifest_len | manifest (UTF-8) | payload

The manifest starts with ``@config <key> <value>`` lines carrying the model
configuration, followed by one ``<name> <shape> f32 <offset>`` line per
parameter (shape as ``AxB``, offset relative to the payload start), and ends
with ``@crc32 <hex>`` covering the payload. Payloads are raw float32 in
manifest order.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import fields
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, Summarizer, is_updater_param

MAGIC = b"BASSCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic or unparsable manifest."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Parameter set or shapes do not match the configuration."""


class CheckpointTruncatedError(CheckpointError):
    pass


def _fmt_value(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def serialize(model: Summarizer) -> bytes:
    lines = [f"@config {k} {_fmt_value(v)}" for k, v in model.config.to_dict().items()]
    chunks, offset = [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        shape = "x".join(str(s) for s in p.shape)
        lines.append(f"{name} {shape} f32 {offset}")
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    lines.append(f"@crc32 {zlib.crc32(payload):08x}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    return _HEAD.pack(MAGIC, VERSION, len(manifest)) + manifest + payload


def save_checkpoint(path, model: Summarizer) -> None:
    Path(path).write_bytes(serialize(model))


def _parse_config(items: Dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in items:
            raise CheckpointFormatError(f"checkpoint config lacks {f.name!r}")
        raw = items[f.name]
        kind = type(getattr(ModelConfig(), f.name))
        kwargs[f.name] = kind(raw) if kind is not bool else raw == "True"
    return ModelConfig(**kwargs)


def read_checkpoint(path):
    """Parse a checkpoint file into (ModelConfig, {name: float32 array}) without validation."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointTruncatedError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, mlen = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = _HEAD.size + mlen
    if len(raw) < start:
        raise CheckpointTruncatedError(f"{path}: manifest truncated")
    try:
        manifest = raw[_HEAD.size : start].decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{path}: manifest is not UTF-8") from exc
    payload = memoryview(raw)[start:]
    cfg_items, arrays, expected_offset, crc = {}, {}, 0, None
    for line in manifest:
        parts = line.split()
        if parts and parts[0] == "@crc32":
            if len(parts) != 2:
                raise CheckpointFormatError(f"{path}: bad checksum line {line!r}")
            crc = parts[1]
            continue
        if parts and parts[0] == "@config":
            if len(parts) != 3:
                raise CheckpointFormatError(f"{path}: bad config line {line!r}")
            cfg_items[parts[1]] = parts[2]
            continue
        if len(parts) != 4 or parts[2] != "f32":
            raise CheckpointFormatError(f"{path}: bad manifest line {line!r}")
        name, shape_s, _, off_s = parts
        shape = tuple(int(s) for s in shape_s.split("x"))
        offset = int(off_s)
        nbytes = 4 * int(np.prod(shape))
        if offset != expected_offset:
            raise CheckpointFormatError(f"{path}: {name} at offset {offset}, expected {expected_offset}")
        if offset + nbytes > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: payload of {name} needs bytes {offset}..{offset + nbytes}, file has {len(payload)}"
            )
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).astype(np.float32)
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise CheckpointFormatError(f"{path}: {len(payload) - expected_offset} trailing payload bytes")
    if crc is None:
        raise CheckpointFormatError(f"{path}: manifest lacks the @crc32 line")
    if f"{zlib.crc32(payload):08x}" != crc:
        raise CheckpointChecksumError(f"{path}: payload checksum mismatch (stored {crc})")
    try:
        cfg = _parse_config(cfg_items)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointFormatError(f"{path}: invalid config: {exc}") from exc
    return cfg, arrays


def load_checkpoint(path, seed: int = 0, **overrides) -> Summarizer:
    """Load a checkpoint, validating every parameter shape against its config.

    ``overrides`` replace configuration fields (typically ``updater_kind`` or
    ``markov_window`` for block-wise adaptation). When given, updater
    parameters absent from the file are freshly initialized from ``seed`` (the
    gate starts at 0) and stored updater parameters the new config does not
    use are dropped. All other parameters must match exactly.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    cfg, arrays = read_checkpoint(path)
    if overrides:
        cfg = ModelConfig(**{**cfg.to_dict(), **overrides})
    model = Summarizer(cfg, seed=seed, dtype=np.float32)
    problems = []
    for name, p in model.params.items():
        arr = arrays.get(name)
        if arr is None:
            if not (overrides and is_updater_param(name)):
                problems.append(f"{name}: missing, expected {list(p.shape)}")
        elif arr.shape != p.shape:
            problems.append(f"{name}: stored {list(arr.shape)}, expected {list(p.shape)}")
    for name in arrays.keys() - model.params.keys():
        if not (overrides and is_updater_param(name)):
            problems.append(f"{name}: unexpected parameter {list(arrays[name].shape)}")
    if problems:
        raise CheckpointShapeError(f"{path}: incompatible checkpoint:\n  " + "\n  ".join(problems))
    for name, p in model.params.items():
        if name in arrays:
            model.params[name] = Tensor(arrays[name].copy(), requires_grad=True)
    return model
