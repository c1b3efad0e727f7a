# fleet_checkpoint.py
"""
fleet_checkpoint.py

Versioned, bit-exact checkpoint files for ParameterStore + RunConfig +
optimizer state.

Byte layout (all integers little-endian):

    magic        6 bytes  b"FSGPT\\0"
    version      u32      FORMAT_VERSION
    config       u32 length + UTF-8 text (RunConfig.to_text())
    seed         i64
    step         i64
    tensors      u32 count, then per tensor:
                   u16 name length + UTF-8 name
                   u8  dtype tag (1 = float32, 2 = float64)
                   u8  rank, rank x u32 extents
                   raw little-endian data, C order
    optimizer    u8 present flag; if 1, a second tensor table (same encoding)
    crc32        u32 over every preceding byte (zlib / IEEE polynomial)

Load order: magic, version, table parse, trailing length, CRC. A file with an
unknown version but a valid CRC is a version error; otherwise it is corrupt.
"""

from __future__ import annotations

import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from fleet_config import RunConfig
from fleet_data import FleetSpec
from fleet_errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
)
from fleet_model import FleetModel
from fleet_training import OptimizerState, ParameterStore

logger = logging.getLogger(__name__)

MAGIC = b"FSGPT\x00"
FORMAT_VERSION = 1

DTYPE_TAGS: Dict[int, np.dtype] = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAG_FOR_DTYPE: Dict[str, int] = {"float32": 1, "float64": 2}

TensorTable = Dict[str, np.ndarray]


@dataclass
class Checkpoint:
    config_text: str
    seed: int
    step: int
    tensors: TensorTable = field(default_factory=dict)
    optimizer: Optional[TensorTable] = None

    @property
    def config(self) -> RunConfig:
        return RunConfig.from_text(self.config_text)


# -----------------------------
# Encoding
# -----------------------------


def _encode_table(table: TensorTable) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name, arr in table.items():
        arr = np.asarray(arr)
        tag = TAG_FOR_DTYPE.get(arr.dtype.name)
        if tag is None:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype} (float32 or float64 only)")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointFormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    config = ckpt.config_text.encode("utf-8")
    body = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(config)),
        config,
        struct.pack("<qq", int(ckpt.seed), int(ckpt.step)),
        _encode_table(ckpt.tensors),
    ]
    if ckpt.optimizer is None:
        body.append(struct.pack("<B", 0))
    else:
        body.append(struct.pack("<B", 1))
        body.append(_encode_table(ckpt.optimizer))
    raw = b"".join(body)
    return raw + struct.pack("<I", zlib.crc32(raw) & 0xFFFFFFFF)


# -----------------------------
# Decoding
# -----------------------------


class _Reader:
    def __init__(self, raw: bytes, end: int):
        self.raw = raw
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, {self.end - self.pos} left")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_table(r: _Reader) -> TensorTable:
    (count,) = r.unpack("<I")
    table: TensorTable = {}
    for _ in range(count):
        (n_len,) = r.unpack("<H")
        try:
            name = r.take(n_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"tensor name at offset {r.pos} is not UTF-8") from exc
        tag, rank = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointFormatError(f"{name}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        dtype = DTYPE_TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        if name in table:
            raise CheckpointFormatError(f"duplicate tensor name {name}")
        table[name] = data.astype(dtype.newbyteorder("="))
    return table


def _crc_ok(raw: bytes) -> bool:
    (stored,) = struct.unpack("<I", raw[-4:])
    return (zlib.crc32(raw[:-4]) & 0xFFFFFFFF) == stored


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if len(raw) < len(MAGIC) + 4 + 4:
        raise CheckpointFormatError(f"truncated checkpoint ({len(raw)} bytes)")
    (version,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    if version != FORMAT_VERSION:
        if _crc_ok(raw):
            raise CheckpointVersionError(f"checkpoint format version {version} (supported: {FORMAT_VERSION})")
        raise CorruptCheckpointError(f"checkpoint CRC mismatch (header claims version {version})")

    r = _Reader(raw, len(raw) - 4)
    r.take(len(MAGIC) + 4)
    (c_len,) = r.unpack("<I")
    try:
        config_text = r.take(c_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError("config blob is not UTF-8") from exc
    seed, step = r.unpack("<qq")
    tensors = _decode_table(r)
    (flag,) = r.unpack("<B")
    if flag not in (0, 1):
        raise CheckpointFormatError(f"bad optimizer flag {flag}")
    optimizer = _decode_table(r) if flag else None
    if r.pos != r.end:
        raise CheckpointFormatError(f"{r.end - r.pos} unexpected bytes before the CRC")
    if not _crc_ok(raw):
        raise CorruptCheckpointError("checkpoint CRC mismatch")
    return Checkpoint(config_text=config_text, seed=seed, step=step, tensors=tensors, optimizer=optimizer)


# -----------------------------
# Public API
# -----------------------------


def save(store: ParameterStore, state: Optional[OptimizerState], cfg: RunConfig, path: str) -> str:
    """Write store (+ optimizer state) and the resolved config; replaces `path` atomically."""
    ckpt = Checkpoint(
        config_text=cfg.to_text(),
        seed=store.seed,
        step=state.step if state is not None else 0,
        tensors={n: t.data for n, t in store.items()},
        optimizer=state.to_arrays() if state is not None else None,
    )
    raw = encode_checkpoint(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(raw)
    os.replace(tmp, path)
    logger.info("saved %d tensors (%d bytes, step %d) to %s", len(ckpt.tensors), len(raw), ckpt.step, path)
    return path


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def load(path: str) -> Tuple[ParameterStore, Optional[OptimizerState], RunConfig]:
    ckpt = read_checkpoint(path)
    store = ParameterStore(seed=ckpt.seed)
    for name, arr in ckpt.tensors.items():
        store.add(name, arr, dtype=arr.dtype)
    state = OptimizerState.from_arrays(ckpt.optimizer) if ckpt.optimizer is not None else None
    if state is not None:
        state.step = ckpt.step
    return store, state, ckpt.config


def check_compatible(store: ParameterStore, cfg: RunConfig) -> None:
    """Shared (non-pool) tensors must have the shapes `cfg` would build."""
    fresh = FleetModel.build(cfg, (), np.random.default_rng(0))
    expected = {n: fresh.store[n].shape for n in fresh.shared_names()}
    have = {n: t.shape for n, t in store.items() if not n.startswith("pool.")}
    missing = sorted(set(expected) - set(have))
    extra = sorted(set(have) - set(expected))
    if missing or extra:
        raise ConfigError(f"checkpoint does not match config: missing {missing[:5]}, unexpected {extra[:5]}")
    for n, shape in expected.items():
        if have[n] != shape:
            raise ConfigError(f"checkpoint does not match config: {n} has shape {have[n]}, config builds {shape}")


def model_from_checkpoint(path: str, fleets: Sequence[FleetSpec] = ()) -> Tuple[FleetModel, Optional[OptimizerState]]:
    store, state, cfg = load(path)
    check_compatible(store, cfg)
    return FleetModel.from_store(cfg, store, fleets), state
