"""Binary checkpoint format: magic ``QFKT``, versioned, little-endian f64.

Layout: magic, u32 version, JSON config echo, named parameter blocks
(name, frozen flag, rank, extents, CRC32, payload) and an optional training
state block (step, optimizer moments, RNG state). Every payload is verified
against its CRC32, its declared extents, and a finiteness check on load, so
a single flipped byte is always rejected. Saving the same state twice
produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter
from .optim import AdamWState

MAGIC = b"QFKT"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def _pack_json(obj) -> bytes:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(payload)) + payload


def _pack_array(name: str, arr: np.ndarray, frozen: bool) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<BB", int(frozen), arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    head += struct.pack("<I", zlib.crc32(data))
    return head + data


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (length,) = self.unpack("<I")
        try:
            return json.loads(self.take(length).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"bad JSON block: {exc}") from exc

    def array(self) -> tuple[str, np.ndarray, bool]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        frozen, rank = self.unpack("<BB")
        shape = self.unpack(f"<{rank}I") if rank else ()
        (crc,) = self.unpack("<I")
        count = int(np.prod(shape)) if shape else 1
        data = self.take(8 * count)
        if zlib.crc32(data) != crc:
            raise CheckpointFormatError(f"block {name!r}: CRC mismatch")
        arr = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CheckpointFormatError(f"block {name!r}: non-finite payload")
        return name, arr, bool(frozen)


@dataclass
class TrainState:
    step: int
    optimizer: AdamWState
    rng_state: dict


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    frozen: dict[str, bool]
    train_state: TrainState | None = None


def save_checkpoint(path: str, params: list[Parameter], config: dict,
                    train_state: TrainState | None = None) -> None:
    out = [MAGIC, struct.pack("<I", VERSION), _pack_json(config)]
    out.append(struct.pack("<I", len(params)))
    for p in params:
        out.append(_pack_array(p.name, p.data, p.frozen))
    if train_state is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q", train_state.step))
        out.append(struct.pack("<Q", train_state.optimizer.step))
        moment_names = sorted(train_state.optimizer.m)
        out.append(struct.pack("<I", len(moment_names)))
        for name in moment_names:
            out.append(_pack_array(name, train_state.optimizer.m[name], False))
            out.append(_pack_array(name, train_state.optimizer.v[name], False))
        out.append(_pack_json(train_state.rng_state))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic (not a checkpoint file)")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    config = reader.json()
    (n_params,) = reader.unpack("<I")
    params: dict[str, np.ndarray] = {}
    frozen: dict[str, bool] = {}
    for _ in range(n_params):
        name, arr, frz = reader.array()
        params[name] = arr
        frozen[name] = frz
    (has_state,) = reader.unpack("<B")
    train_state = None
    if has_state:
        (step,) = reader.unpack("<Q")
        (opt_step,) = reader.unpack("<Q")
        (n_moments,) = reader.unpack("<I")
        opt = AdamWState(step=opt_step)
        for _ in range(n_moments):
            name, m_arr, _ = reader.array()
            name_v, v_arr, _ = reader.array()
            if name_v != name:
                raise CheckpointFormatError("optimizer moment blocks out of order")
            opt.m[name] = m_arr
            opt.v[name] = v_arr
        rng_state = reader.json()
        train_state = TrainState(step=step, optimizer=opt, rng_state=rng_state)
    if reader.pos != len(blob):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return Checkpoint(config=config, params=params, frozen=frozen, train_state=train_state)


def load_into(params: list[Parameter], ckpt: Checkpoint, strict: bool = True) -> None:
    """Copy checkpoint blocks into matching parameters by name."""
    by_name = {p.name: p for p in params}
    missing = [n for n in by_name if n not in ckpt.params]
    if strict and missing:
        raise CheckpointFormatError(f"checkpoint lacks blocks: {missing[:4]}...")
    for name, arr in ckpt.params.items():
        p = by_name.get(name)
        if p is None:
            if strict:
                raise CheckpointFormatError(f"unexpected block {name!r}")
            continue
        if p.data.shape != arr.shape:
            raise CheckpointFormatError(
                f"block {name!r}: shape {arr.shape} does not match {p.data.shape}")
        p.data[...] = arr
        p.frozen = ckpt.frozen.get(name, p.frozen)


def rng_state_to_json(rng: np.random.Generator) -> dict:
    # PCG64 state is a plain dict of (big) ints; Python JSON round-trips
    # arbitrary-precision integers exactly.
    return rng.bit_generator.state


def rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng
