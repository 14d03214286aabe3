"""Binary tensor file format shared by model checkpoints and perturbation dumps.

Layout (all integers little-endian)::

    b"MSTF"                      magic
    u32 version                  currently 1
    u32 tensor count
    per tensor:
        u32 name length, UTF-8 name bytes
        u32 rank, rank x u64 dims
    payloads: raw little-endian float64, in manifest order

A model checkpoint holds every tensor of :data:`advldm.ldm.ARCHITECTURE` in
table order followed by the schedule tensors ``beta`` and ``alpha_bar``.
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict

import numpy as np

from .ldm import ARCHITECTURE, ModelParams, NoiseSchedule

MAGIC = b"MSTF"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: "OrderedDict[str, np.ndarray] | dict", version: int = FORMAT_VERSION) -> None:
    header = [MAGIC, struct.pack("<II", version, len(tensors))]
    payload = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)) + raw)
        header.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(payload))
    os.replace(tmp, path)


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        buf = fh.read()
    reader = _Reader(buf, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a tensor file)")
    version, count = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    manifest = []
    for _ in range(count):
        (nlen,) = reader.unpack("<I")
        name = reader.take(nlen).decode("utf-8")
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        manifest.append((name, tuple(int(d) for d in dims)))
    tensors = OrderedDict()
    for name, dims in manifest:
        n = int(np.prod(dims, dtype=np.int64))
        data = reader.take(8 * n)
        tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    if reader.remaining:
        raise CheckpointError(f"{path}: {reader.remaining} trailing bytes after payload")
    return tensors


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated file (needed {n} bytes at offset {self.pos})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(params: ModelParams, schedule: NoiseSchedule, path) -> None:
    tensors = OrderedDict((name, params.weights[name]) for name, _ in ARCHITECTURE)
    tensors["beta"] = schedule.beta
    tensors["alpha_bar"] = schedule.alpha_bar
    write_tensors(path, tensors)


def load_checkpoint(path) -> tuple[ModelParams, NoiseSchedule]:
    tensors = read_tensors(path)
    names = list(tensors)
    expected = [name for name, _ in ARCHITECTURE] + ["beta", "alpha_bar"]
    for i, name in enumerate(expected):
        if i >= len(names):
            raise CheckpointError(f"{path}: architecture mismatch, missing tensor {name!r}")
        if names[i] != name:
            raise CheckpointError(f"{path}: architecture mismatch at tensor {i}: found {names[i]!r}, expected {name!r}")
        if i < len(ARCHITECTURE) and tensors[name].shape != ARCHITECTURE[i][1]:
            raise CheckpointError(
                f"{path}: architecture mismatch for tensor {name!r}: "
                f"shape {tensors[name].shape}, expected {ARCHITECTURE[i][1]}"
            )
    if len(names) > len(expected):
        raise CheckpointError(f"{path}: unexpected extra tensor {names[len(expected)]!r}")
    schedule = NoiseSchedule(tensors["beta"])
    if not np.array_equal(schedule.alpha_bar, tensors["alpha_bar"]):
        if np.max(np.abs(schedule.alpha_bar - tensors["alpha_bar"])) > 1e-12:
            raise CheckpointError(f"{path}: stored alpha_bar inconsistent with beta")
    params = ModelParams({name: tensors[name] for name, _ in ARCHITECTURE}, version=FORMAT_VERSION)
    return params, schedule
