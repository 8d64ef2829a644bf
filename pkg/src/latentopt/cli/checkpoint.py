"""Binary checkpoint files.

Layout, all integers little-endian::

    b"DDL1"  u32 version  u32 array_count
    per array:
        u16 name_len  name (UTF-8)  u8 dtype (1 = float64)  u8 rank
        u32 dim * rank  raw float64 payload

Metadata rides along as zero-length arrays named ``meta:<key>=<value>`` so
the file stays a flat list of named arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from latentopt.models import MLP, ClassifierModel, DenoiserModel

MAGIC = b"DDL1"
VERSION = 1
DTYPE_F64 = 1
_META = "meta:"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class UnsupportedDtypeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, what: str):
        super().__init__(f"checkpoint truncated while reading {what}")
        self.what = what


@dataclass
class Checkpoint:
    arrays: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = [(f"{_META}{k}={v}", np.zeros(0)) for k, v in ckpt.metadata.items()]
    entries += list(ckpt.arrays.items())
    out = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(what)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
    ckpt = Checkpoint()
    for i in range(count):
        (name_len,) = r.unpack("<H", f"name length of array #{i}")
        name = r.take(name_len, f"name of array #{i}").decode("utf-8")
        dtype, rank = r.unpack("<BB", f"header of array {name!r}")
        if dtype != DTYPE_F64:
            raise UnsupportedDtypeError(f"array {name!r} has unsupported dtype code {dtype}")
        dims = r.unpack(f"<{rank}I", f"dims of array {name!r}")
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(8 * n, f"payload of array {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        if name.startswith(_META):
            key, _, value = name[len(_META) :].partition("=")
            ckpt.metadata[key] = value
        else:
            ckpt.arrays[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last array")
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


# ------------------------------------------------------------ model codecs


def _mlp_arrays(mlp: MLP) -> dict:
    arrays = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"mlp.w{i}"] = w
        arrays[f"mlp.b{i}"] = b
    return arrays


def _mlp_from(arrays: dict) -> MLP:
    n = sum(1 for k in arrays if k.startswith("mlp.w"))
    return MLP([arrays[f"mlp.w{i}"].copy() for i in range(n)], [arrays[f"mlp.b{i}"].copy() for i in range(n)])


def denoiser_checkpoint(m: DenoiserModel, **meta) -> Checkpoint:
    metadata = {"model": "denoiser", "data_dim": m.data_dim, "time_embed_dim": m.time_embed_dim,
                "cond_dim": m.cond_dim, **meta}
    return Checkpoint(_mlp_arrays(m.mlp), {k: str(v) for k, v in metadata.items()})


def classifier_checkpoint(m: ClassifierModel, **meta) -> Checkpoint:
    metadata = {"model": "classifier", "data_dim": m.data_dim, "n_classes": m.n_classes, **meta}
    return Checkpoint(_mlp_arrays(m.mlp), {k: str(v) for k, v in metadata.items()})


def _expect(ckpt: Checkpoint, kind: str):
    found = ckpt.metadata.get("model")
    if found != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {found!r}")


def denoiser_from_checkpoint(ckpt: Checkpoint) -> DenoiserModel:
    _expect(ckpt, "denoiser")
    md = ckpt.metadata
    return DenoiserModel(_mlp_from(ckpt.arrays), int(md["data_dim"]), int(md["time_embed_dim"]), int(md["cond_dim"]))


def classifier_from_checkpoint(ckpt: Checkpoint) -> ClassifierModel:
    _expect(ckpt, "classifier")
    md = ckpt.metadata
    return ClassifierModel(_mlp_from(ckpt.arrays), int(md["data_dim"]), int(md["n_classes"]))
