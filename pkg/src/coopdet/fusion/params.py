"""Named parameter tensors and their binary file format.

File layout (all little-endian)::

    magic  b"TAMP"           4 bytes
    version u16
    count   u32               number of tensors
    repeated count times:
        name_len u16, name utf-8 bytes, rows u32, cols u32,
        rows*cols float64 values, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import Iterator, Optional

import numpy as np

from .layers import POS_CODE_DIM
from .tensor import Tensor

MAGIC = b"TAMP"
VERSION = 1

NUM_FEATURES = 5
MOTION_DIM = 7
BOX_DIM = 8
HEADS = ("roi_local", "lqdet", "gqdet")
MLN_STREAMS = ("mln_pos", "mln_ctx", "mln_tgt")
ATTN_BLOCKS = ("hyb", "cross")
MLPS = {"pos_mlp": POS_CODE_DIM, "time_mlp": 1, "motion_mlp": MOTION_DIM}


class ParamsFormatError(ValueError):
    pass


def param_shapes(d: int) -> dict[str, tuple[int, int]]:
    """Declared shape of every parameter for context width ``d``."""
    s: dict[str, tuple[int, int]] = {
        "feat_embed.W": (d, NUM_FEATURES),
        "feat_embed.b": (1, d),
    }
    for name, n_in in MLPS.items():
        s[f"{name}.0.W"] = (d, n_in)
        s[f"{name}.0.b"] = (1, d)
        s[f"{name}.1.W"] = (d, d)
        s[f"{name}.1.b"] = (1, d)
    for name in MLN_STREAMS:
        s[f"{name}.gamma.W"] = (d, d)
        s[f"{name}.beta.W"] = (d, d)
    for blk in ATTN_BLOCKS:
        for p in "qkvo":
            s[f"{blk}.{p}.W"] = (d, d)
            if p != "k":  # a key bias shifts every score of a query equally; softmax ignores it
                s[f"{blk}.{p}.b"] = (1, d)
    for head in HEADS:
        s[f"{head}.hidden.W"] = (d, d)
        s[f"{head}.hidden.b"] = (1, d)
        s[f"{head}.cls.W"] = (1, d)
        s[f"{head}.cls.b"] = (1, 1)
        s[f"{head}.reg.W"] = (BOX_DIM, d)
        s[f"{head}.reg.b"] = (1, BOX_DIM)
    s["roi_global.cls.W"] = (1, d)
    s["roi_global.cls.b"] = (1, 1)
    return s


class ModelParams:
    """Mapping of parameter name to a 2-D float64 array."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = {k: np.asarray(v, dtype=float) for k, v in tensors.items()}
        self.d = self.tensors["feat_embed.W"].shape[0]
        expected = param_shapes(self.d)
        missing = sorted(set(expected) - set(self.tensors))
        if missing:
            raise ParamsFormatError(f"missing parameters: {missing}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ParamsFormatError(
                    f"{name}: expected shape {shape}, got {self.tensors[name].shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ParamsFormatError(f"{name}: non-finite values")

    @classmethod
    def init(cls, d: int = 32, seed: int = 0, prior: float = 0.1) -> "ModelParams":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7])))
        tensors = {}
        for name, (r, c) in param_shapes(d).items():
            if name.endswith(".b"):
                tensors[name] = np.zeros((r, c))
            elif name.startswith("mln_"):
                tensors[name] = np.zeros((r, c))  # identity modulation at start
            else:
                tensors[name] = rng.normal(0.0, 1.0 / np.sqrt(c), size=(r, c))
        bias = -np.log((1.0 - prior) / prior)
        for head in HEADS + ("roi_global",):
            tensors[f"{head}.cls.b"][:] = bias
        return cls(tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def as_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.tensors.items()}

    def num_values(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<HI", VERSION, len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<II", arr.shape[0], arr.shape[1]))
            parts.append(arr.tobytes(order="C"))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelParams":
        if buf[:4] != MAGIC:
            raise ParamsFormatError("bad magic; not a parameter file")
        try:
            version, count = struct.unpack_from("<HI", buf, 4)
            if version != VERSION:
                raise ParamsFormatError(f"unsupported parameter file version {version}")
            off = 10
            tensors = {}
            for _ in range(count):
                (n,) = struct.unpack_from("<H", buf, off)
                off += 2
                name = buf[off:off + n].decode("utf-8")
                off += n
                rows, cols = struct.unpack_from("<II", buf, off)
                off += 8
                size = rows * cols * 8
                if off + size > len(buf):
                    raise ParamsFormatError(f"truncated tensor {name}")
                tensors[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols,
                                              offset=off).reshape(rows, cols).copy()
                off += size
        except struct.error as exc:
            raise ParamsFormatError(f"truncated parameter file: {exc}") from exc
        if off != len(buf):
            raise ParamsFormatError("trailing bytes after last tensor")
        return cls(tensors)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def atomic_write(path: str | os.PathLike, data: bytes, directory: Optional[str] = None) -> None:
    path = os.fspath(path)
    directory = directory or os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
