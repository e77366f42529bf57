"""Dense float32 tensor primitives, seeded sampling and the FCT1 dump format.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Every public
function returns a fresh float32 array and never mutates its inputs.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import InputError, ShapeError

DTYPE = np.float32
FCT1_MAGIC = b"FCT1"
_U64 = (1 << 64) - 1


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def row_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with row-max subtraction.

    Entries equal to ``-inf`` get exactly zero probability. A row must keep
    at least one finite entry.
    """
    x = as_tensor(logits)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return (e / np.sum(e, axis=-1, keepdims=True)).astype(DTYPE, copy=False)


def nn_index_map(src: int, dst: int) -> np.ndarray:
    """Source index sampled by each destination index: floor((i + 0.5) * src / dst)."""
    if src <= 0 or dst <= 0:
        raise ShapeError(f"extents must be positive, got src={src}, dst={dst}")
    i = np.arange(dst, dtype=np.int64)
    # exact integer form of floor((i + 0.5) * src / dst)
    return ((2 * i + 1) * src) // (2 * dst)


def nn_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    m = as_tensor(mask)
    if m.ndim != 2:
        raise ShapeError(f"nn_resize expects a 2-D field, got {m.shape}")
    rows = nn_index_map(m.shape[0], out_h)
    cols = nn_index_map(m.shape[1], out_w)
    return np.ascontiguousarray(m[np.ix_(rows, cols)])


@dataclass(frozen=True)
class PrngStream:
    """Position in a Philox counter-based stream keyed by ``(seed, stream_id)``.

    The stream is a value: drawing from it returns the advanced stream rather
    than mutating anything.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id", "counter"):
            v = getattr(self, name)
            if not 0 <= v <= _U64:
                raise InputError(f"{name} must fit in 64 unsigned bits, got {v}")

    def generator(self) -> np.random.Generator:
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64),
        )
        return np.random.Generator(bitgen)

    def derive(self, stream_id: int) -> "PrngStream":
        return PrngStream(self.seed, stream_id & _U64, 0)


def gaussian_sample(dims: Sequence[int], stream: PrngStream) -> tuple[np.ndarray, PrngStream]:
    """Draw i.i.d. standard normals; returns the tensor and the advanced stream."""
    dims = tuple(int(d) for d in dims)
    gen = stream.generator()
    out = gen.standard_normal(dims, dtype=DTYPE)
    used = int(gen.bit_generator.state["state"]["counter"][0])
    # Philox pre-increments its counter, so `used` is the last consumed block;
    # leftover words of that block are discarded
    return out, PrngStream(stream.seed, stream.stream_id, used)


# FCT1: magic, u32 LE rank, rank x u32 LE dims, f32 LE payload


def write_fct1(fh: BinaryIO, tensor: np.ndarray) -> None:
    t = as_tensor(tensor)
    fh.write(FCT1_MAGIC)
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(t.astype("<f4", copy=False).tobytes(order="C"))


def read_fct1(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != FCT1_MAGIC:
        raise InputError(f"bad FCT1 magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(dims)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise InputError(f"truncated FCT1 stream: wanted {n} bytes, got {len(data)}")
    return data


def fct1_bytes(tensor: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_fct1(buf, tensor)
    return buf.getvalue()


def save_fct1(path: str | Path, tensor: np.ndarray) -> None:
    Path(path).write_bytes(fct1_bytes(tensor))


def load_fct1(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_fct1(fh)
