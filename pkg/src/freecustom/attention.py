"""Self-attention, multi-reference self-attention (MRSA) and its diagnostics.

Key rows are laid out as ``[self | ref 1 | ... | ref N]``. A weighted mask
carries one value per key row: 1 on the self segment and ``w_i * M_i`` on
reference segment ``i``. Mask values scale the raw logits ``q . k`` before
the ``1/sqrt(d)`` division.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import ConsistencyError, InputError, ShapeError
from .numerics import DTYPE, as_tensor, row_softmax


class MaskMode(str, Enum):
    MULTIPLICATIVE = "multiplicative"
    NEG_INF = "neg_inf"


@dataclass(frozen=True)
class AttentionInputs:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q, k, v = self.q, self.k, self.v
        if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
            raise ShapeError("q, k, v must be 2-D")
        if k.shape[0] != v.shape[0]:
            raise ShapeError(f"k and v row counts differ: {k.shape[0]} vs {v.shape[0]}")
        if q.shape[1] != k.shape[1]:
            raise ShapeError(f"q and k widths differ: {q.shape[1]} vs {k.shape[1]}")

    @property
    def d(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class KVRecord:
    layer: int
    timestep: int
    ref_index: int
    k: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class WeightedMask:
    """Per-key-row weights plus the binary support they were built from.

    ``bounds`` holds ``N + 2`` offsets; segment ``s`` spans
    ``values[bounds[s]:bounds[s + 1]]`` with segment 0 being the self keys.
    """

    values: np.ndarray
    bounds: tuple[int, ...]
    support: np.ndarray

    @property
    def n_refs(self) -> int:
        return len(self.bounds) - 2

    def segment(self, s: int) -> slice:
        return slice(self.bounds[s], self.bounds[s + 1])

    @classmethod
    def ones(cls, length: int) -> "WeightedMask":
        v = np.ones(length, dtype=DTYPE)
        return cls(v, (0, length), v.copy())


def _attend(logits: np.ndarray, v: np.ndarray) -> np.ndarray:
    # float64 accumulation keeps the result independent of key order up to
    # the final float32 rounding
    x = logits.astype(np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return as_tensor(np.matmul(p, v.astype(np.float64)))


def self_attention(inp: AttentionInputs) -> np.ndarray:
    q, k, v = as_tensor(inp.q), as_tensor(inp.k), as_tensor(inp.v)
    scores = np.matmul(q, k.T)
    return _attend(scores / DTYPE(math.sqrt(inp.d)), v)


def concat_reference_kv(
    self_k: np.ndarray, self_v: np.ndarray, refs: Sequence[KVRecord]
) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    if refs:
        layers = {r.layer for r in refs}
        if len(layers) != 1:
            raise ConsistencyError(f"reference records span several layers: {sorted(layers)}")
    d = self_k.shape[1]
    ks, vs, bounds = [self_k], [self_v], [0, self_k.shape[0]]
    for r in refs:
        if r.k.shape[1] != d or r.v.shape[1] != d:
            raise ConsistencyError(f"ref {r.ref_index} width {r.k.shape[1]} != {d}")
        ks.append(r.k)
        vs.append(r.v)
        bounds.append(bounds[-1] + r.k.shape[0])
    if not refs:
        return as_tensor(self_k), as_tensor(self_v), tuple(bounds)
    return as_tensor(np.concatenate(ks)), as_tensor(np.concatenate(vs)), tuple(bounds)


def build_weighted_mask(
    masks: Sequence[np.ndarray], weights: Sequence[float], self_len: int
) -> WeightedMask:
    if len(masks) != len(weights):
        raise InputError(f"{len(weights)} weights given for {len(masks)} masks")
    values = [np.ones(self_len, dtype=DTYPE)]
    support = [np.ones(self_len, dtype=DTYPE)]
    bounds = [0, self_len]
    for m, w in zip(masks, weights):
        if w < 0:
            raise InputError(f"mask weight must be >= 0, got {w}")
        flat = as_tensor(m).reshape(-1)
        if not np.all((flat == 0) | (flat == 1)):
            raise InputError("masks must be binary")
        values.append(flat * DTYPE(w))
        support.append(flat.copy())
        bounds.append(bounds[-1] + flat.size)
    return WeightedMask(as_tensor(np.concatenate(values)), tuple(bounds), as_tensor(np.concatenate(support)))


def mrsa_logits(
    q: np.ndarray, k: np.ndarray, mask: WeightedMask, mode: MaskMode | str = MaskMode.MULTIPLICATIVE
) -> np.ndarray:
    mode = MaskMode(mode)
    q, k = as_tensor(q), as_tensor(k)
    if mask.values.shape[0] != k.shape[0]:
        raise ShapeError(f"mask length {mask.values.shape[0]} != key rows {k.shape[0]}")
    scores = np.matmul(q, k.T) * mask.values[None, :]
    logits = scores / DTYPE(math.sqrt(q.shape[1]))
    if mode is MaskMode.NEG_INF:
        logits = np.where(mask.values[None, :] == 0, DTYPE(-np.inf), logits)
    return logits


def mrsa(
    inp: AttentionInputs, mask: WeightedMask, mode: MaskMode | str = MaskMode.MULTIPLICATIVE
) -> np.ndarray:
    """Attend over concatenated keys ``k'`` with a weighted mask.

    In ``neg_inf`` mode zero-weight keys are excluded outright; the
    multiplicative default only zeroes their logit.
    """
    return _attend(mrsa_logits(inp.q, inp.k, mask, mode), as_tensor(inp.v))


def attention_row(
    q: np.ndarray, k: np.ndarray, mask: WeightedMask, query_index: int,
    mode: MaskMode | str = MaskMode.MULTIPLICATIVE,
) -> np.ndarray:
    if not 0 <= query_index < q.shape[0]:
        raise InputError(f"query index {query_index} outside [0, {q.shape[0]})")
    return row_softmax(mrsa_logits(q[query_index : query_index + 1], k, mask, mode))[0]


def attention_map(
    q: np.ndarray, k: np.ndarray, mask: WeightedMask, query_index: int,
    tile_dims: tuple[int, int], mode: MaskMode | str = MaskMode.MULTIPLICATIVE,
) -> np.ndarray:
    """Softmax row of one query laid out as ``H x ((N+1) W)`` tiles."""
    h, w = tile_dims
    n_tiles = len(mask.bounds) - 1
    if k.shape[0] != n_tiles * h * w:
        raise ShapeError(f"{k.shape[0]} keys do not tile into {n_tiles} segments of {h}x{w}")
    row = attention_row(q, k, mask, query_index, mode)
    tiles = [row[mask.segment(s)].reshape(h, w) for s in range(n_tiles)]
    return as_tensor(np.concatenate(tiles, axis=1))
