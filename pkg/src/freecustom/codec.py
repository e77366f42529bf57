"""Deterministic stand-ins for the image autoencoder and the text encoder.

The image codec lifts RGB to four latent channels with a fixed orthonormal
projection and average-pools by ``scale_factor``; decoding upsamples with
nearest-neighbour and applies the transpose projection. Because the
projection has orthonormal columns, decode(encode(x)) == x wherever x is
constant over each pooling cell.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, ShapeError
from .numerics import DTYPE, PrngStream, as_tensor, gaussian_sample

LATENT_CHANNELS = 4
SCALE_FACTOR = 4
VOCAB_SLOTS = 4096
TEXT_WIDTH = 32
MAX_TOKENS = 16

_PROJECTION_SEED = 0xF4EEC057
_VOCAB_STREAM = 0x70CAB


@dataclass(frozen=True)
class LatentImage:
    tensor: np.ndarray  # (4, h, w)
    scale_factor: int = SCALE_FACTOR

    @property
    def spatial(self) -> tuple[int, int]:
        return self.tensor.shape[1], self.tensor.shape[2]

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.spatial
        return h * self.scale_factor, w * self.scale_factor


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: np.ndarray  # (16, 32); rows past token_count are zero
    token_count: int
    text: str = ""

    @property
    def pad_mask(self) -> np.ndarray:
        """True for real tokens, False for padding."""
        return np.arange(self.tokens.shape[0]) < self.token_count


@lru_cache(maxsize=1)
def channel_projection() -> np.ndarray:
    """Fixed 4x3 matrix with orthonormal columns (RGB -> latent channels)."""
    rng = np.random.Generator(np.random.Philox(key=_PROJECTION_SEED))
    a = rng.standard_normal((LATENT_CHANNELS, 3))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # unique sign convention
    return q.astype(DTYPE)


def encode_image(rgb: np.ndarray, scale_factor: int = SCALE_FACTOR) -> LatentImage:
    x = as_tensor(rgb)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"expected a 3xHxW image, got {x.shape}")
    _, h, w = x.shape
    if h % scale_factor or w % scale_factor:
        raise ShapeError(f"image extents {h}x{w} not divisible by scale factor {scale_factor}")
    p = channel_projection()
    lifted = np.tensordot(p, x, axes=([1], [0]))  # (4, H, W)
    pooled = lifted.reshape(LATENT_CHANNELS, h // scale_factor, scale_factor, w // scale_factor, scale_factor)
    return LatentImage(as_tensor(pooled.mean(axis=(2, 4))), scale_factor)


def decode_latent(z: LatentImage) -> np.ndarray:
    t = as_tensor(z.tensor)
    if t.ndim != 3 or t.shape[0] != LATENT_CHANNELS:
        raise ShapeError(f"expected a 4xhxw latent, got {t.shape}")
    s = z.scale_factor
    up = np.repeat(np.repeat(t, s, axis=1), s, axis=2)
    rgb = np.tensordot(channel_projection().T, up, axes=([1], [0]))
    return as_tensor(np.clip(rgb, 0.0, 1.0))


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def token_slot(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % VOCAB_SLOTS


@lru_cache(maxsize=8)
def _vocab_table(vocab_seed: int) -> np.ndarray:
    table, _ = gaussian_sample((VOCAB_SLOTS, TEXT_WIDTH), PrngStream(vocab_seed, _VOCAB_STREAM))
    table.setflags(write=False)
    return table


def embed_prompt(text: str, vocab_seed: int = 0) -> PromptEmbedding:
    words = tokenize(text)
    if not words:
        raise InputError("prompt text is empty")
    words = words[:MAX_TOKENS]
    table = _vocab_table(vocab_seed)
    out = np.zeros((MAX_TOKENS, TEXT_WIDTH), dtype=DTYPE)
    for i, w in enumerate(words):
        out[i] = table[token_slot(w)]
    return PromptEmbedding(out, len(words), text)


# PNG I/O: RGB images are 8-bit, masks are 8-bit grayscale with >=128 -> 1


def load_rgb_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return as_tensor(arr.transpose(2, 0, 1) / 255.0)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    x = np.clip(as_tensor(rgb), 0.0, 1.0)
    return np.rint(x * 255.0).astype(np.uint8)


def save_rgb_png(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(to_uint8(rgb).transpose(1, 2, 0))).save(path, format="PNG")


def load_mask_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr >= 128).astype(DTYPE)


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    m = np.where(as_tensor(mask) > 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(m).save(path, format="PNG")


def save_gray_png(path: str | Path, field: np.ndarray) -> None:
    """Write a field as a heatmap with per-image linear min-max normalisation."""
    f = as_tensor(field).astype(np.float64)
    lo, hi = float(f.min()), float(f.max())
    scaled = np.zeros_like(f) if hi <= lo else (f - lo) / (hi - lo)
    Image.fromarray(np.rint(scaled * 255.0).astype(np.uint8)).save(path, format="PNG")
