"""Concept preparation: masks, mask pyramids, copy-paste context and toy scenes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .codec import LatentImage, PromptEmbedding, embed_prompt, encode_image
from .errors import ConfigError, InputError, SpecError
from .numerics import DTYPE, PrngStream, as_tensor, nn_resize

DEFAULT_REF_WEIGHT = 3.0
SELF_WEIGHT = 1.0
MAX_WEIGHT = 8.0
CANVAS = 64

PALETTE: dict[str, tuple[float, float, float]] = {
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
BACKGROUND = "white"
SHAPE_KINDS = ("circle", "square", "triangle", "bar")
ANCHORS = ("top", "bottom", "left", "right", "center", "upper")


@dataclass(frozen=True)
class ConceptRef:
    image: np.ndarray
    latent: LatentImage
    mask: np.ndarray  # binary, latent resolution
    weight: float
    prompt: PromptEmbedding
    name: str

    def __post_init__(self):
        if self.mask.shape != self.latent.spatial:
            raise InputError(f"{self.name}: mask dims {self.mask.shape} != latent dims {self.latent.spatial}")
        if not 0.0 <= self.weight <= MAX_WEIGHT:
            raise ConfigError(f"{self.name}: weight {self.weight} outside [0, {MAX_WEIGHT}]")


def make_concept(
    image: np.ndarray, mask: np.ndarray, prompt: str, name: str,
    weight: float = DEFAULT_REF_WEIGHT, vocab_seed: int = 0,
) -> ConceptRef:
    """Build a reference concept; a pixel-resolution mask is resampled to the latent grid."""
    latent = encode_image(image)
    h, w = latent.spatial
    m = as_tensor(mask)
    if m.shape != (h, w):
        m = nn_resize(m, h, w)
    return ConceptRef(as_tensor(image), latent, binarize_mask(m), float(weight), embed_prompt(prompt, vocab_seed), name)


def binarize_mask(gray: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Values ``>= threshold`` map to 1 (ties go to 1)."""
    return (as_tensor(gray) >= threshold).astype(DTYPE)


def build_mask_pyramid(mask: np.ndarray, resolutions: Sequence[int] = (16, 8, 4)) -> dict[int, np.ndarray]:
    # every level is resampled from the base mask, never from another level
    base = as_tensor(mask)
    return {int(r): nn_resize(base, r, r) for r in resolutions}


def _bbox(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return ys.min(), ys.max(), xs.min(), xs.max()


def shift_field(field: np.ndarray, offset: tuple[int, int]) -> np.ndarray:
    """Translate the last two axes by ``offset = (dx, dy)``, filling with zeros."""
    dx, dy = int(offset[0]), int(offset[1])
    out = np.zeros_like(field)
    h, w = field.shape[-2:]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[..., dst_y, dst_x] = field[..., src_y, src_x]
    return out


def copy_paste_context(
    base_img: np.ndarray, base_mask: np.ndarray, concept_img: np.ndarray, concept_mask: np.ndarray,
    offset: tuple[int, int] = (0, 0),
) -> tuple[np.ndarray, np.ndarray]:
    """Paste the masked concept pixels onto the base image, shifted by ``(dx, dy)``.

    Returns the composite and the shifted concept mask.
    """
    base_img, concept_img = as_tensor(base_img), as_tensor(concept_img)
    cmask = binarize_mask(concept_mask)
    if base_img.shape != concept_img.shape:
        raise InputError(f"image dims differ: {base_img.shape} vs {concept_img.shape}")
    if cmask.shape != base_img.shape[1:] or as_tensor(base_mask).shape != base_img.shape[1:]:
        raise InputError("mask dims must match the image canvas")
    box = _bbox(cmask)
    if box is None:
        return base_img.copy(), cmask
    y0, y1, x0, x1 = box
    h, w = cmask.shape
    dx, dy = int(offset[0]), int(offset[1])
    if y0 + dy < 0 or x0 + dx < 0 or y1 + dy >= h or x1 + dx >= w:
        raise InputError(f"offset ({dx}, {dy}) moves the pasted region outside the {w}x{h} canvas")
    shifted_mask = shift_field(cmask, (dx, dy))
    shifted_img = shift_field(concept_img, (dx, dy))
    out = np.where(shifted_mask[None] > 0, shifted_img, base_img)
    return as_tensor(out), shifted_mask


ColorRange = tuple[tuple[float, float], tuple[float, float], tuple[float, float]]


def threshold_segment(image: np.ndarray, color_ranges: Sequence[ColorRange]) -> list[np.ndarray]:
    """One mask per RGB box; a pixel belongs to a box iff all channels fall inside it."""
    ranges = [tuple((float(lo), float(hi)) for lo, hi in r) for r in color_ranges]
    for i, a in enumerate(ranges):
        if len(a) != 3 or any(lo > hi for lo, hi in a):
            raise ConfigError(f"color range {i} is not three ordered intervals")
        for j in range(i):
            b = ranges[j]
            if all(a[c][0] <= b[c][1] and b[c][0] <= a[c][1] for c in range(3)):
                raise ConfigError(f"color ranges {j} and {i} overlap")
    img = as_tensor(image)
    out = []
    for r in ranges:
        inside = np.ones(img.shape[1:], dtype=bool)
        for c, (lo, hi) in enumerate(r):
            inside &= (img[c] >= lo) & (img[c] <= hi)
        out.append(inside.astype(DTYPE))
    return out


def palette_range(color: str, tol: float = 0.1) -> ColorRange:
    rgb = _color(color)
    return tuple((v - tol, v + tol) for v in rgb)  # type: ignore[return-value]


# synthetic scenes


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    color: str
    size: float
    center: tuple[float, float] = (32.0, 32.0)
    anchor: str | None = None
    name: str = "subject"


@dataclass(frozen=True)
class SceneSpec:
    subject: ShapeSpec
    accessories: tuple[ShapeSpec, ...] = ()
    canvas: int = CANVAS
    jitter: int = 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneSpec":
        try:
            s = d["subject"]
            subject = ShapeSpec(s["kind"], s["color"], float(s["size"]), tuple(map(float, s["center"])),
                                None, s.get("name", "subject"))
            acc = tuple(
                ShapeSpec(a["kind"], a["color"], float(a["size"]), anchor=a["anchor"], name=a["name"])
                for a in d.get("accessories", [])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SpecError(f"malformed scene spec: {exc!r}") from exc
        return cls(subject, acc, int(d.get("canvas", CANVAS)), int(d.get("jitter", 0)))

    @classmethod
    def from_json(cls, path: str | Path) -> "SceneSpec":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SpecError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        s = self.subject
        return {
            "subject": {"kind": s.kind, "color": s.color, "center": list(s.center), "size": s.size, "name": s.name},
            "accessories": [
                {"kind": a.kind, "color": a.color, "anchor": a.anchor, "size": a.size, "name": a.name}
                for a in self.accessories
            ],
            "canvas": self.canvas,
            "jitter": self.jitter,
        }


def _color(name: str) -> tuple[float, float, float]:
    try:
        return PALETTE[name]
    except KeyError:
        raise SpecError(f"unknown color {name!r}; palette is {sorted(PALETTE)}") from None


def rasterize(kind: str, center: tuple[float, float], size: float, canvas: int) -> np.ndarray:
    """Boolean raster sampled at pixel centres; ``center`` is (x, y)."""
    cx, cy = center
    ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
    dx, dy = xs - cx, ys - cy
    if kind == "circle":
        return dx * dx + dy * dy <= size * size
    if kind == "square":
        return (np.abs(dx) <= size) & (np.abs(dy) <= size)
    if kind == "triangle":
        # apex up, base on y = cy + size
        return (dy >= -size) & (dy <= size) & (np.abs(dx) <= (dy + size) / 2.0)
    if kind == "bar":
        return (np.abs(dx) <= size) & (np.abs(dy) <= size / 3.0)
    raise SpecError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def anchor_point(subject: ShapeSpec, anchor: str, center: tuple[float, float]) -> tuple[float, float]:
    cx, cy = center
    r = subject.size
    points = {
        "top": (cx, cy - r),
        "bottom": (cx, cy + r),
        "left": (cx - r, cy),
        "right": (cx + r, cy),
        "center": (cx, cy),
        "upper": (cx, cy - r / 3.0),
    }
    if anchor not in points:
        raise SpecError(f"invalid anchor {anchor!r}; expected one of {ANCHORS}")
    return points[anchor]


def synth_scene(spec: SceneSpec, stream: PrngStream | None = None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Rasterize a subject with attached accessories on a white canvas.

    Every accessory is centred on an anchor point of the subject so it
    overlaps the subject. Returned masks hold the visible pixels of each
    named shape and are therefore pairwise disjoint.
    """
    n = spec.canvas
    shapes = (spec.subject,) + tuple(spec.accessories)
    names = [s.name for s in shapes]
    if len(set(names)) != len(names):
        raise SpecError(f"shape names must be unique, got {names}")
    colors = [s.color for s in shapes]
    if len(set(colors)) != len(colors) or BACKGROUND in colors:
        raise SpecError(f"shapes need distinct non-background colors, got {colors}")

    center = tuple(spec.subject.center)
    if spec.jitter and stream is not None:
        offs = stream.generator().integers(-spec.jitter, spec.jitter + 1, size=2)
        center = (center[0] + float(offs[0]), center[1] + float(offs[1]))

    image = np.empty((3, n, n), dtype=DTYPE)
    image[:] = np.array(_color(BACKGROUND), dtype=DTYPE)[:, None, None]
    label = np.full((n, n), -1, dtype=np.int64)
    body = rasterize(spec.subject.kind, center, spec.subject.size, n)
    if not body.any():
        raise SpecError("subject lies outside the canvas")
    label[body] = 0
    for i, acc in enumerate(spec.accessories, start=1):
        if acc.anchor is None:
            raise SpecError(f"accessory {acc.name!r} has no anchor")
        region = rasterize(acc.kind, anchor_point(spec.subject, acc.anchor, center), acc.size, n)
        if not (region & body).any():
            raise SpecError(f"accessory {acc.name!r} does not touch the subject")
        label[region] = i
    masks = {}
    for i, s in enumerate(shapes):
        m = label == i
        image[:, m] = np.array(_color(s.color), dtype=DTYPE)[:, None]
        masks[s.name] = m.astype(DTYPE)
    return image, masks


def default_scene_specs() -> dict[str, SceneSpec]:
    """The three-concept fixture: a subject, a hat worn on top, glasses at eye height."""
    cat = ShapeSpec("circle", "blue", 14.0, (32.0, 36.0), name="cat")
    other = ShapeSpec("square", "green", 12.0, (32.0, 38.0), name="body")
    hat = ShapeSpec("triangle", "red", 9.0, anchor="top", name="hat")
    glasses = ShapeSpec("bar", "magenta", 9.0, anchor="upper", name="glasses")
    return {
        "subject": SceneSpec(cat),
        "hat": SceneSpec(other, (hat,)),
        "glasses": SceneSpec(ShapeSpec("circle", "yellow", 13.0, (32.0, 34.0), name="face"), (glasses,)),
        "composite": SceneSpec(cat, (hat, glasses)),
    }


SCENE_VOCAB = (
    "a", "an", "the", "cat", "dog", "hat", "sunglasses", "glasses", "wearing", "and", "with", "on",
    "circle", "square", "triangle", "bar", "red", "green", "blue", "yellow", "cyan", "magenta", "black",
    "white", "subject", "face", "body", "photo", "of", "in", "beach", "scarf",
)
