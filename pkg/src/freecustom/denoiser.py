"""Toy epsilon-predicting U-Net with 7 blocks and 16 attention layers.

Each layer is a residual block (time-embedding injected) followed by a
transformer unit: group-norm -> self-attention, layer-norm -> cross-attention
over the prompt, layer-norm -> 2-layer MLP, each added back to the residual
stream. Self-attention is routed through a handler so the same network can
run vanilla, harvest reference keys/values, or run MRSA in the blocks of psi.

The prediction is ``z_t + out_scale * net(z_t)``: with untrained weights the
identity term (the best noise guess at high noise levels) keeps sampled
latents at image scale instead of letting DDIM amplify random outputs.

The key projection of every self-attention unit reuses its query projection,
which makes raw logits a positive semi-definite kernel over features; with
random weights this is what gives feature similarity a consistent sign.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .attention import (
    AttentionInputs,
    KVRecord,
    MaskMode,
    WeightedMask,
    concat_reference_kv,
    mrsa,
    self_attention,
)
from .codec import LATENT_CHANNELS, PromptEmbedding
from .errors import CacheMissError, ConfigError, InputError, ShapeError
from .numerics import DTYPE, PrngStream, as_tensor, gaussian_sample, read_fct1, row_softmax, write_fct1

N_BLOCKS = 7
DEFAULT_LAYER_COUNTS = (2, 2, 2, 1, 3, 3, 3)
DEFAULT_RESOLUTIONS = (16, 8, 4, 4, 4, 8, 16)
SKIP_SOURCE = {4: 2, 5: 1, 6: 0}
TEMB_SINUSOID = 32
TEMB_DIM = 128
GROUPS = 8
EPS = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    block_layer_counts: tuple[int, ...] = DEFAULT_LAYER_COUNTS
    block_resolutions: tuple[int, ...] = DEFAULT_RESOLUTIONS
    base_channels: int = 32
    psi: frozenset[int] = frozenset({5, 6})
    d: int = 32
    d_txt: int = 32
    out_scale: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "psi", frozenset(int(b) for b in self.psi))
        if len(self.block_layer_counts) != N_BLOCKS or len(self.block_resolutions) != N_BLOCKS:
            raise ConfigError("the network has exactly 7 blocks")
        if sum(self.block_layer_counts) != 16:
            raise ConfigError(f"layer counts must total 16, got {sum(self.block_layer_counts)}")
        if not self.psi <= set(range(N_BLOCKS)):
            raise ConfigError(f"psi {sorted(self.psi)} not a subset of blocks 0..6")

    @property
    def latent_res(self) -> int:
        return self.block_resolutions[0]

    def channels(self, block: int) -> int:
        return self.base_channels * (self.latent_res // self.block_resolutions[block])

    def layers(self) -> list["LayerAddress"]:
        out, g = [], 0
        for b, n in enumerate(self.block_layer_counts):
            for i in range(n):
                out.append(LayerAddress(b, i, g))
                g += 1
        return out

    def psi_layers(self) -> list["LayerAddress"]:
        return [a for a in self.layers() if a.block in self.psi]

    def address(self, global_layer: int) -> "LayerAddress":
        layers = self.layers()
        if not 0 <= global_layer < len(layers):
            raise InputError(f"global layer {global_layer} outside [0, {len(layers)})")
        return layers[global_layer]

    def with_psi(self, psi) -> "UNetConfig":
        return replace(self, psi=frozenset(psi))

    def shape_dict(self) -> dict:
        return {
            "block_layer_counts": list(self.block_layer_counts),
            "block_resolutions": list(self.block_resolutions),
            "base_channels": self.base_channels,
            "d": self.d,
            "d_txt": self.d_txt,
            "out_scale": self.out_scale,
        }


@dataclass(frozen=True)
class LayerAddress:
    block: int
    layer_in_block: int
    global_layer: int


# parameter layout


def _param_specs(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...], int | str]]:
    """Ordered (key, shape, init) triples; init is a fan-in or 'ones' / 'zeros'."""
    specs: list[tuple[str, tuple[int, ...], int | str]] = []

    def linear(key, n_in, n_out, bias=True):
        specs.append((key + ".w", (n_in, n_out), n_in))
        if bias:
            specs.append((key + ".b", (n_out,), "zeros"))

    def conv(key, c_in, c_out):
        specs.append((key + ".w", (c_out, c_in, 3, 3), c_in * 9))
        specs.append((key + ".b", (c_out,), "zeros"))

    def norm(key, c):
        specs.append((key + ".g", (c,), "ones"))
        specs.append((key + ".b", (c,), "zeros"))

    linear("temb.fc1", TEMB_SINUSOID, TEMB_DIM)
    linear("temb.fc2", TEMB_DIM, TEMB_DIM)
    conv("in.conv", LATENT_CHANNELS, cfg.channels(0))
    d, dt = cfg.d, cfg.d_txt
    for b, n in enumerate(cfg.block_layer_counts):
        c = cfg.channels(b)
        if b in SKIP_SOURCE:
            linear(f"b{b}.skip", cfg.channels(b - 1) + cfg.channels(SKIP_SOURCE[b]), c, bias=False)
        for i in range(n):
            p = f"b{b}.l{i}"
            norm(p + ".res.gn1", c)
            conv(p + ".res.conv1", c, c)
            linear(p + ".res.temb", TEMB_DIM, c)
            norm(p + ".res.gn2", c)
            conv(p + ".res.conv2", c, c)
            norm(p + ".attn.gn", c)
            linear(p + ".attn.wq", c, d, bias=False)
            linear(p + ".attn.wv", c, d, bias=False)
            linear(p + ".attn.wo", d, c, bias=False)
            norm(p + ".xattn.ln", c)
            linear(p + ".xattn.wq", c, d, bias=False)
            linear(p + ".xattn.wk", dt, d, bias=False)
            linear(p + ".xattn.wv", dt, d, bias=False)
            linear(p + ".xattn.wo", d, c, bias=False)
            norm(p + ".mlp.ln", c)
            linear(p + ".mlp.fc1", c, 2 * c)
            linear(p + ".mlp.fc2", 2 * c, c)
        if b + 1 < N_BLOCKS and cfg.block_resolutions[b + 1] < cfg.block_resolutions[b]:
            linear(f"b{b}.down", c, cfg.channels(b + 1), bias=False)
    norm("out.gn", cfg.channels(N_BLOCKS - 1))
    conv("out.conv", cfg.channels(N_BLOCKS - 1), LATENT_CHANNELS)
    return specs


def parameter_count(cfg: UNetConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_specs(cfg))


@dataclass
class WeightBundle:
    init_seed: int
    config: UNetConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.params[key]

    def manifest(self) -> list[dict]:
        return [
            {"key": k, "dims": list(v.shape), "sha256": hashlib.sha256(as_tensor(v).tobytes()).hexdigest()}
            for k, v in self.params.items()
        ]

    def equals(self, other: "WeightBundle") -> bool:
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


def init_weights(seed: int, config: UNetConfig) -> WeightBundle:
    params: dict[str, np.ndarray] = {}
    for i, (key, shape, init) in enumerate(_param_specs(config)):
        if init == "ones":
            arr = np.ones(shape, dtype=DTYPE)
        elif init == "zeros":
            arr = np.zeros(shape, dtype=DTYPE)
        else:
            arr, _ = gaussian_sample(shape, PrngStream(seed, i))
            arr = arr * DTYPE(1.0 / math.sqrt(init))
        arr.setflags(write=False)
        params[key] = arr
    return WeightBundle(seed, config, params)


# weight container: b"FCTC", u32 LE manifest length, UTF-8 JSON manifest,
# then one FCT1 record per manifest entry in manifest order

CONTAINER_MAGIC = b"FCTC"


def save_weights(path: str | Path, bundle: WeightBundle) -> None:
    manifest = {
        "init_seed": bundle.init_seed,
        "config": bundle.config.shape_dict(),
        "entries": bundle.manifest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in bundle.params.values():
            write_fct1(fh, v)


def load_weights(path: str | Path, psi=frozenset({5, 6}), verify: bool = True) -> WeightBundle:
    with open(path, "rb") as fh:
        if fh.read(4) != CONTAINER_MAGIC:
            raise InputError(f"{path}: not a weight container")
        (n,) = struct.unpack("<I", fh.read(4))
        try:
            manifest = json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputError(f"{path}: unreadable manifest ({exc})") from exc
        cfg = UNetConfig(
            block_layer_counts=tuple(manifest["config"]["block_layer_counts"]),
            block_resolutions=tuple(manifest["config"]["block_resolutions"]),
            base_channels=manifest["config"]["base_channels"],
            psi=frozenset(psi),
            d=manifest["config"]["d"],
            d_txt=manifest["config"]["d_txt"],
            out_scale=manifest["config"]["out_scale"],
        )
        params = {}
        for entry in manifest["entries"]:
            arr = read_fct1(fh)
            if list(arr.shape) != entry["dims"]:
                raise InputError(f"{path}: {entry['key']} has dims {arr.shape}, manifest says {entry['dims']}")
            if verify and hashlib.sha256(arr.tobytes()).hexdigest() != entry["sha256"]:
                raise InputError(f"{path}: checksum mismatch for {entry['key']}")
            arr.setflags(write=False)
            params[entry["key"]] = arr
    expected = [k for k, _, _ in _param_specs(cfg)]
    if list(params) != expected:
        raise InputError(f"{path}: parameter keys do not match the network layout")
    return WeightBundle(int(manifest["init_seed"]), cfg, params)


# building blocks, all on channels-first (C, H, W) features


def _silu(x):
    return x / (DTYPE(1.0) + np.exp(-x))


def _gelu(x):
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(DTYPE(0.7978845608) * (x + DTYPE(0.044715) * x * x * x)))


def _group_norm(x, g, b):
    c, h, w = x.shape
    xg = x.reshape(GROUPS, -1)
    mu = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    xn = ((xg - mu) / np.sqrt(var + DTYPE(EPS))).reshape(c, h, w)
    return xn * g[:, None, None] + b[:, None, None]


def _layer_norm(t, g, b):
    mu = t.mean(axis=1, keepdims=True)
    var = t.var(axis=1, keepdims=True)
    return (t - mu) / np.sqrt(var + DTYPE(EPS)) * g + b


def _conv3x3(x, w, b):
    c_in, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c_in, 3, 3, h, wd), dtype=DTYPE)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy, dx] = xp[:, dy : dy + h, dx : dx + wd]
    out = np.matmul(w.reshape(w.shape[0], -1), cols.reshape(c_in * 9, h * wd))
    return (out + b[:, None]).reshape(w.shape[0], h, wd)


def _pointwise(x, w):
    c, h, wd = x.shape
    return np.matmul(w.T, x.reshape(c, -1)).reshape(w.shape[1], h, wd)


def _avgpool2(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def sinusoidal_embedding(t: float, dim: int = TEMB_SINUSOID) -> np.ndarray:
    """First half sin, second half cos, frequencies log-spaced from 1 to 1/10000."""
    if t < 0:
        raise InputError(f"timestep must be >= 0, got {t}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = float(t) * freqs
    return as_tensor(np.concatenate([np.sin(args), np.cos(args)]))


def time_embedding(t: float, dim: int, weights: WeightBundle) -> np.ndarray:
    """Sinusoid of width ``dim`` pushed through the two-layer projection."""
    e = sinusoidal_embedding(t, dim)
    h = _silu(np.matmul(e, weights["temb.fc1.w"]) + weights["temb.fc1.b"])
    return as_tensor(np.matmul(h, weights["temb.fc2.w"]) + weights["temb.fc2.b"])


# self-attention routing

SelfAttnHandler = Callable[[LayerAddress, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def vanilla_handler(addr: LayerAddress, q, k, v) -> np.ndarray:
    return self_attention(AttentionInputs(q, k, v))


def _layer(x, addr: LayerAddress, w: WeightBundle, temb, prompt: PromptEmbedding, sa: SelfAttnHandler):
    p = f"b{addr.block}.l{addr.layer_in_block}"
    c, hh, ww = x.shape

    h = _conv3x3(_silu(_group_norm(x, w[p + ".res.gn1.g"], w[p + ".res.gn1.b"])), w[p + ".res.conv1.w"], w[p + ".res.conv1.b"])
    h = h + (np.matmul(_silu(temb), w[p + ".res.temb.w"]) + w[p + ".res.temb.b"])[:, None, None]
    h = _conv3x3(_silu(_group_norm(h, w[p + ".res.gn2.g"], w[p + ".res.gn2.b"])), w[p + ".res.conv2.w"], w[p + ".res.conv2.b"])
    x = x + h

    n = _group_norm(x, w[p + ".attn.gn.g"], w[p + ".attn.gn.b"]).reshape(c, -1).T
    q = np.matmul(n, w[p + ".attn.wq.w"])
    k = q.copy()
    v = np.matmul(n, w[p + ".attn.wv.w"])
    t = x.reshape(c, -1).T + np.matmul(sa(addr, q, k, v), w[p + ".attn.wo.w"])

    n = _layer_norm(t, w[p + ".xattn.ln.g"], w[p + ".xattn.ln.b"])
    qx = np.matmul(n, w[p + ".xattn.wq.w"])
    kx = np.matmul(prompt.tokens, w[p + ".xattn.wk.w"])
    vx = np.matmul(prompt.tokens, w[p + ".xattn.wv.w"])
    logits = np.matmul(qx, kx.T) / DTYPE(math.sqrt(qx.shape[1]))
    logits = np.where(prompt.pad_mask[None, :], logits, DTYPE(-np.inf))
    t = t + np.matmul(np.matmul(row_softmax(logits), vx), w[p + ".xattn.wo.w"])

    n = _layer_norm(t, w[p + ".mlp.ln.g"], w[p + ".mlp.ln.b"])
    h = _gelu(np.matmul(n, w[p + ".mlp.fc1.w"]) + w[p + ".mlp.fc1.b"])
    t = t + np.matmul(h, w[p + ".mlp.fc2.w"]) + w[p + ".mlp.fc2.b"]
    return as_tensor(t.T.reshape(c, hh, ww))


def run_unet(
    z: np.ndarray, t: int, prompt: PromptEmbedding, weights: WeightBundle, config: UNetConfig,
    sa: SelfAttnHandler = vanilla_handler,
) -> np.ndarray:
    z = as_tensor(z)
    res = config.latent_res
    if z.shape != (LATENT_CHANNELS, res, res):
        raise ShapeError(f"latent dims {z.shape} != ({LATENT_CHANNELS}, {res}, {res})")
    w = weights
    temb = time_embedding(t, TEMB_SINUSOID, w)
    x = _conv3x3(z, w["in.conv.w"], w["in.conv.b"])
    skips = {}
    addrs = iter(config.layers())
    for b, n in enumerate(config.block_layer_counts):
        if b in SKIP_SOURCE:
            if x.shape[1] < config.block_resolutions[b]:
                x = _upsample2(x)
            x = _pointwise(np.concatenate([x, skips[SKIP_SOURCE[b]]]), w[f"b{b}.skip.w"])
        for _ in range(n):
            x = _layer(x, next(addrs), w, temb, prompt, sa)
        if b in SKIP_SOURCE.values():
            skips[b] = x
        if f"b{b}.down.w" in w.params:
            x = _pointwise(_avgpool2(x), w[f"b{b}.down.w"])
    x = _silu(_group_norm(x, w["out.gn.g"], w["out.gn.b"]))
    # identity skip: eps_hat = z_t + out_scale * net(z_t)
    return as_tensor(z + DTYPE(config.out_scale) * _conv3x3(x, w["out.conv.w"], w["out.conv.b"]))


def forward_vanilla(z, t, prompt, weights, config) -> np.ndarray:
    return run_unet(z, t, prompt, weights, config, vanilla_handler)


def forward_reference(
    z_ref: np.ndarray, t: int, prompt: PromptEmbedding, weights: WeightBundle, config: UNetConfig,
    ref_index: int = 1,
) -> list[KVRecord]:
    """Run the unmodified network and keep self-attention K/V of psi layers.

    The noise prediction is computed and thrown away.
    """
    records: list[KVRecord] = []

    def harvest(addr, q, k, v):
        if addr.block in config.psi:
            records.append(KVRecord(addr.global_layer, t, ref_index, k, v))
        return self_attention(AttentionInputs(q, k, v))

    run_unet(z_ref, t, prompt, weights, config, harvest)
    return records


class KVCache:
    """Harvested reference features keyed by (ref_index, global_layer, step).

    Reads are counted per (ref_index, global_layer, step) so tests can show
    which layers consumed which reference.
    """

    def __init__(self, n_refs: int):
        self.n_refs = n_refs
        self.entries: dict[tuple[int, int, int], KVRecord] = {}
        self.reads: Counter = Counter()

    def put(self, step: int, record: KVRecord) -> None:
        self.entries[(record.ref_index, record.layer, step)] = record

    def get(self, ref_index: int, addr: LayerAddress, step: int) -> KVRecord:
        try:
            rec = self.entries[(ref_index, addr.global_layer, step)]
        except KeyError:
            raise CacheMissError(addr.block, addr.global_layer, step, ref_index) from None
        self.reads[(ref_index, addr.global_layer, step)] += 1
        return rec

    def count(self, step: int | None = None) -> int:
        if step is None:
            return len(self.entries)
        return sum(1 for (_, _, s) in self.entries if s == step)

    def drop_step(self, step: int) -> None:
        for key in [k for k in self.entries if k[2] == step]:
            del self.entries[key]


@dataclass(frozen=True)
class AttentionCapture:
    """Self-attention operands of one layer, kept for diagnostics."""

    layer: int
    resolution: int
    q: np.ndarray
    k: np.ndarray
    mask: WeightedMask
    mode: MaskMode


def forward_compose(
    z_t: np.ndarray, t: int, prompt: PromptEmbedding, cache: KVCache | None, step: int,
    masks: Mapping[int, WeightedMask] | None, weights: WeightBundle, config: UNetConfig,
    mode: MaskMode | str = MaskMode.MULTIPLICATIVE,
    capture_layers=(), captured: dict[int, AttentionCapture] | None = None,
) -> np.ndarray:
    """Noise prediction with MRSA in the blocks of ``config.psi``.

    ``masks`` maps a feature resolution to the weighted mask over
    ``[self | ref 1 | ... | ref N]`` keys at that resolution.
    """
    mode = MaskMode(mode)
    n_refs = cache.n_refs if cache is not None else 0
    capture_layers = set(capture_layers)

    def compose(addr, q, k, v):
        res = config.block_resolutions[addr.block]
        if addr.block in config.psi:
            refs = [cache.get(n, addr, step) for n in range(1, n_refs + 1)] if n_refs else []
            kk, vv, bounds = concat_reference_kv(k, v, refs)
            mask = masks[res] if masks is not None and res in masks else None
            if mask is None:
                if n_refs:
                    raise ShapeError(f"no weighted mask for resolution {res}")
                mask = WeightedMask.ones(k.shape[0])
            if mask.bounds != bounds:
                raise ShapeError(f"mask segments {mask.bounds} do not match key layout {bounds} at layer {addr.global_layer}")
            out = mrsa(AttentionInputs(q, kk, vv), mask, mode)
        else:
            kk, mask = k, WeightedMask.ones(k.shape[0])
            out = self_attention(AttentionInputs(q, k, v))
        if addr.global_layer in capture_layers and captured is not None:
            captured[addr.global_layer] = AttentionCapture(addr.global_layer, res, q, kk, mask, mode)
        return out

    return run_unet(z_t, t, prompt, weights, config, compose)
