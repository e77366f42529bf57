"""Dual-path sampling: reference-path K/V harvesting plus MRSA composition.

At every sampler step each reference latent is noised to the current
timestep and pushed through the unmodified network purely to record its
self-attention keys and values in the psi blocks. The composition latent is
then denoised by the same network with MRSA over ``[self | refs]`` in those
blocks.
"""

from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .attention import KVRecord, MaskMode, WeightedMask, attention_map, build_weighted_mask, mrsa_logits
from .codec import LATENT_CHANNELS, LatentImage, decode_latent, embed_prompt
from .concepts import DEFAULT_REF_WEIGHT, SELF_WEIGHT, ConceptRef, build_mask_pyramid
from .denoiser import (
    AttentionCapture,
    KVCache,
    UNetConfig,
    WeightBundle,
    forward_compose,
    forward_reference,
    forward_vanilla,
    init_weights,
)
from .diffusion import (
    NoiseSchedule,
    ddim_step,
    ddpm_step,
    forward_diffuse,
    linear_schedule,
    respaced,
    sampling_plan,
)
from .errors import CacheMissError, ConfigError, InputError
from .numerics import DTYPE, PrngStream, as_tensor, gaussian_sample, nn_resize, row_softmax

log = logging.getLogger(__name__)

MAX_REFS = 4
THREADS_ENV = "FREECUSTOM_THREADS"

# stream ids derived from the run seed
_INIT_STREAM = 1
_DDPM_TAG = 2 << 56
_REF_TAG = 3 << 56


class Sampler(str, Enum):
    DDIM = "ddim"
    DDPM = "ddpm"


class RefNoisePolicy(str, Enum):
    FRESH_PER_STEP = "fresh_per_step"
    FIXED = "fixed"


@dataclass(frozen=True)
class AttnMapRequest:
    layer: int
    step: int
    query: tuple[int, int]


@dataclass(frozen=True)
class PipelineConfig:
    refs: tuple[ConceptRef, ...] = ()
    target_prompt: str = "a photo"
    psi: frozenset[int] = frozenset({5, 6})
    steps: int = 50
    seed: int = 0
    mask_mode: MaskMode = MaskMode.MULTIPLICATIVE
    sampler: Sampler = Sampler.DDIM
    ref_noise_policy: RefNoisePolicy = RefNoisePolicy.FRESH_PER_STEP
    output_dir: str | None = None
    self_weight: float = SELF_WEIGHT
    weight_seed: int = 0
    vocab_seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    latent_res: int = 16
    attention_maps: tuple[AttnMapRequest, ...] = ()
    correspondence: tuple[tuple[int, int], ...] = ()
    capture: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "refs", tuple(self.refs))
        object.__setattr__(self, "psi", frozenset(int(b) for b in self.psi))
        object.__setattr__(self, "mask_mode", MaskMode(self.mask_mode))
        object.__setattr__(self, "sampler", Sampler(self.sampler))
        object.__setattr__(self, "ref_noise_policy", RefNoisePolicy(self.ref_noise_policy))
        if len(self.refs) > MAX_REFS:
            raise ConfigError(f"refs: at most {MAX_REFS} reference concepts, got {len(self.refs)}")
        if not 1 <= self.steps <= self.T:
            raise ConfigError(f"steps: must lie in [1, {self.T}], got {self.steps}")
        if self.self_weight != SELF_WEIGHT:
            raise ConfigError("self_weight: the self segment is fixed at 1")
        if not self.psi <= set(range(7)):
            raise ConfigError(f"psi: blocks must lie in 0..6, got {sorted(self.psi)}")
        if not 0 <= self.seed < 1 << 64:
            raise ConfigError("seed: must fit in 64 unsigned bits")
        dims = {r.latent.tensor.shape for r in self.refs}
        if len(dims) > 1:
            raise ConfigError(f"refs: latents must share dimensions, got {sorted(dims)}")
        if dims and dims != {(LATENT_CHANNELS, self.latent_res, self.latent_res)}:
            raise ConfigError(f"refs: latent dims {dims.pop()} do not match latent_res {self.latent_res}")

    @property
    def n_refs(self) -> int:
        return len(self.refs)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(psi=self.psi)

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end)


def default_settings() -> dict:
    """Implementation defaults as serialized into a run config."""
    return {
        "self_weight": SELF_WEIGHT,
        "ref_weight": DEFAULT_REF_WEIGHT,
        "psi": sorted(PipelineConfig().psi),
        "steps": PipelineConfig().steps,
        "sampler": Sampler.DDIM.value,
        "mask_mode": MaskMode.MULTIPLICATIVE.value,
        "ref_noise_policy": RefNoisePolicy.FRESH_PER_STEP.value,
    }


@dataclass(frozen=True)
class CorrespondenceMap:
    """Best-matching reference key for every query position.

    ``ref_index`` is 1-based (which concept matched); ``position`` is the
    flat key index inside that reference's feature map.
    """

    ref_index: np.ndarray
    position: np.ndarray


@dataclass
class RunDiagnostics:
    captures: dict[tuple[int, int], AttentionCapture] = field(default_factory=dict)
    attention_maps: dict[tuple[int, int, tuple[int, int]], np.ndarray] = field(default_factory=dict)
    correspondences: dict[tuple[int, int], CorrespondenceMap] = field(default_factory=dict)
    cache_reads: dict[tuple[int, int, int], int] = field(default_factory=dict)
    cache_entries: int = 0
    timings: dict[str, float] = field(default_factory=dict)


@dataclass
class RunResult:
    image: np.ndarray
    latent: np.ndarray
    diagnostics: RunDiagnostics
    config: PipelineConfig


def worker_count(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, min(n, n_jobs))


def ref_key(ref: ConceptRef) -> int:
    """Stable 32-bit identity of a reference, independent of its list position."""
    h = hashlib.blake2b(digest_size=4)
    h.update(ref.name.encode("utf-8"))
    h.update(as_tensor(ref.image).tobytes())
    h.update(as_tensor(ref.mask).tobytes())
    return int.from_bytes(h.digest(), "little")


def reference_noise(ref: ConceptRef, step: int, seed: int, policy: RefNoisePolicy) -> np.ndarray:
    step_key = step if RefNoisePolicy(policy) is RefNoisePolicy.FRESH_PER_STEP else 0
    stream = PrngStream(seed, _REF_TAG | (ref_key(ref) << 20) | step_key)
    eps, _ = gaussian_sample(ref.latent.tensor.shape, stream)
    return eps


def harvest_reference_features(
    refs: Sequence[ConceptRef], step: int, t: int, sched: NoiseSchedule, weights: WeightBundle,
    config: PipelineConfig, prompts=None, workers: int = 1,
) -> dict[tuple[int, int], KVRecord]:
    """K/V of every psi layer for every reference at one sampler step.

    Returns ``{(ref_index, global_layer): record}`` with 1-based ref indices.
    """
    unet = config.unet_config()
    prompts = prompts or [embed_prompt(_ref_prompt_text(r), config.vocab_seed) for r in refs]

    def one(i: int) -> list[KVRecord]:
        ref = refs[i]
        eps = reference_noise(ref, step, config.seed, config.ref_noise_policy)
        z_ref = forward_diffuse(ref.latent.tensor, t, eps, sched)
        return forward_reference(z_ref, t, prompts[i], weights, unet, ref_index=i + 1)

    if workers > 1 and len(refs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_ref = list(pool.map(one, range(len(refs))))
    else:
        per_ref = [one(i) for i in range(len(refs))]
    return {(rec.ref_index, rec.layer): rec for recs in per_ref for rec in recs}


def _ref_prompt_text(ref: ConceptRef) -> str:
    return ref.prompt.text or ref.name


def composition_masks(refs: Sequence[ConceptRef], unet: UNetConfig) -> dict[int, WeightedMask]:
    resolutions = sorted({unet.block_resolutions[b] for b in unet.psi}, reverse=True)
    pyramids = [build_mask_pyramid(r.mask, resolutions) for r in refs]
    return {
        res: build_weighted_mask([p[res] for p in pyramids], [r.weight for r in refs], res * res)
        for res in resolutions
    }


def _initial_latent(config: PipelineConfig) -> np.ndarray:
    z, _ = gaussian_sample((LATENT_CHANNELS, config.latent_res, config.latent_res), PrngStream(config.seed, _INIT_STREAM))
    return z


def _sample(config: PipelineConfig, predict) -> np.ndarray:
    """Shared reverse loop; ``predict(z, t, step)`` returns the noise estimate."""
    sched = config.schedule()
    plan = sampling_plan(config.T, config.steps)
    z = _initial_latent(config)
    rsched = respaced(sched, sorted(plan[:-1])) if config.sampler is Sampler.DDPM else None
    for step in range(1, config.steps + 1):
        t, t_prev = plan[step - 1], plan[step]
        eps_hat = predict(z, t, step)
        if rsched is None:
            z = ddim_step(z, eps_hat, t, t_prev, sched)
        else:
            j = config.steps - step + 1
            noise, _ = gaussian_sample(z.shape, PrngStream(config.seed, _DDPM_TAG | step))
            z = ddpm_step(z, eps_hat, j, rsched, noise)
    return z


def sample_vanilla(config: PipelineConfig, weights: WeightBundle | None = None) -> RunResult:
    """Plain text-to-image sampling with the unmodified network."""
    unet = config.unet_config()
    weights = weights or init_weights(config.weight_seed, unet)
    prompt = embed_prompt(config.target_prompt, config.vocab_seed)
    z0 = _sample(config, lambda z, t, step: forward_vanilla(z, t, prompt, weights, unet))
    return RunResult(decode_latent(LatentImage(z0)), z0, RunDiagnostics(), config)


def _capture_addresses(config: PipelineConfig) -> set[tuple[int, int]]:
    addrs = {(a.layer, a.step) for a in config.attention_maps}
    addrs |= set(config.correspondence)
    addrs |= set(config.capture)
    unet = config.unet_config()
    for layer, step in addrs:
        try:
            unet.address(layer)
        except InputError as exc:
            raise ConfigError(f"diagnostics: {exc}") from None
        if not 1 <= step <= config.steps:
            raise ConfigError(f"diagnostics: step {step} outside [1, {config.steps}]")
    for layer, _ in config.correspondence:
        if unet.address(layer).block not in unet.psi:
            raise ConfigError(f"diagnostics.correspondence: layer {layer} is outside the MRSA blocks {sorted(unet.psi)}")
    return addrs


def run_freecustom(config: PipelineConfig, weights: WeightBundle | None = None) -> RunResult:
    unet = config.unet_config()
    weights = weights or init_weights(config.weight_seed, unet)
    sched = config.schedule()
    refs = config.refs
    n = len(refs)
    target = embed_prompt(config.target_prompt, config.vocab_seed)
    ref_prompts = [embed_prompt(_ref_prompt_text(r), config.vocab_seed) for r in refs]
    masks = composition_masks(refs, unet) if n else None
    wanted = _capture_addresses(config)
    workers = worker_count(n)

    cache = KVCache(n)
    diag = RunDiagnostics()
    timings = {"reference_path": 0.0, "composition_path": 0.0}
    psi_count = len(unet.psi_layers())

    def predict(z, t, step):
        t0 = time.perf_counter()
        if n:
            harvested = harvest_reference_features(refs, step, t, sched, weights, config, ref_prompts, workers)
            for rec in harvested.values():
                cache.put(step, rec)
        if cache.count(step) != n * psi_count:
            for ref in range(1, n + 1):
                for addr in unet.psi_layers():
                    if (ref, addr.global_layer, step) not in cache.entries:
                        raise CacheMissError(addr.block, addr.global_layer, step, ref)
        t1 = time.perf_counter()
        layers = {layer for layer, s in wanted if s == step}
        captured: dict[int, AttentionCapture] = {}
        eps = forward_compose(z, t, target, cache, step, masks, weights, unet, config.mask_mode, layers, captured)
        for layer, cap in captured.items():
            diag.captures[(layer, step)] = cap
        for layer, s in config.correspondence:
            if s == step:
                q = diag.captures[(layer, step)].q
                diag.correspondences[(layer, step)] = _correspondence_from_cache(q, cache, refs, layer, step, unet)
        t2 = time.perf_counter()
        timings["reference_path"] += t1 - t0
        timings["composition_path"] += t2 - t1
        return eps

    t_start = time.perf_counter()
    z0 = _sample(config, predict)
    t_dec = time.perf_counter()
    image = decode_latent(LatentImage(z0))
    timings["decode"] = time.perf_counter() - t_dec
    timings["total"] = time.perf_counter() - t_start

    for req in config.attention_maps:
        cap = diag.captures[(req.layer, req.step)]
        diag.attention_maps[(req.layer, req.step, req.query)] = capture_attention_map(cap, req.query)
    diag.cache_reads = dict(cache.reads)
    diag.cache_entries = len(cache.entries)
    diag.timings = timings
    log.info("run finished: %s", {k: round(v, 3) for k, v in timings.items()})
    return RunResult(image, z0, diag, config)


def _correspondence_from_cache(q, cache: KVCache, refs, layer, step, unet: UNetConfig) -> CorrespondenceMap:
    addr = unet.address(layer)
    res = unet.block_resolutions[addr.block]
    records = [cache.entries[(i, layer, step)] for i in range(1, len(refs) + 1)]
    masks = [nn_resize(r.mask, res, res) for r in refs]
    return correspondence_map(q, records, masks, (res, res))


def query_index(query: tuple[int, int], res: int) -> int:
    r, c = query
    if not (0 <= r < res and 0 <= c < res):
        raise InputError(f"query ({r}, {c}) outside the {res}x{res} feature grid")
    return r * res + c


def capture_attention_map(cap: AttentionCapture, query: tuple[int, int]) -> np.ndarray:
    return attention_map(cap.q, cap.k, cap.mask, query_index(query, cap.resolution),
                         (cap.resolution, cap.resolution), cap.mode)


def correspondence_map(
    q_features: np.ndarray, ref_records: Sequence[KVRecord], masks: Sequence[np.ndarray],
    tile_dims: tuple[int, int],
) -> CorrespondenceMap:
    """Per-query argmax of cosine similarity over unmasked reference keys.

    Ties resolve to the lowest (reference, position) pair.
    """
    h, w = tile_dims
    if len(ref_records) != len(masks) or not masks:
        raise InputError("need one mask per reference record and at least one reference")
    q = as_tensor(q_features)
    keys = np.concatenate([as_tensor(r.k) for r in ref_records])
    allowed = np.concatenate([as_tensor(m).reshape(-1) > 0 for m in masks])
    if not allowed.any():
        raise InputError("every reference position is masked out")
    lengths = [r.k.shape[0] for r in ref_records]
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), DTYPE(1e-12))
    kn = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), DTYPE(1e-12))
    sim = np.matmul(qn, kn.T) / DTYPE(np.sqrt(q.shape[1]))
    sim = np.where(allowed[None, :], sim, DTYPE(-np.inf))
    best = np.argmax(sim, axis=1)
    ref = np.searchsorted(offsets, best, side="right")
    pos = best - offsets[ref - 1]
    return CorrespondenceMap(ref.reshape(h, w).astype(np.int64), pos.reshape(h, w).astype(np.int64))


def attention_mass_report(
    diag: RunDiagnostics, concept_index: int, region_mask: np.ndarray, layer: int, step: int,
) -> float:
    """Mean attention mass that region queries put on concept ``i``'s masked keys."""
    try:
        cap = diag.captures[(layer, step)]
    except KeyError:
        raise InputError(f"no attention capture at layer {layer}, step {step}") from None
    return capture_attention_mass(cap, concept_index, region_mask)


def capture_attention_mass(cap: AttentionCapture, concept_index: int, region_mask: np.ndarray) -> float:
    if not 1 <= concept_index <= cap.mask.n_refs:
        raise InputError(f"concept index {concept_index} outside [1, {cap.mask.n_refs}]")
    res = cap.resolution
    region = as_tensor(region_mask)
    if region.shape != (res, res):
        region = nn_resize(region, res, res)
    rows = np.nonzero(region.reshape(-1) > 0)[0]
    if rows.size == 0:
        raise InputError("region mask selects no queries")
    probs = row_softmax(mrsa_logits(cap.q[rows], cap.k, cap.mask, cap.mode))
    seg = cap.mask.segment(concept_index)
    inside = cap.mask.support[seg] > 0
    mass = probs[:, seg][:, inside].astype(np.float64).sum(axis=1)
    return float(mass.mean())


def with_overrides(config: PipelineConfig, **changes) -> PipelineConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
