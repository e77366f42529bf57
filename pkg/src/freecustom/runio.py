"""Run config files, output trees and the run manifest.

Paths inside a config resolve against the config file's directory. The
manifest written next to ``result.png`` uses the same schema as a config
(paths rewritten relative to the output directory), so it can be fed back
as ``--config`` to reproduce the run.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from .attention import MaskMode, WeightedMask
from .codec import load_mask_png, load_rgb_png, save_gray_png, save_rgb_png
from .concepts import DEFAULT_REF_WEIGHT, MAX_WEIGHT, PALETTE, SELF_WEIGHT, make_concept
from .denoiser import AttentionCapture, UNetConfig, WeightBundle, init_weights, load_weights, parameter_count
from .errors import ConfigError, FreeCustomError, InputError
from .numerics import as_tensor, load_fct1, save_fct1
from .pipeline import AttnMapRequest, CorrespondenceMap, PipelineConfig, RunResult, run_freecustom

RESULT_NAME = "result.png"
MANIFEST_NAME = "run_manifest.json"
DIAG_DIR = "diagnostics"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RefModel(_Strict):
    image: str
    mask: str
    weight: float = Field(DEFAULT_REF_WEIGHT, ge=0.0, le=MAX_WEIGHT)
    prompt: str = Field(min_length=1)
    name: str = Field(min_length=1)


class AttnMapModel(_Strict):
    layer: int = Field(ge=0, le=15)
    step: int = Field(ge=1)
    query: tuple[int, int]


class CorrespondenceModel(_Strict):
    layer: int = Field(ge=0, le=15)
    step: int = Field(ge=1)


class DiagnosticsModel(_Strict):
    attention_maps: list[AttnMapModel] = []
    correspondence: list[CorrespondenceModel] = []


class ScheduleModel(_Strict):
    T: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(2e-2, gt=0.0, lt=1.0)


class RunConfigModel(_Strict):
    seed: int = Field(0, ge=0, lt=1 << 64)
    steps: int = Field(50, ge=1)
    sampler: Literal["ddim", "ddpm"] = "ddim"
    mask_mode: Literal["multiplicative", "neg_inf"] = "multiplicative"
    ref_noise_policy: Literal["fresh_per_step", "fixed"] = "fresh_per_step"
    psi: list[int] = [5, 6]
    target_prompt: str = Field(min_length=1)
    self_weight: float = SELF_WEIGHT
    refs: list[RefModel] = Field(default_factory=list, max_length=4)
    diagnostics: DiagnosticsModel = DiagnosticsModel()
    output_dir: str = "out"
    weight_seed: int = Field(0, ge=0, lt=1 << 64)
    vocab_seed: int = Field(0, ge=0, lt=1 << 64)
    weights: Optional[str] = None
    schedule: ScheduleModel = ScheduleModel()
    # present only in manifests; ignored on input
    content_hashes: Optional[dict[str, str]] = None
    engine: Optional[dict] = None

    @field_validator("psi")
    @classmethod
    def _psi_blocks(cls, v):
        if any(not 0 <= b <= 6 for b in v) or len(set(v)) != len(v):
            raise ValueError("psi must list distinct block indices in 0..6")
        return sorted(v)

    @field_validator("self_weight")
    @classmethod
    def _self_weight(cls, v):
        if v != SELF_WEIGHT:
            raise ValueError("the self segment weight is fixed at 1")
        return v


def default_run_config(target_prompt: str = "a photo") -> dict:
    """A config with every field at its default, as it would be serialized."""
    return RunConfigModel(target_prompt=target_prompt).model_dump(exclude={"content_hashes", "engine"})


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"field {loc}: {err['msg']}")
    return "; ".join(lines)


def parse_run_config(text: str, source: str = "<config>") -> RunConfigModel:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{source}: malformed JSON at byte offset {exc.pos} (line {exc.lineno}, column {exc.colno}): {exc.msg}"
        ) from exc
    try:
        return RunConfigModel.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_format_validation(exc)}") from exc


def load_run_config(path: str | Path) -> tuple[RunConfigModel, Path]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_run_config(text, str(path)), path.resolve().parent


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def build_pipeline_config(model: RunConfigModel, base: Path) -> PipelineConfig:
    refs = []
    for i, r in enumerate(model.refs):
        try:
            image = load_rgb_png(_resolve(base, r.image))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"field refs.{i}.image: cannot load {r.image!r} ({exc})") from exc
        try:
            mask = load_mask_png(_resolve(base, r.mask))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"field refs.{i}.mask: cannot load {r.mask!r} ({exc})") from exc
        if mask.shape != image.shape[1:]:
            raise ConfigError(f"field refs.{i}.mask: dims {mask.shape} differ from image dims {image.shape[1:]}")
        try:
            refs.append(make_concept(image, mask, r.prompt, r.name, r.weight, model.vocab_seed))
        except FreeCustomError as exc:
            raise ConfigError(f"field refs.{i}: {exc}") from exc
    try:
        return PipelineConfig(
            refs=tuple(refs),
            target_prompt=model.target_prompt,
            psi=frozenset(model.psi),
            steps=model.steps,
            seed=model.seed,
            mask_mode=model.mask_mode,
            sampler=model.sampler,
            ref_noise_policy=model.ref_noise_policy,
            output_dir=str(_resolve(base, model.output_dir)),
            weight_seed=model.weight_seed,
            vocab_seed=model.vocab_seed,
            T=model.schedule.T,
            beta_start=model.schedule.beta_start,
            beta_end=model.schedule.beta_end,
            attention_maps=tuple(AttnMapRequest(a.layer, a.step, tuple(a.query)) for a in model.diagnostics.attention_maps),
            correspondence=tuple((c.layer, c.step) for c in model.diagnostics.correspondence),
        )
    except FreeCustomError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_weights(model: RunConfigModel, base: Path, config: PipelineConfig) -> WeightBundle:
    unet = config.unet_config()
    if model.weights is None:
        return init_weights(model.weight_seed, unet)
    bundle = load_weights(_resolve(base, model.weights), psi=unet.psi)
    if bundle.config != unet:
        raise ConfigError("field weights: network layout of the weight file differs from the engine default")
    return bundle


# output tree


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tag(layer: int, step: int) -> str:
    return f"L{layer:02d}_S{step:03d}"


def save_capture(diag_dir: Path, cap: AttentionCapture, step: int) -> list[Path]:
    tag = _tag(cap.layer, step)
    paths = []
    for name, arr in (("q", cap.q), ("k", cap.k), ("mask", cap.mask.values), ("support", cap.mask.support)):
        p = diag_dir / f"capture_{tag}_{name}.fct"
        save_fct1(p, arr)
        paths.append(p)
    meta = {
        "layer": cap.layer,
        "step": step,
        "resolution": cap.resolution,
        "bounds": list(cap.mask.bounds),
        "mode": cap.mode.value,
    }
    p = diag_dir / f"capture_{tag}.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths.append(p)
    return paths


def load_capture(run_dir: str | Path, layer: int, step: int) -> AttentionCapture:
    diag_dir = Path(run_dir) / DIAG_DIR
    tag = _tag(layer, step)
    meta_path = diag_dir / f"capture_{tag}.json"
    if not meta_path.exists():
        raise InputError(f"no attention capture for layer {layer}, step {step} in {run_dir}")
    meta = json.loads(meta_path.read_text())
    mask = WeightedMask(
        load_fct1(diag_dir / f"capture_{tag}_mask.fct"),
        tuple(meta["bounds"]),
        load_fct1(diag_dir / f"capture_{tag}_support.fct"),
    )
    return AttentionCapture(
        meta["layer"], meta["resolution"],
        load_fct1(diag_dir / f"capture_{tag}_q.fct"), load_fct1(diag_dir / f"capture_{tag}_k.fct"),
        mask, MaskMode(meta["mode"]),
    )


def attention_map_paths(out_dir: Path, layer: int, step: int, query: tuple[int, int]) -> tuple[Path, Path]:
    stem = f"attn_{_tag(layer, step)}_r{query[0]:02d}_c{query[1]:02d}"
    return out_dir / f"{stem}.png", out_dir / f"{stem}.fct"


def write_attention_map(out_dir: Path, layer: int, step: int, query, amap: np.ndarray) -> list[Path]:
    png, fct = attention_map_paths(out_dir, layer, step, query)
    save_fct1(fct, amap)
    save_gray_png(png, amap)
    return [png, fct]


_CONCEPT_COLORS = [PALETTE[c] for c in ("red", "green", "blue", "magenta", "cyan", "yellow")]


def render_correspondence(corr: CorrespondenceMap) -> np.ndarray:
    """Colour every query pixel by the concept its best match came from."""
    colors = np.array(_CONCEPT_COLORS, dtype=np.float32)
    idx = (corr.ref_index - 1) % len(colors)
    return as_tensor(colors[idx].transpose(2, 0, 1))


def write_correspondence(out_dir: Path, layer: int, step: int, corr: CorrespondenceMap) -> list[Path]:
    stem = f"corr_{_tag(layer, step)}"
    fct = out_dir / f"{stem}.fct"
    png = out_dir / f"{stem}.png"
    save_fct1(fct, np.stack([corr.ref_index, corr.position]).astype(np.float32))
    save_rgb_png(png, render_correspondence(corr))
    return [png, fct]


def _relpath(target: str | Path, start: Path) -> str:
    return Path(os.path.relpath(Path(target).resolve(), start.resolve())).as_posix()


def write_run(result: RunResult, model: RunConfigModel, base: Path, out_dir: str | Path) -> Path:
    """Write ``result.png``, diagnostics and ``run_manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    diag_dir = out / DIAG_DIR
    diag_dir.mkdir(parents=True, exist_ok=True)
    written = [out / RESULT_NAME]
    save_rgb_png(written[0], result.image)
    diag = result.diagnostics
    for (layer, step), cap in sorted(diag.captures.items()):
        written += save_capture(diag_dir, cap, step)
    for (layer, step, query), amap in sorted(diag.attention_maps.items()):
        written += write_attention_map(diag_dir, layer, step, query, amap)
    for (layer, step), corr in sorted(diag.correspondences.items()):
        written += write_correspondence(diag_dir, layer, step, corr)

    manifest = model.model_dump(exclude={"content_hashes", "engine"})
    for r in manifest["refs"]:
        r["image"] = _relpath(_resolve(base, r["image"]), out)
        r["mask"] = _relpath(_resolve(base, r["mask"]), out)
    if manifest["weights"] is not None:
        manifest["weights"] = _relpath(_resolve(base, manifest["weights"]), out)
    manifest["output_dir"] = "."
    manifest["content_hashes"] = {p.relative_to(out).as_posix(): _sha256(p) for p in written}
    manifest["engine"] = {
        "version": __version__,
        "parameter_count": parameter_count(UNetConfig(psi=frozenset(model.psi))),
        "cache_entries": diag.cache_entries,
        "cache_reads": sum(diag.cache_reads.values()),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def run_from_file(path: str | Path, seed: int | None = None, psi: list[int] | None = None,
                  mask_mode: str | None = None, out_dir: str | Path | None = None):
    """Load a config, apply CLI overrides, run, and write the output tree."""
    model, base = load_run_config(path)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if psi is not None:
        updates["psi"] = psi
    if mask_mode is not None:
        updates["mask_mode"] = mask_mode
    if updates:
        try:
            model = RunConfigModel.model_validate({**model.model_dump(), **updates})
        except ValidationError as exc:
            raise ConfigError(f"override: {_format_validation(exc)}") from exc
    config = build_pipeline_config(model, base)
    weights = resolve_weights(model, base, config)
    result = run_freecustom(config, weights)
    target = Path(out_dir) if out_dir is not None else Path(config.output_dir)
    manifest = write_run(result, model, base, target)
    return result, manifest
