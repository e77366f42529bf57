"""Command-line entry point.

Exit codes: 0 success, 1 self-test failure, 2 input or config error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attention import attention_row
from .codec import load_mask_png, load_rgb_png, save_gray_png, save_mask_png, save_rgb_png
from .concepts import SceneSpec, copy_paste_context, default_scene_specs, synth_scene
from .errors import ConfigError, FreeCustomError, InputError, SpecError
from .numerics import PrngStream, save_fct1
from .pipeline import capture_attention_map, query_index
from .runio import attention_map_paths, load_capture, run_from_file
from .selftest import run_selftest

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("freecustom")


def _int_pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}") from None
    return a, b


def _int_list(text: str) -> list[int]:
    if not text.strip():
        return []
    try:
        return [int(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_generate(args) -> int:
    result, manifest = run_from_file(args.config, seed=args.seed, psi=args.psi, mask_mode=args.mask_mode, out_dir=args.out)
    out = manifest.parent
    print(f"wrote {out / 'result.png'} ({result.diagnostics.cache_entries} cache entries)")
    return EXIT_OK


def cmd_make_context(args) -> int:
    try:
        base = load_rgb_png(args.base)
        base_mask = load_mask_png(args.base_mask)
        concept = load_rgb_png(args.concept)
        concept_mask = load_mask_png(args.concept_mask)
    except OSError as exc:
        raise InputError(f"cannot read input image: {exc}") from exc
    image, mask = copy_paste_context(base, base_mask, concept, concept_mask, args.offset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_rgb_png(out / "context.png", image)
    save_mask_png(out / "context_mask.png", mask)
    print(f"wrote {out / 'context.png'} and {out / 'context_mask.png'}")
    return EXIT_OK


def cmd_inspect_attn(args) -> int:
    cap = load_capture(args.run, args.layer, args.step)
    idx = query_index(args.query, cap.resolution)
    row = attention_row(cap.q, cap.k, cap.mask, idx, cap.mode)
    total = float(row.astype(np.float64).sum())
    if abs(total - 1.0) > 1e-5:
        log.error("attention row sums to %.7f", total)
        return EXIT_RUNTIME
    amap = capture_attention_map(cap, args.query)
    out = Path(args.out) if args.out else Path(args.run) / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    png, fct = attention_map_paths(out, args.layer, args.step, args.query)
    save_fct1(fct, amap)
    save_gray_png(png, amap)
    print(f"wrote {png} ({amap.shape[0]}x{amap.shape[1]}, row sum {total:.6f})")
    return EXIT_OK


FIXTURE_CONCEPTS = (
    ("subject", "cat", "a blue cat"),
    ("hat", "hat", "a red hat"),
    ("glasses", "glasses", "magenta sunglasses"),
)


def write_fixture(out: Path, steps: int = 50, seed: int = 0) -> Path:
    """Write the three-concept synthetic fixture and a ready-to-run config."""
    specs = default_scene_specs()
    refs = []
    for scene, concept, prompt in FIXTURE_CONCEPTS:
        image, masks = synth_scene(specs[scene])
        save_rgb_png(out / f"{scene}.png", image)
        save_mask_png(out / f"{scene}_mask.png", masks[concept])
        refs.append({"image": f"{scene}.png", "mask": f"{scene}_mask.png", "weight": 3.0, "prompt": prompt, "name": concept})
    config = {
        "seed": seed,
        "steps": steps,
        "sampler": "ddim",
        "mask_mode": "multiplicative",
        "ref_noise_policy": "fresh_per_step",
        "psi": [5, 6],
        "target_prompt": "a cat wearing a hat and sunglasses",
        "refs": refs,
        "diagnostics": {
            "attention_maps": [{"layer": 15, "step": steps, "query": [4, 8]}],
            "correspondence": [{"layer": 10, "step": steps}],
        },
        "output_dir": "run",
    }
    path = out / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.fixture:
        path = write_fixture(out, args.steps, args.seed)
        print(f"wrote fixture config {path}")
        return EXIT_OK
    if args.spec:
        spec = SceneSpec.from_json(args.spec)
    else:
        presets = default_scene_specs()
        if args.preset not in presets:
            raise SpecError(f"unknown preset {args.preset!r}; choose from {sorted(presets)}")
        spec = presets[args.preset]
    image, masks = synth_scene(spec, PrngStream(args.seed, 0))
    save_rgb_png(out / "image.png", image)
    for name, m in masks.items():
        save_mask_png(out / f"mask_{name}.png", m)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"wrote {out / 'image.png'} and {len(masks)} masks")
    return EXIT_OK


def cmd_selftest(args) -> int:
    weights = Path(args.weights) if args.weights else None
    return EXIT_OK if run_selftest(weights) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="freecustom", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run multi-concept composition from a JSON config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="output directory (default: config output_dir)")
    g.add_argument("--seed", type=int)
    g.add_argument("--psi", type=_int_list, help="comma-separated MRSA blocks, e.g. 5,6")
    g.add_argument("--mask-mode", choices=["multiplicative", "neg_inf"])
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("make-context", help="paste a concept onto a base image")
    c.add_argument("--base", required=True)
    c.add_argument("--base-mask", required=True)
    c.add_argument("--concept", required=True)
    c.add_argument("--concept-mask", required=True)
    c.add_argument("--offset", type=_int_pair, default=(0, 0), help="dx,dy")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_make_context)

    a = sub.add_parser("inspect-attn", help="export a multi-attention map from a run directory")
    a.add_argument("--run", required=True)
    a.add_argument("--layer", type=int, required=True)
    a.add_argument("--step", type=int, required=True)
    a.add_argument("--query", type=_int_pair, required=True, help="row,col")
    a.add_argument("--out")
    a.set_defaults(func=cmd_inspect_attn)

    s = sub.add_parser("synth", help="render synthetic scenes and masks")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="scene spec JSON")
    s.add_argument("--preset", default="composite")
    s.add_argument("--fixture", action="store_true", help="write the 3-concept fixture with config.json")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("selftest", help="run the embedded invariant checks")
    t.add_argument("--weights", help="weight container to verify")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FreeCustomError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
