"""Embedded invariant checks run by ``freecustom selftest``."""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .attention import (
    AttentionInputs,
    KVRecord,
    WeightedMask,
    build_weighted_mask,
    concat_reference_kv,
    mrsa,
    self_attention,
)
from .codec import decode_latent, embed_prompt, encode_image
from .concepts import default_scene_specs, make_concept, synth_scene
from .denoiser import (
    KVCache,
    UNetConfig,
    forward_compose,
    forward_reference,
    forward_vanilla,
    init_weights,
    load_weights,
    save_weights,
)
from .diffusion import ddim_step, ddpm_step, forward_diffuse, linear_schedule
from .numerics import PrngStream, gaussian_sample, matmul, nn_resize, row_softmax
from .pipeline import composition_masks

Check = Callable[[], None]


def _rand(shape, stream_id, seed=2024):
    x, _ = gaussian_sample(shape, PrngStream(seed, stream_id))
    return x


def _naive_attention(q, k, v, mask):
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [mask[j] * sum(q[i, c] * k[j, c] for c in range(q.shape[1])) / math.sqrt(q.shape[1])
                  for j in range(k.shape[0])]
        m = max(logits)
        w = [math.exp(s - m) for s in logits]
        z = sum(w)
        for j in range(k.shape[0]):
            out[i] += (w[j] / z) * v[j]
    return out


def check_softmax_rows() -> None:
    p = row_softmax(_rand((20, 33), 1) * 30)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1, atol=1e-5)
    assert np.allclose(row_softmax(np.array([[1000.0, 1000.0, 1000.0]])), 1 / 3, atol=1e-6)


def check_matmul_oracle() -> None:
    a, b = _rand((7, 5), 2), _rand((5, 3), 3)
    naive = [[sum(float(a[i, k]) * float(b[k, j]) for k in range(5)) for j in range(3)] for i in range(7)]
    assert np.max(np.abs(matmul(a, b) - np.array(naive))) < 1e-6


def check_resize_binary() -> None:
    m = (_rand((16, 16), 4) > 0).astype(np.float32)
    for r in (8, 4):
        assert set(np.unique(nn_resize(m, r, r))) <= {0.0, 1.0}


def check_prng_determinism() -> None:
    a, _ = gaussian_sample((64,), PrngStream(5, 9))
    b, _ = gaussian_sample((64,), PrngStream(5, 9))
    c, _ = gaussian_sample((64,), PrngStream(5, 10))
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def check_codec_roundtrip() -> None:
    img, _ = synth_scene(default_scene_specs()["composite"])
    rec = decode_latent(encode_image(img))
    assert np.abs(rec - img).mean() < 0.05
    assert rec.min() >= 0 and rec.max() <= 1


def check_prompt_determinism() -> None:
    assert np.array_equal(embed_prompt("a hat").tokens, embed_prompt("a hat").tokens)


def check_self_attention_oracle() -> None:
    q, k, v = _rand((8, 4), 5), _rand((8, 4), 6), _rand((8, 4), 7)
    ref = _naive_attention(q, k, v, np.ones(8))
    assert np.max(np.abs(self_attention(AttentionInputs(q, k, v)) - ref)) < 1e-5


def check_mrsa_oracle() -> None:
    q, k, v = _rand((6, 8), 8), _rand((24, 8), 9), _rand((24, 8), 10)
    masks = [(_rand((8,), 11 + i) > 0).astype(np.float32) for i in range(2)]
    wm = build_weighted_mask(masks, [3.0, 2.0], 8)
    ref = _naive_attention(q, k, v, wm.values)
    assert np.max(np.abs(mrsa(AttentionInputs(q, k, v), wm) - ref)) < 1e-5


def check_reduction_chain() -> None:
    q, k, v = _rand((16, 8), 20), _rand((16, 8), 21), _rand((16, 8), 22)
    refs = [KVRecord(0, 0, i + 1, _rand((16, 8), 23 + i), _rand((16, 8), 26 + i)) for i in range(2)]
    kk, vv, _ = concat_reference_kv(k, v, refs)
    masks = [(_rand((16,), 30 + i) > 0).astype(np.float32) for i in range(2)]
    inp = AttentionInputs(q, kk, vv)
    eq4 = mrsa(inp, build_weighted_mask(masks, [1.0, 1.0], 16))
    binary = np.concatenate([np.ones(16, np.float32)] + masks)
    eq3 = mrsa(inp, WeightedMask(binary, (0, 16, 32, 48), binary))
    assert np.max(np.abs(eq4 - eq3)) < 1e-6
    ones = [np.ones(16, np.float32)] * 2
    eq2 = mrsa(inp, build_weighted_mask(ones, [1.0, 1.0], 16))
    naive2 = _naive_attention(q, kk, vv, np.ones(48))
    assert np.max(np.abs(eq2 - naive2)) < 1e-5
    eq1 = mrsa(AttentionInputs(q, k, v), WeightedMask.ones(16))
    assert np.array_equal(eq1, self_attention(AttentionInputs(q, k, v)))


def check_permutation_invariance() -> None:
    q, self_k, self_v = _rand((10, 8), 40), _rand((10, 8), 50), _rand((10, 8), 51)
    ks = [_rand((12, 8), 41 + i) for i in range(3)]
    vs = [_rand((12, 8), 44 + i) for i in range(3)]
    ms = [(_rand((12,), 47 + i) > 0).astype(np.float32) for i in range(3)]
    ws = [3.0, 2.0, 2.5]

    def run(order):
        recs = [KVRecord(0, 0, j + 1, ks[i], vs[i]) for j, i in enumerate(order)]
        kk, vv, _ = concat_reference_kv(self_k, self_v, recs)
        wm = build_weighted_mask([ms[i] for i in order], [ws[i] for i in order], 10)
        return mrsa(AttentionInputs(q, kk, vv), wm)

    assert np.max(np.abs(run([0, 1, 2]) - run([2, 0, 1]))) < 1e-6


def check_schedule_identities() -> None:
    s = linear_schedule()
    assert np.allclose(s.alpha, 1 - s.beta, atol=1e-6)
    assert np.allclose(s.alpha_bar, np.cumprod(s.alpha), atol=1e-6)
    prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    assert np.allclose(s.sigma[1:] ** 2, ((1 - prev) / (1 - s.alpha_bar) * s.beta)[1:], atol=1e-6)


def check_ddim_roundtrip() -> None:
    s = linear_schedule()
    z0, eps = _rand((4, 8, 8), 60), _rand((4, 8, 8), 61)
    zt = forward_diffuse(z0, 700, eps, s)
    assert np.max(np.abs(ddim_step(zt, eps, 700, 0, s) - z0)) < 1e-4


def check_ddpm_mean() -> None:
    s = linear_schedule()
    t = 500
    a, abar = float(s.alpha[t - 1]), float(s.alpha_bar[t - 1])
    z, e = 1.0, 0.5
    expect = (z - (1 - a) / math.sqrt(1 - abar) * e) / math.sqrt(a)
    got = ddpm_step(np.array([z], np.float32), np.array([e], np.float32), t, s, np.zeros(1, np.float32))
    assert abs(float(got[0]) - expect) < 1e-5


def _fixture():
    cfg = UNetConfig()
    w = init_weights(0, cfg)
    z = _rand((4, 16, 16), 70)
    return cfg, w, z, embed_prompt("a cat wearing a hat")


def check_denoiser_determinism() -> None:
    cfg, w, z, p = _fixture()
    a = forward_vanilla(z, 500, p, w, cfg)
    b = forward_vanilla(z, 500, p, init_weights(0, cfg), cfg)
    assert np.array_equal(a, b) and np.all(np.isfinite(a))


def check_compose_reduction() -> None:
    cfg, w, z, p = _fixture()
    vanilla = forward_vanilla(z, 400, p, w, cfg)
    assert np.array_equal(forward_compose(z, 400, p, KVCache(0), 1, None, w, cfg), vanilla)
    assert np.array_equal(forward_compose(z, 400, p, None, 1, None, w, cfg.with_psi(())), vanilla)


def check_psi_cache_reads() -> None:
    cfg, w, z, p = _fixture()
    img, masks = synth_scene(default_scene_specs()["hat"])
    ref = make_concept(img, masks["hat"], "a red hat", "hat")
    cache = KVCache(1)
    for rec in forward_reference(ref.latent.tensor, 300, ref.prompt, w, cfg, ref_index=1):
        cache.put(1, rec)
    forward_compose(z, 300, p, cache, 1, composition_masks([ref], cfg), w, cfg)
    read_layers = {layer for _, layer, _ in cache.reads}
    assert read_layers == {a.global_layer for a in cfg.psi_layers()} == set(range(10, 16))
    assert sum(cache.reads.values()) == 6


def make_weights_check(path: Path | None) -> Check:
    def check_weights_integrity() -> None:
        if path is None:
            bundle = init_weights(0, UNetConfig())
            with tempfile.TemporaryDirectory() as tmp:
                p = Path(tmp) / "weights.fctc"
                save_weights(p, bundle)
                assert load_weights(p).equals(bundle)
        else:
            loaded = load_weights(path)
            assert loaded.equals(init_weights(loaded.init_seed, loaded.config)), "weights differ from their seed"

    return check_weights_integrity


def all_checks(weights_path: Path | None = None) -> list[tuple[str, Check]]:
    checks = [
        check_softmax_rows, check_matmul_oracle, check_resize_binary, check_prng_determinism,
        check_codec_roundtrip, check_prompt_determinism, check_self_attention_oracle, check_mrsa_oracle,
        check_reduction_chain, check_permutation_invariance, check_schedule_identities, check_ddim_roundtrip,
        check_ddpm_mean, check_denoiser_determinism, check_compose_reduction, check_psi_cache_reads,
        make_weights_check(weights_path),
    ]
    return [(c.__name__.removeprefix("check_"), c) for c in checks]


def run_selftest(weights_path: Path | None = None, echo=print) -> bool:
    ok = True
    for name, check in all_checks(weights_path):
        t0 = time.perf_counter()
        try:
            check()
            status, detail = "PASS", ""
        except Exception as exc:  # a failing check must not stop the report
            ok = False
            status, detail = "FAIL", f"  {type(exc).__name__}: {exc}"
        echo(f"{status}  {name:<24} {time.perf_counter() - t0:6.2f}s{detail}")
    echo("selftest: " + ("all checks passed" if ok else "FAILED"))
    return ok
