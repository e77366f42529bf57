"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from freecustom.cli import FIXTURE_CONCEPTS
from freecustom.concepts import default_scene_specs, make_concept, synth_scene
from freecustom.numerics import PrngStream, gaussian_sample

GOLDEN = Path(__file__).parent / "golden"
TARGET_PROMPT = "a cat wearing a hat and sunglasses"


def rand(shape, stream_id, seed=99):
    x, _ = gaussian_sample(shape, PrngStream(seed, stream_id))
    return x


def fixture_refs(weight=3.0, which=(0, 1, 2)):
    specs = default_scene_specs()
    refs = []
    for i in which:
        scene, concept, prompt = FIXTURE_CONCEPTS[i]
        img, masks = synth_scene(specs[scene])
        refs.append(make_concept(img, masks[concept], prompt, concept, weight=weight))
    return refs


def naive_attention(q, k, v, mask=None, neg_inf=False):
    """Per-element float64 attention with explicit exp/normalize loops."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    lq, d = q.shape
    lk = k.shape[0]
    mask = np.ones(lk) if mask is None else np.asarray(mask, dtype=np.float64)
    out = np.zeros((lq, v.shape[1]))
    for i in range(lq):
        logits = []
        for j in range(lk):
            if neg_inf and mask[j] == 0:
                logits.append(-math.inf)
                continue
            s = math.fsum(float(q[i, c]) * float(k[j, c]) for c in range(d))
            logits.append(mask[j] * s / math.sqrt(d))
        m = max(logits)
        w = [math.exp(x - m) if x != -math.inf else 0.0 for x in logits]
        z = math.fsum(w)
        for j in range(lk):
            if w[j]:
                out[i] += (w[j] / z) * v[j]
    return out


def brute_correspondence(q, keys_per_ref, masks):
    """Argmax of cosine similarity by explicit loops; ties keep the first hit."""
    q = np.asarray(q, dtype=np.float64)
    d = q.shape[1]
    result = []
    for i in range(q.shape[0]):
        qi = q[i]
        qn = math.sqrt(float(qi @ qi))
        best, arg = -math.inf, None
        for r, (k, m) in enumerate(zip(keys_per_ref, masks)):
            k = np.asarray(k, dtype=np.float64)
            flat = np.asarray(m).reshape(-1)
            for j in range(k.shape[0]):
                if flat[j] <= 0:
                    continue
                kj = k[j]
                sim = float(qi @ kj) / (qn * math.sqrt(float(kj @ kj))) / math.sqrt(d)
                if sim > best:
                    best, arg = sim, (r + 1, j)
        result.append(arg)
    return result


def brute_mass(q, k, weights_per_key, concept_keys, neg_inf=False):
    """Mean over query rows of the softmax mass on ``concept_keys``, by explicit loops.

    ``weights_per_key`` is the per-key logit scale; zero entries become -inf
    when ``neg_inf`` is set.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    w = np.asarray(weights_per_key, dtype=np.float64)
    d = q.shape[1]
    chosen = set(int(j) for j in concept_keys)
    total = []
    for i in range(q.shape[0]):
        logits = []
        for j in range(k.shape[0]):
            if neg_inf and w[j] == 0:
                logits.append(-math.inf)
            else:
                logits.append(w[j] * math.fsum(q[i] * k[j]) / math.sqrt(d))
        m = max(logits)
        e = [math.exp(x - m) if x != -math.inf else 0.0 for x in logits]
        z = math.fsum(e)
        total.append(math.fsum(e[j] for j in chosen) / z)
    return math.fsum(total) / len(total)


# weighted-mask scenario shared by the acceptance suite and the golden generator
MASS_SEED = 0
MASS_STEPS = 16
MASS_LAYER = 15


def mass_capture(weight, weights=None):
    """Run the 3-concept fixture and return the layer-15 capture at the final step."""
    from freecustom.pipeline import PipelineConfig, run_freecustom

    cfg = PipelineConfig(refs=fixture_refs(weight=weight), target_prompt=TARGET_PROMPT, steps=MASS_STEPS,
                         seed=MASS_SEED, capture=((MASS_LAYER, MASS_STEPS),))
    return run_freecustom(cfg, weights).diagnostics.captures[(MASS_LAYER, MASS_STEPS)]


def brute_capture_mass(cap, concept_index):
    """Oracle mass with every query of the final feature map as the region."""
    seg = cap.mask.segment(concept_index)
    keys = [j for j in range(seg.start, seg.stop) if cap.mask.support[j] > 0]
    return brute_mass(cap.q, cap.k, cap.mask.values, keys, neg_inf=False)
