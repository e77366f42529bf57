import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from freecustom.diffusion import (
    NoiseSchedule,
    ddim_step,
    ddpm_mean,
    ddpm_step,
    forward_diffuse,
    linear_schedule,
    predict_x0,
    respaced,
    sampling_plan,
)
from freecustom.errors import InputError
from freecustom.numerics import PrngStream, gaussian_sample
from support import rand


def test_hand_product():
    s = NoiseSchedule.from_betas([0.1, 0.1])
    assert np.allclose(s.alpha_bar, [0.9, 0.81], atol=1e-12)
    assert np.allclose(linear_schedule(2, 0.1, 0.1).alpha_bar, [0.9, 0.81], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 2000), st.floats(1e-6, 0.5), st.floats(0, 0.49))
def test_alpha_bar_strictly_decreasing(T, lo, extra):
    try:
        s = linear_schedule(T, lo, lo + extra)
    except InputError:
        assume(False)  # alpha_bar underflow is rejected up front
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] == 1 - s.beta[0]


def test_first_variance_is_beta1():
    s = linear_schedule()
    assert s.sigma[0] ** 2 == pytest.approx(s.beta[0], rel=1e-12)


def test_schedule_identities():
    s = linear_schedule()
    assert np.all((s.beta > 0) & (s.beta < 1)) and np.all(np.diff(s.beta) >= 0)
    assert np.max(np.abs(s.alpha - (1 - s.beta))) < 1e-6
    assert np.max(np.abs(s.alpha_bar - np.cumprod(1 - s.beta))) < 1e-6
    for t in range(2, s.T + 1):
        expect = (1 - s.alpha_bar[t - 2]) / (1 - s.alpha_bar[t - 1]) * s.beta[t - 1]
        assert abs(s.sigma[t - 1] ** 2 - expect) < 1e-6


def test_timestep_indexing_is_one_based():
    s = linear_schedule()
    assert s.alpha_bar_at(1) == s.alpha_bar[0]
    assert s.alpha_bar_at(s.T) == s.alpha_bar[-1]
    assert s.alpha_bar_at(0) == 1.0


def test_schedule_is_immutable():
    with pytest.raises(ValueError):
        linear_schedule().beta[0] = 0.5


def test_underflowing_schedule_rejected():
    with pytest.raises(InputError):
        linear_schedule(2000, 0.5, 0.9)


@pytest.mark.parametrize("args", [(1000, 0.0, 0.1), (1000, 0.2, 0.1), (1000, 0.1, 1.0), (0, 0.1, 0.2)])
def test_invalid_schedule(args):
    with pytest.raises(InputError):
        linear_schedule(*args)


def test_forward_noiseless_limit():
    s = NoiseSchedule.from_betas([1e-14])
    z0 = rand((4, 3), 1)
    assert np.allclose(forward_diffuse(z0, 1, rand((4, 3), 2), s), z0, atol=1e-6)


def test_forward_zero_noise():
    s = linear_schedule()
    z0 = rand((4, 3), 3)
    expect = (math.sqrt(s.alpha_bar[499]) * z0.astype(np.float64)).astype(np.float32)
    assert np.array_equal(forward_diffuse(z0, 500, np.zeros_like(z0), s), expect)


def test_forward_hand_value():
    s = NoiseSchedule.from_betas([0.75])  # alpha_bar_1 = 0.25
    out = forward_diffuse(np.ones(1, np.float32), 1, np.ones(1, np.float32), s)
    assert abs(float(out[0]) - 1.36603) < 1e-5


def test_forward_range_checked():
    s = linear_schedule()
    z = np.zeros(2, np.float32)
    for t in (0, 1001):
        with pytest.raises(InputError):
            forward_diffuse(z, t, z, s)


def _scalar_schedule():
    # alpha_2 = 0.99 and alpha_bar_2 = 0.9
    return NoiseSchedule.from_betas([1 - 0.9 / 0.99, 0.01])


def test_ddpm_hand_value():
    s = _scalar_schedule()
    assert s.alpha[1] == pytest.approx(0.99) and s.alpha_bar[1] == pytest.approx(0.9)
    out = ddpm_step(np.ones(1, np.float32), np.full(1, 0.5, np.float32), 2, s, np.zeros(1, np.float32))
    assert abs(float(out[0]) - 0.98911) < 1e-4


def test_ddpm_identity_limit():
    s = NoiseSchedule.from_betas([1e-14])
    z = rand((5,), 4)
    assert np.allclose(ddpm_step(z, np.zeros_like(z), 1, s, None), z, atol=1e-6)


def test_ddpm_mean_matches_scalar_formula():
    s = linear_schedule()
    z, e = rand((64,), 5), rand((64,), 6)
    for t in (2, 10, 500, 1000):
        a, abar = s.alpha[t - 1], s.alpha_bar[t - 1]
        expect = [(1 / math.sqrt(a)) * (float(zi) - (1 - a) / math.sqrt(1 - abar) * float(ei)) for zi, ei in zip(z, e)]
        got = ddpm_step(z, e, t, s, np.zeros_like(z))
        assert np.max(np.abs(got - np.array(expect))) < 1e-5
        assert np.array_equal(got, ddpm_mean(z, e, t, s))


def test_ddpm_noise_ignored_at_t1():
    s = linear_schedule()
    z, e = rand((8,), 7), rand((8,), 8)
    assert np.array_equal(ddpm_step(z, e, 1, s, rand((8,), 9)), ddpm_mean(z, e, 1, s))


def test_ddpm_monte_carlo_std():
    s = linear_schedule()
    t = 600
    noise, _ = gaussian_sample((10_000,), PrngStream(31, 0))
    z = np.full(10_000, 0.4, np.float32)
    out = ddpm_step(z, np.full_like(z, -0.2), t, s, noise).astype(np.float64)
    assert abs(out.std() / s.sigma[t - 1] - 1.0) < 0.03


@pytest.mark.parametrize("t,t_prev", [(700, 300), (1000, 980), (20, 0), (5, 4)])
def test_ddim_lands_on_forward_closed_form(t, t_prev):
    s = linear_schedule()
    z0, eps = rand((4, 8, 8), 10), rand((4, 8, 8), 11)
    zt = forward_diffuse(z0, t, eps, s)
    # storing z_t in float32 costs half an ulp, which x0 recovery magnifies by 1/sqrt(alpha_bar)
    bound = max(1e-5, float(np.spacing(np.abs(zt).max())) / math.sqrt(s.alpha_bar_at(t)))
    assert np.max(np.abs(predict_x0(zt, eps, t, s) - z0)) < bound
    expect = z0 if t_prev == 0 else forward_diffuse(z0, t_prev, eps, s)
    assert np.max(np.abs(ddim_step(zt, eps, t, t_prev, s) - expect)) < bound


def test_ddim_final_step_returns_x0():
    s = linear_schedule()
    z, e = rand((6,), 12), rand((6,), 13)
    assert np.array_equal(ddim_step(z, e, 20, 0, s), predict_x0(z, e, 20, s))


def test_ddim_deterministic_and_ordered():
    s = linear_schedule()
    z, e = rand((6,), 14), rand((6,), 15)
    assert ddim_step(z, e, 50, 30, s).tobytes() == ddim_step(z, e, 50, 30, s).tobytes()
    with pytest.raises(InputError):
        ddim_step(z, e, 30, 30, s)


def test_sampling_plan():
    plan = sampling_plan(1000, 50)
    assert plan[0] == 1000 and plan[-1] == 0 and len(plan) == 51
    assert all(a > b for a, b in zip(plan, plan[1:]))
    assert sampling_plan(1000, 16)[-2] > 0


def test_respaced_keeps_alpha_bar():
    s = linear_schedule()
    ts = sorted(sampling_plan(1000, 10)[:-1])
    r = respaced(s, ts)
    assert np.allclose(r.alpha_bar, [s.alpha_bar_at(t) for t in ts], rtol=1e-12)
