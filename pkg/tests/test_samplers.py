import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowinv.fields import (DDIM, EULER, HEUN, AnalyticGaussianField, ConstantField, DDIMAnalyticPredictor,
                            TimeOnlyField, ZeroField, make_step_rule)
from flowinv.samplers import (AT_PREV, AT_TARGET, FORWARD, INVERSE, replay_forward, roundtrip_error, sample,
                              vanilla_invert)
from flowinv.tensor_core import NonFiniteError, TimeGrid, uniform_grid


def test_zero_field_sampling_is_constant(rng):
    z = rng.standard_normal((2, 3, 3))
    traj = sample(make_step_rule(EULER, ZeroField(), uniform_grid(6)), z)
    for x in traj.latents:
        np.testing.assert_array_equal(x, z)


def test_constant_field_single_step():
    v = np.zeros((3, 1, 1))
    v[0] = 1.0
    z1 = np.array([2.0, 5.0, -1.0]).reshape(3, 1, 1)
    traj = sample(make_step_rule(EULER, ConstantField(v), TimeGrid((0.0, 1.0), 1)), z1)
    np.testing.assert_array_equal(traj.end.ravel(), [1.0, 5.0, -1.0])


def test_fine_euler_lands_near_flow_map_preimage():
    # z(1) = z(0) for the unit Gaussian field; 512-step Euler error measured at 2.5e-3
    traj = sample(make_step_rule(EULER, AnalyticGaussianField(0.0, 1.0), uniform_grid(512)), np.ones((1, 1, 1)))
    assert abs(traj.end.item() - 1.0) < 5e-3


def test_trajectory_records_grid(rng):
    grid = uniform_grid(5)
    rule = make_step_rule(EULER, AnalyticGaussianField(), grid)
    fwd = sample(rule, rng.standard_normal((1, 2, 2)))
    assert fwd.kind == FORWARD
    assert fwd.times == list(reversed(grid.times))
    inv = vanilla_invert(rule, fwd.end)
    assert inv.kind == INVERSE
    assert inv.times == list(grid.times)
    assert inv.start is inv.latents[0] and inv.at(grid[3]) is inv.latents[3]


@pytest.mark.parametrize("kind, per", [(EULER, 1), (HEUN, 2)])
def test_sample_nfe(kind, per):
    rule = make_step_rule(kind, AnalyticGaussianField(), uniform_grid(7))
    assert sample(rule, np.ones((1, 1, 1))).nfe == 7 * per


def test_time_only_at_target_is_exact(rng):
    field = TimeOnlyField(lambda t: np.cos(3 * t) + t * t)
    rule = make_step_rule(EULER, field, uniform_grid(9))
    z0 = rng.standard_normal((2, 2, 2))
    inv = vanilla_invert(rule, z0, mode=AT_TARGET)
    np.testing.assert_allclose(sample(rule, inv.end).end, z0, atol=1e-12)


@pytest.mark.parametrize("mode", [AT_PREV, AT_TARGET])
def test_zero_field_inversion_is_identity(mode, rng):
    z0 = rng.standard_normal((1, 3, 3))
    inv = vanilla_invert(make_step_rule(EULER, ZeroField(), uniform_grid(4)), z0, mode=mode)
    for x in inv.latents:
        np.testing.assert_array_equal(x, z0)


def test_unknown_mode():
    with pytest.raises(ValueError):
        vanilla_invert(make_step_rule(EULER, ZeroField(), uniform_grid(2)), np.zeros((1, 1, 1)), mode="sideways")


def test_zero_coefficient_rejected():
    rule = make_step_rule(EULER, ZeroField(), uniform_grid(2))
    rule.a = np.array([1.0, 0.0])
    with pytest.raises(ValueError):
        vanilla_invert(rule, np.zeros((1, 1, 1)))


def test_non_finite_reports_step():
    field = TimeOnlyField(lambda t: np.inf if t < 0.5 else 0.0)
    with pytest.raises(NonFiniteError) as exc:
        sample(make_step_rule(EULER, field, uniform_grid(4)), np.zeros((1, 1, 1)))
    assert exc.value.step == 1  # only t = 0.25 (interval 1) hits the blow-up


def _seeded_starts(field, n, shape=(1, 4, 4), seed=0):
    rng = np.random.default_rng(seed)
    return [field.sample_data(rng, shape) for _ in range(n)]


def test_at_prev_worse_than_at_target_n32():
    field = AnalyticGaussianField(0.0, 1.0)
    rule = make_step_rule(EULER, field, uniform_grid(32))
    zs = _seeded_starts(field, 100)
    prev = np.mean([roundtrip_error(rule, z, None, AT_PREV) for z in zs])
    tgt = np.mean([roundtrip_error(rule, z, None, AT_TARGET) for z in zs])
    assert prev > tgt


@pytest.mark.parametrize("mu0, sigma0", [(0.0, 1.0), (0.3, 0.5)])
def test_global_error_orders(mu0, sigma0):
    # measured 16 -> 32 ratios: at_prev 3.7, uni_inv 62 (sigma 1) and 23 (sigma 0.5)
    field = AnalyticGaussianField(mu0, sigma0)
    zs = _seeded_starts(field, 100)

    def err(n, inverter):
        rule = make_step_rule(EULER, field, uniform_grid(n))
        return np.mean([roundtrip_error(rule, z, None, inverter) for z in zs])

    r_prev = err(16, AT_PREV) / err(32, AT_PREV)
    r_uni = err(16, "uni_inv") / err(32, "uni_inv")
    assert 3.0 < r_prev < 5.0
    assert r_uni > 12.0


@given(st.sampled_from([EULER, HEUN, DDIM]), st.integers(1, 10), st.integers(0, 2 ** 31))
def test_replaying_recorded_directions_is_exact(kind, n, seed):
    rng = np.random.default_rng(seed)
    field = DDIMAnalyticPredictor() if kind == DDIM else AnalyticGaussianField(-0.2, 1.3)
    rule = make_step_rule(kind, field, uniform_grid(n))
    z0 = rng.standard_normal((1, 3, 3))
    inv = vanilla_invert(rule, z0, mode=AT_PREV)
    np.testing.assert_allclose(replay_forward(rule, inv), z0, rtol=1e-12, atol=1e-12)


def test_forward_then_cached_inverse_is_exact(rng):
    rule = make_step_rule(HEUN, AnalyticGaussianField(0.1, 0.8), uniform_grid(12))
    z1 = rng.standard_normal((2, 3, 3))
    fwd = sample(rule, z1)
    z = fwd.end
    for k, i in enumerate(range(1, 13)):
        z = rule.invert_step(z, i, fwd.directions[len(fwd.directions) - 1 - k])
    np.testing.assert_allclose(z, z1, rtol=1e-12, atol=1e-12)
