import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowinv.fields import (DDIM, EULER, HEUN, AnalyticGaussianField, DDIMAnalyticPredictor, TimeOnlyField,
                            ZeroField, make_step_rule)
from flowinv.samplers import AT_PREV, AT_TARGET, replay_forward, roundtrip_error, sample
from flowinv.tensor_core import TimeGrid, uniform_grid
from flowinv.uni_inv import (UNI_INV, fit_slope, get_inverter, local_error_study, octave_dts, reconstruct,
                             uni_inv)

DTS = octave_dts(2.0 ** -8, 2.0 ** -3)


def exact_state(field, t, z=1.0):
    return field.flow_map(np.full((1, 1, 1), z), t)


@given(st.integers(1, 40), st.integers(0, 2 ** 31))
def test_time_only_field_is_inverted_exactly(n, seed):
    rng = np.random.default_rng(seed)
    field = TimeOnlyField(lambda t: np.sin(4 * t) - 2 * t)
    rule = make_step_rule(EULER, field, uniform_grid(n))
    z0 = rng.standard_normal((2, 3, 3))
    back = sample(rule, uni_inv(rule, z0).end).end
    assert np.max(np.abs(back - z0)) <= 1e-12


def test_zero_field_is_identity(rng):
    z0 = rng.standard_normal((3, 4, 4))
    inv = uni_inv(make_step_rule(EULER, ZeroField(), uniform_grid(10)), z0)
    for x in inv.latents:
        np.testing.assert_array_equal(x, z0)


@pytest.mark.parametrize("kind, n, nfe", [(EULER, 1, 2), (EULER, 50, 51), (HEUN, 25, 52), (DDIM, 20, 21)])
def test_nfe_accounting(kind, n, nfe):
    field = DDIMAnalyticPredictor() if kind == DDIM else AnalyticGaussianField()
    assert uni_inv(make_step_rule(kind, field, uniform_grid(n)), np.ones((1, 2, 2))).nfe == nfe


def test_beats_both_vanilla_modes_on_seeded_starts():
    field = AnalyticGaussianField(0.0, 1.0)
    rule = make_step_rule(EULER, field, uniform_grid(32))
    rng = np.random.default_rng(0)
    wins = 0
    for _ in range(100):
        z = field.sample_data(rng, (1, 4, 4))
        e = {m: roundtrip_error(rule, z, None, m) for m in (UNI_INV, AT_PREV, AT_TARGET)}
        wins += e[UNI_INV] < min(e[AT_PREV], e[AT_TARGET])
    assert wins >= 95


def test_local_error_slopes_euler():
    field = AnalyticGaussianField(0.0, 1.0)
    z = exact_state(field, 0.75)
    uni = local_error_study(EULER, field, z, DTS, method=UNI_INV)
    prev = local_error_study(EULER, field, z, DTS, method=AT_PREV)
    assert 2.7 <= uni.slope <= 3.3
    assert 1.7 <= prev.slope <= 2.3
    assert not uni.exact and not prev.exact


@pytest.mark.parametrize("kind", [EULER, HEUN])
@pytest.mark.parametrize("mu0, sigma0, z", [(0.0, 1.0, 1.0), (0.3, 0.5, -0.8), (-1.0, 2.0, 0.4)])
def test_local_error_order_separation(kind, mu0, sigma0, z):
    field = AnalyticGaussianField(mu0, sigma0)
    start = exact_state(field, 0.75, z)
    uni = local_error_study(kind, field, start, DTS, method=UNI_INV)
    prev = local_error_study(kind, field, start, DTS, method=AT_PREV)
    assert uni.slope - prev.slope >= 0.4


def test_time_only_study_is_flagged_exact():
    field = TimeOnlyField(lambda t: t ** 3 - t)
    s = local_error_study(EULER, field, np.full((1, 1, 1), 0.4), DTS, method=UNI_INV)
    assert s.exact and s.slope is None
    assert max(s.errors) < 1e-14


def test_study_validation():
    field = AnalyticGaussianField()
    with pytest.raises(ValueError):
        local_error_study(EULER, field, np.ones((1, 1, 1)), [0.1, 0.05])
    with pytest.raises(ValueError):
        local_error_study(EULER, field, np.ones((1, 1, 1)), DTS, method="newton")
    with pytest.raises(ValueError):
        local_error_study(EULER, field, np.ones((1, 1, 1)), [1.0, 0.5, 0.25], t_i=0.75)


def test_octave_dts():
    assert octave_dts(2.0 ** -8, 2.0 ** -3) == [2.0 ** -k for k in range(3, 9)]
    with pytest.raises(ValueError):
        octave_dts(0.5, 0.1)


def test_fit_slope_on_power_law():
    dts = np.array(DTS)
    assert fit_slope(dts, 7.0 * dts ** 3) == pytest.approx(3.0, abs=1e-12)


@pytest.mark.parametrize("dt", [2.0 ** -3, 2.0 ** -5, 2.0 ** -7])
def test_linear_field_one_step_error_identity(dt):
    """For v(z, t) = a(t) z + c(t) the one-step error is exactly
    |dt| * |a(t_i)| * |z_bar - z_i|, with z_bar the corrected estimate."""
    mu0, sigma0, t_i = 0.2, 0.6, 0.75
    field = AnalyticGaussianField(mu0, sigma0)
    grid = TimeGrid((0.0, t_i - dt, t_i), 0)
    rule = make_step_rule(EULER, field, grid)
    z_i = exact_state(field, t_i, 0.9)
    z_prev = rule.step(z_i, 2, field.eval(z_i, t_i))
    z_bar = rule.invert_step(z_prev, 2, field.eval(z_prev, t_i - dt))
    z_hat = rule.invert_step(z_prev, 2, field.eval(z_bar, t_i))
    slope_a = field.eval(np.ones((1, 1, 1)), t_i).item() - field.eval(np.zeros((1, 1, 1)), t_i).item()
    want = dt * abs(slope_a) * abs((z_bar - z_i).item())
    assert abs((z_hat - z_i).item()) == pytest.approx(want, rel=1e-8)
    # the corrected estimate is itself second-order close
    assert abs((z_bar - z_i).item()) < 2.0 * dt * dt


@given(st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_shift_equivariance(delta, seed):
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((2, 3, 3))
    base = uni_inv(make_step_rule(EULER, AnalyticGaussianField(0.1, 0.8), uniform_grid(12)), z0).end
    shifted = uni_inv(make_step_rule(EULER, AnalyticGaussianField(0.1 + delta, 0.8), uniform_grid(12)),
                      z0 + delta).end
    # at t = 1 the shifted field's trajectory has forgotten the shift in the data mean
    np.testing.assert_allclose(shifted, base, atol=1e-12)


@given(st.floats(-3, 3), st.integers(0, 2 ** 31), st.integers(1, 11))
def test_shift_equivariance_along_trajectory(delta, seed, k):
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal((1, 2, 2))
    grid = uniform_grid(12)
    a = uni_inv(make_step_rule(EULER, AnalyticGaussianField(0.0, 0.8), grid), z0)
    b = uni_inv(make_step_rule(EULER, AnalyticGaussianField(delta, 0.8), grid), z0 + delta)
    # an exact shift by delta at t = 0 becomes a shift by (1 - t) delta at time t
    np.testing.assert_allclose(b.latents[k], a.latents[k] + (1 - grid[k]) * delta, atol=1e-11)


@given(st.sampled_from([EULER, HEUN, DDIM]), st.integers(1, 16), st.integers(0, 2 ** 31))
def test_replay_reproduces_start(kind, n, seed):
    rng = np.random.default_rng(seed)
    field = DDIMAnalyticPredictor(0.7) if kind == DDIM else AnalyticGaussianField(0.3, 0.7)
    rule = make_step_rule(kind, field, uniform_grid(n))
    z0 = rng.standard_normal((1, 3, 3))
    np.testing.assert_allclose(replay_forward(rule, uni_inv(rule, z0)), z0, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("n", [8, 16, 32])
def test_heun_variant_beats_plain_heun(n):
    field = AnalyticGaussianField(0.0, 1.0)
    rule = make_step_rule(HEUN, field, uniform_grid(n))
    rng = np.random.default_rng(n)
    zs = [field.sample_data(rng, (1, 4, 4)) for _ in range(20)]
    assert np.mean([roundtrip_error(rule, z, None, UNI_INV) for z in zs]) < \
        np.mean([roundtrip_error(rule, z, None, AT_PREV) for z in zs])


@pytest.mark.parametrize("n", [10, 20, 50])
@pytest.mark.parametrize("sigma0", [0.5, 1.0, 2.0])
def test_ddim_variant_beats_vanilla_ddim(n, sigma0):
    pred = DDIMAnalyticPredictor(sigma0)
    rule = make_step_rule(DDIM, pred, uniform_grid(n))
    rng = np.random.default_rng(n)
    zs = [pred.sample_data(rng, (1, 4, 4)) for _ in range(20)]
    assert np.mean([roundtrip_error(rule, z, None, UNI_INV) for z in zs]) < \
        np.mean([roundtrip_error(rule, z, None, AT_PREV) for z in zs])


def test_reconstruct_metrics(rng):
    rule = make_step_rule(EULER, AnalyticGaussianField(0.5, 0.2), uniform_grid(20))
    z0 = 0.5 + 0.2 * rng.standard_normal((3, 8, 8))
    z_hat, met = reconstruct(rule, z0)
    assert z_hat.shape == z0.shape
    assert met["nfe_inv"] == 21 and met["nfe"] == 41
    assert met["mse"] == pytest.approx(np.mean((z_hat - z0) ** 2), rel=1e-12)
    assert met["psnr"] > 40 and 0.99 < met["ssim"] <= 1.0
    assert "ssim" not in reconstruct(rule, z0[:, :4, :4])[1]


def test_get_inverter():
    assert get_inverter(UNI_INV) is uni_inv
    with pytest.raises(ValueError):
        get_inverter("fixed_point")
