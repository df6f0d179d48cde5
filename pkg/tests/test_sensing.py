import numpy as np
import pytest

from gridloop.netmodel import load_case
from gridloop.scenario import bundled
from gridloop.sensing import MeasurementPlan, default_sensor_buses, pseudo_errors, take_measurements


def state(n, rng):
    return rng.uniform(-0.5, 0.5, n), rng.uniform(-0.2, 0.2, n), rng.uniform(0.95, 1.05, n)


def test_noiseless_limit_reproduces_truth():
    rng = np.random.default_rng(0)
    plan = MeasurementPlan(10, (2, 5, 9), sigma_v=0.0, sigma_p=0.0, sigma_q=0.0, seed=3)
    p, q, v = state(10, rng)
    snap = take_measurements(plan, (p, q, v), iteration=7)
    for b, val in snap.v_meas.items():
        assert val == pytest.approx(v[b - 1], abs=1e-9)
    np.testing.assert_allclose(snap.p_pseudo_meas, p, atol=1e-9)
    np.testing.assert_allclose(snap.q_pseudo_meas, q, atol=1e-9)


def test_default_plan_levels():
    plan = MeasurementPlan(36, (1, 17, 35))
    assert plan.v_sensors == (1, 17, 35)
    assert set(plan.sigma_v) == {0.01}
    assert set(plan.sigma_p) == {0.5} and set(plan.sigma_q) == {0.5}
    assert plan.p_pseudo == plan.q_pseudo == tuple(range(1, 37))


def test_default_sensor_buses_on_feeder():
    case = load_case(bundled("feeder37.json"))
    sensors = default_sensor_buses(case)
    labels = [case.buses[b - 1].label for b in sensors]
    assert labels == ["701", "708", "740"]
    depth = case.depth()
    assert depth[sensors[-1] - 1] == depth.max()


def test_snapshots_are_reproducible():
    rng = np.random.default_rng(1)
    plan = MeasurementPlan(8, (1, 4), seed=42)
    truth = state(8, rng)
    a = take_measurements(plan, truth, 5)
    b = take_measurements(plan, truth, 5)
    assert a.v_meas == b.v_meas
    assert np.array_equal(a.p_pseudo_meas, b.p_pseudo_meas)
    c = take_measurements(plan, truth, 6)
    assert a.v_meas != c.v_meas
    d = take_measurements(MeasurementPlan(8, (1, 4), seed=43), truth, 5)
    assert a.v_meas != d.v_meas


def test_bus_noise_does_not_depend_on_other_sensors():
    rng = np.random.default_rng(2)
    truth = state(12, rng)
    one = take_measurements(MeasurementPlan(12, (7,), seed=1), truth, 3)
    many = take_measurements(MeasurementPlan(12, (2, 7, 11), seed=1), truth, 3)
    assert one.v_meas[7] == many.v_meas[7]


def test_pseudo_error_is_static_across_iterations():
    rng = np.random.default_rng(3)
    plan = MeasurementPlan(6, (1,), seed=9)
    p, q, v = state(6, rng)
    nominal = (p * 1.3, q * 0.7)
    first = take_measurements(plan, (p, q, v), 0, nominal)
    later = take_measurements(plan, (p, q, v), 250, nominal)
    np.testing.assert_array_equal(first.p_pseudo_meas, later.p_pseudo_meas)
    # the error follows the true injection when the controller moves it
    moved = take_measurements(plan, (p + 0.1, q, v), 250, nominal)
    np.testing.assert_allclose(moved.p_pseudo_meas - first.p_pseudo_meas, 0.1, atol=1e-15)


def test_sensor_noise_moments():
    n, iters, sigma = 100, 1000, 0.01
    plan = MeasurementPlan(n, tuple(range(1, n + 1)), sigma_v=sigma, seed=5)
    truth = (np.zeros(n), np.zeros(n), np.full(n, 1.04))
    rel = np.concatenate([
        np.fromiter(take_measurements(plan, truth, k).v_meas.values(), float) / 1.04 - 1 for k in range(iters)
    ])
    assert rel.size == 100_000
    assert abs(rel.std() / sigma - 1) <= 0.02
    assert abs(rel.mean()) <= 4 * sigma / np.sqrt(rel.size)


def test_pseudo_noise_moments():
    n = 100_000
    plan = MeasurementPlan(n, (), sigma_p=0.5, sigma_q=0.5, seed=11)
    nominal_p = np.full(n, 0.2)
    nominal_q = np.full(n, -0.04)
    ep, eq = pseudo_errors(plan, nominal_p, nominal_q)
    assert abs(ep.std() / 0.1 - 1) <= 0.02
    assert abs(eq.std() / 0.02 - 1) <= 0.02


@pytest.mark.parametrize(
    "kwargs",
    [dict(v_sensors=(0,)), dict(v_sensors=(3, 3)), dict(v_sensors=(9,)), dict(v_sensors=(1,), sigma_v=-0.1),
     dict(v_sensors=(1,), sigma_p=float("nan"))],
)
def test_plan_validation(kwargs):
    with pytest.raises(ValueError):
        MeasurementPlan(n_bus=5, **kwargs)


def test_state_dimension_check():
    plan = MeasurementPlan(4, (1,))
    with pytest.raises(ValueError):
        take_measurements(plan, (np.zeros(3), np.zeros(3), np.ones(3)), 0)
