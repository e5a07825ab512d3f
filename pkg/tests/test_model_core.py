import dataclasses

import numpy as np
import pytest

from conftest import market, subpopulation
from model_core import (
    ConfigError,
    InitialInventory,
    MaxIterations,
    PenaltySpec,
    UtilitySpec,
    admissibility_check,
    eta_weights,
    penalty_eval,
    utility_eval,
    validate_config,
    validate_penalty,
)


def test_eta_weights_two_groups(two_groups):
    weights = eta_weights(two_groups)
    assert weights.eta_k == pytest.approx((0.5, 0.25))
    assert weights.eta == pytest.approx(0.75)
    assert weights.upsilon_k == pytest.approx((2.0, 1.0))


def test_reference_config_passes(two_groups):
    report = validate_config(two_groups)
    assert report.passed
    assert report.messages() == []


def test_zero_gamma_is_reported_with_its_path():
    config = market([subpopulation(gamma=0.0)])
    report = validate_config(config)
    assert not report.passed
    assert "subpopulations[0].gamma: must be > 0" in report.messages()


def test_weights_must_sum_to_one():
    config = market([subpopulation(pi=0.6), subpopulation(pi=0.6)])
    messages = validate_config(config).messages()
    assert any(m.startswith("subpopulations[*].pi") for m in messages)


def test_every_violation_is_collected():
    config = dataclasses.replace(market([subpopulation(beta=-1.0, sigma=-0.1)]),
                                 time_steps=1, a_min=0.5)
    paths = {v.path for v in validate_config(config).violations}
    assert {'time_steps', 'a_grid.min', 'subpopulations[0].beta', 'subpopulations[0].sigma'} <= paths


def test_baseline_length_must_match_time_grid():
    params = dataclasses.replace(subpopulation(), baseline=(0.5, 0.5, 0.5))
    messages = validate_config(market([params], time_steps=20)).messages()
    assert any(m.startswith("subpopulations[0].baseline") for m in messages)


def test_baseline_on_grid_reuses_last_interval():
    params = dataclasses.replace(subpopulation(), baseline=(0.1, 0.2, 0.3))
    np.testing.assert_allclose(params.baseline_on_grid(3), [0.1, 0.2, 0.3, 0.3])
    assert subpopulation(h=0.5).baseline_on_grid(4).shape == (5,)


def test_linear_penalty_values():
    value, slope, curvature = penalty_eval(PenaltySpec.linear(2.0, intercept=1.0), np.array([0.0, 1.5]))
    np.testing.assert_allclose(value, [1.0, -2.0])
    np.testing.assert_allclose(slope, [-2.0, -2.0])
    np.testing.assert_allclose(curvature, [0.0, 0.0])


def test_quadratic_penalty_values():
    value, slope, curvature = PenaltySpec.quadratic(2.0, 1.0).evaluate(np.array([0.0, 1.0, 3.0]))
    np.testing.assert_allclose(value, [1.0, 0.0, 4.0])
    np.testing.assert_allclose(slope, [-2.0, 0.0, 4.0])
    np.testing.assert_allclose(curvature, [2.0, 2.0, 2.0])


def test_softplus_penalty_approaches_hockey_stick():
    spec = PenaltySpec.softplus_hockey(P=1.0, R=1.0, epsilon=0.01)
    x = np.array([-1.0, 0.5, 2.0, 3.0])
    value, slope, _ = spec.evaluate(x)
    np.testing.assert_allclose(value, np.maximum(1.0 - x, 0.0), atol=1e-6)
    np.testing.assert_allclose(slope, [-1.0, -1.0, 0.0, 0.0], atol=1e-6)


def test_softplus_is_stable_far_from_the_kink():
    spec = PenaltySpec.softplus_hockey(P=2.0, R=0.0, epsilon=1e-3)
    value, slope, curvature = spec.evaluate(np.array([-50.0, 50.0]))
    assert np.all(np.isfinite(value)) and np.all(np.isfinite(curvature))
    np.testing.assert_allclose(value, [100.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(slope, [-2.0, 0.0])


def test_softplus_at_the_kink():
    value, slope, curvature = PenaltySpec.softplus_hockey(1.0, 1.0, 0.2).evaluate(np.array([1.0]))
    assert value[0] == pytest.approx(0.2 * np.log(2.0))
    assert slope[0] == pytest.approx(-0.5)
    assert curvature[0] == pytest.approx(0.25 / 0.2)


def test_softplus_slope_is_lipschitz_with_constant_p_over_four_epsilon():
    spec = PenaltySpec.softplus_hockey(2.0, 1.0, 0.1)
    x = np.linspace(-1.0, 3.0, 40001)
    _, slope, curvature = spec.evaluate(x)
    assert np.max(curvature) == pytest.approx(5.0, rel=1e-6)
    assert np.min(curvature) >= 0.0
    ratios = np.abs(np.diff(slope)) / np.diff(x)
    assert np.max(ratios) <= 5.0 + 1e-9
    assert np.max(ratios) == pytest.approx(5.0, rel=1e-3)


def test_grids_need_three_points():
    config = market([subpopulation()], x_points=2)
    report = validate_config(config)
    assert 'x_grid.points: must be >= 3' in report.messages()


def test_unknown_penalty_kind_is_rejected():
    with pytest.raises(ValueError):
        PenaltySpec('cubic')


def test_penalty_parameter_violations():
    assert [v.path for v in validate_penalty(PenaltySpec.linear(-1.0))] == ['penalty.slope']
    bad = validate_penalty(PenaltySpec.softplus_hockey(0.0, 1.0, 0.0), 'p')
    assert {v.path for v in bad} == {'p.P', 'p.epsilon'}


def test_shifted_moves_only_the_intercept():
    spec = PenaltySpec.softplus_hockey(1.0, 1.0, 0.2).shifted(0.75)
    assert spec.intercept == pytest.approx(0.75)
    assert (spec.P, spec.R, spec.epsilon) == (1.0, 1.0, 0.2)
    x = np.linspace(-1, 3, 9)
    np.testing.assert_allclose(spec.evaluate(x)[0] - 0.75,
                               PenaltySpec.softplus_hockey(1.0, 1.0, 0.2).evaluate(x)[0])


@pytest.mark.parametrize("spec", [
    PenaltySpec.linear(1.0),
    PenaltySpec.softplus_hockey(1.0, 1.0, 0.2),
    PenaltySpec.softplus_hockey(3.0, 0.0, 0.05),
])
def test_shipped_contracts_are_admissible(spec):
    report = admissibility_check(spec, np.linspace(-1.0, 4.0, 201))
    assert report.admissible
    assert report.convexity_violation <= 1e-12
    assert report.sign_violation <= 0.0


def test_concave_penalty_fails_admissibility():
    def concave(x):
        x = np.asarray(x, dtype=float)
        return -0.5 * x ** 2, -x, -np.ones_like(x)

    report = admissibility_check(PenaltySpec.linear(0.0), np.linspace(-1.0, 1.0, 21), evaluator=concave)
    assert not report.admissible
    assert report.convexity_violation > 0
    assert any('not convex' in note for note in report.notes)


def test_quadratic_admissibility_carries_a_note():
    report = admissibility_check(PenaltySpec.quadratic(1.0, 1.0), np.linspace(-1.0, 3.0, 41))
    assert any('unbounded' in note for note in report.notes)
    assert report.slope_lipschitz == pytest.approx(1.0)


def test_utilities():
    u, du = utility_eval(UtilitySpec.identity(), np.array([-1.0, 2.0]))
    np.testing.assert_allclose(u, [-1.0, 2.0])
    np.testing.assert_allclose(du, [1.0, 1.0])
    u, du = utility_eval(UtilitySpec.convex_hinge(0.5), np.array([-1.0, 2.0]))
    np.testing.assert_allclose(u, [-1.0, 4.0])
    np.testing.assert_allclose(du, [1.0, 3.0])


def test_inventory_quadrature_integrates_moments():
    inv = InitialInventory.normal(0.3, 0.2)
    nodes, weights = inv.quadrature()
    assert weights.sum() == pytest.approx(1.0)
    assert np.dot(weights, nodes) == pytest.approx(0.3)
    assert np.dot(weights, (nodes - 0.3) ** 2) == pytest.approx(0.04)
    nodes, weights = InitialInventory.point(1.5).quadrature()
    assert nodes.tolist() == [1.5] and weights.tolist() == [1.0]


def test_inventory_sampling():
    rng = np.random.default_rng(0)
    assert np.all(InitialInventory.point(2.0).sample(rng, 5) == 2.0)
    draws = InitialInventory.normal(1.0, 0.5).sample(rng, 20000)
    assert draws.mean() == pytest.approx(1.0, abs=0.02)
    assert draws.std() == pytest.approx(0.5, abs=0.02)


def test_error_payloads():
    err = MaxIterations("stuck", [0.5, 0.25])
    assert err.history == [0.5, 0.25]
    cfg = ConfigError(3, ["a: required", "b: must be > 0"])
    assert cfg.code == 3
    assert "b: must be > 0" in str(cfg)
