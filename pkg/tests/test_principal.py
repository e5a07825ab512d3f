import json
from pathlib import Path

import numpy as np
import pytest

from conftest import market, subpopulation
from mfg_equilibrium import solve_equilibrium
from model_core import BudgetExhausted, InitialInventory, PenaltySpec, UtilitySpec
from principal import (
    ContractFamily,
    EvaluationSettings,
    adjoint_closed_form,
    agent_value_v0,
    evaluate_family,
    evaluate_member,
    foc_residual,
    iterate_optimal_yx,
    optimal_yx_map,
    optimize_contract,
    principal_argument,
    principal_objective,
    reservation_shift,
    shift_equilibrium,
    value_process_check,
)
from run_experiment import parse_config


@pytest.fixture
def linear_eq(two_groups, lambda_linear):
    return solve_equilibrium(two_groups, lambda_linear(two_groups), tol=1e-8)


@pytest.fixture
def single_group():
    return market([subpopulation(sigma=0.05, inventory=InitialInventory.normal(0.0, 0.05))],
                  reservation_cost=0.0)


@pytest.fixture
def fast_settings():
    return EvaluationSettings(tol=1e-4, paths=2048, principal_paths=4096, adjoint_paths=512, seed=2)


def test_optimal_yx_iteration_lands_on_minus_lambda(two_groups):
    y, iterations, landed = iterate_optimal_yx(two_groups, np.zeros(2))
    assert landed
    np.testing.assert_allclose(y, [-1.0, -0.5], atol=1e-9)
    assert iterations < 1000


def test_minus_lambda_is_a_fixed_point(two_groups):
    np.testing.assert_allclose(optimal_yx_map([-1.0, -0.5], two_groups, M=2.5), [-1.0, -0.5])


def test_principal_argument_for_linear_contracts(two_groups):
    X_T = np.array([[1.0, 2.0], [0.5, 0.0]])
    contracts = [PenaltySpec.linear(1.0, intercept=0.2), PenaltySpec.linear(0.5)]
    # slope equal to lambda leaves only the intercepts
    np.testing.assert_allclose(principal_argument(X_T, contracts, two_groups), [-0.1, -0.1])


def test_adjoints_for_identity_utility(two_groups, linear_eq, lambda_linear):
    adjoint = adjoint_closed_form(linear_eq, lambda_linear(two_groups), UtilitySpec.identity(), paths=256)
    np.testing.assert_allclose(adjoint.M_mean, 1.0, atol=1e-9)
    np.testing.assert_allclose(adjoint.K_V, -0.5, atol=1e-9)
    np.testing.assert_allclose(adjoint.K_X[1], -0.25, atol=1e-9)
    np.testing.assert_allclose(adjoint.K_A[0], -0.5 * (1.0 - two_groups.t_grid), atol=1e-9)
    assert adjoint.L_is_zero


def test_lambda_linear_contracts_satisfy_the_focs(two_groups, linear_eq, lambda_linear):
    contracts = lambda_linear(two_groups)
    adjoint = adjoint_closed_form(linear_eq, contracts, UtilitySpec.identity(), paths=256)
    analytic = foc_residual(linear_eq, contracts, UtilitySpec.identity(), adjoint)
    assert analytic.max_abs < 1e-9
    mc = foc_residual(linear_eq, contracts, UtilitySpec.identity(), adjoint, method='monte_carlo')
    assert mc.max_abs < 1e-9
    assert np.all(mc.se_X < 1e-9)


def test_convex_utility_keeps_lambda_linear_focs(two_groups, linear_eq, lambda_linear):
    contracts = lambda_linear(two_groups)
    utility = UtilitySpec.convex_hinge(0.5)
    foc = foc_residual(linear_eq, contracts, utility,
                       adjoint_closed_form(linear_eq, contracts, utility, paths=512))
    assert foc.max_abs < 1e-9


def test_other_slopes_violate_the_focs(two_groups):
    contracts = [PenaltySpec.linear(1.25), PenaltySpec.linear(0.625)]
    eq = solve_equilibrium(two_groups, contracts, tol=1e-8)
    foc = foc_residual(eq, contracts, UtilitySpec.identity(),
                       adjoint_closed_form(eq, contracts, UtilitySpec.identity(), paths=256))
    assert foc.max_abs > 1e-2


def test_unknown_foc_method(two_groups, linear_eq, lambda_linear):
    contracts = lambda_linear(two_groups)
    adjoint = adjoint_closed_form(linear_eq, contracts, UtilitySpec.identity(), paths=64)
    with pytest.raises(ValueError):
        foc_residual(linear_eq, contracts, UtilitySpec.identity(), adjoint, method='exact')


def test_reservation_shift_binds_the_constraint(linear_eq, lambda_linear, two_groups):
    shifted, deltas = reservation_shift(lambda_linear(two_groups), linear_eq, 0.3)
    moved = shift_equilibrium(linear_eq, deltas)
    np.testing.assert_allclose(agent_value_v0(moved), 0.3, atol=1e-10)
    assert [c.intercept for c in shifted] == pytest.approx(deltas)
    np.testing.assert_array_equal(moved.price.values, linear_eq.price.values)
    assert moved.feedbacks[0].YX is linear_eq.feedbacks[0].YX


def test_value_process_reaches_the_terminal_penalty(two_groups, linear_eq):
    for k, lam in enumerate((1.0, 0.5)):
        check = value_process_check(linear_eq, k, paths=1000)
        expected = lam ** 2 * two_groups.dt / 2.0 + two_groups.dt ** 2
        assert abs(check['mean_gap']) <= expected + 1e-9
        assert check['max_abs_gap'] <= expected + 1e-9


def test_objective_is_deterministic_under_a_seed(linear_eq, lambda_linear, two_groups):
    contracts = lambda_linear(two_groups)
    first = principal_objective(linear_eq, contracts, UtilitySpec.identity(), paths=1000, seed=4)
    second = principal_objective(linear_eq, contracts, UtilitySpec.identity(), paths=1000, seed=4)
    assert first == second


def test_linear_family_prefers_lambda(single_group, fast_settings):
    family = ContractFamily('linear', 1, bounds=((0.0, 2.0),), initial=(1.0,))
    reports = evaluate_family(family, [[0.5], [1.0], [1.25]], single_group, UtilitySpec.identity(),
                           fast_settings)
    J = [r.J for r in reports]
    assert [r.params for r in reports] == [[0.5], [1.0], [1.25]]
    assert J[1] < J[0] and J[1] < J[2]
    assert J[0] - J[1] == pytest.approx(1.0 / 6.0, abs=0.03)
    assert J[2] - J[1] == pytest.approx(1.0 / 24.0, abs=0.02)
    assert all(r.foc is None for r in reports)


def test_evaluated_member_meets_reservation(single_group, fast_settings):
    family = ContractFamily('linear', 1, bounds=((0.0, 2.0),), initial=(1.0,))
    report = evaluate_member(family, [1.0], single_group, UtilitySpec.identity(), fast_settings)
    assert report.admissible
    assert report.value_v0[0] == pytest.approx(0.0, abs=1e-10)
    assert report.foc.max_abs < 1e-3
    assert report.price_level == pytest.approx(1.0, abs=1e-3)


def test_family_validation():
    with pytest.raises(ValueError):
        ContractFamily('linear', 2, bounds=((0.0, 1.0),), initial=(0.5,))
    with pytest.raises(ValueError):
        ContractFamily('linear', 1, bounds=((-1.0, 1.0),), initial=(0.5,))
    with pytest.raises(ValueError):
        ContractFamily('softplus_hockey', 1, bounds=((0.0, 1.0), (0.0, 1.0), (0.1, 1.0)),
                       initial=(0.5, 0.5, 0.5))
    family = ContractFamily('softplus_hockey', 1, bounds=((0.1, 2.0), (0.0, 2.0), (0.05, 0.5)),
                            initial=(1.0, 1.0, 0.2))
    assert family.names == ['P_0', 'R_0', 'epsilon_0']
    contract = family.contracts([5.0, 1.0, 0.01])[0]
    assert (contract.P, contract.R, contract.epsilon) == (2.0, 1.0, 0.05)


def test_degenerate_family_is_evaluated_once(single_group, fast_settings):
    family = ContractFamily('linear', 1, bounds=((1.0, 1.0),), initial=(1.0,))
    report = optimize_contract(family, single_group, UtilitySpec.identity(), budget=5,
                               settings=fast_settings)
    assert len(report.trace) == 1
    assert report.params == [1.0]


def test_budget_exhaustion_reports_best_member(single_group, fast_settings, tmp_path):
    family = ContractFamily('linear', 1, bounds=((0.0, 2.0),), initial=(0.5,))
    with pytest.raises(BudgetExhausted) as info:
        optimize_contract(family, single_group, UtilitySpec.identity(), budget=2, settings=fast_settings)
    report = info.value.report
    assert len(report.trace) == 2
    assert report.J == min(row['JP'] for row in report.trace)
    written = report.save(tmp_path)
    assert [p.name for p in written] == ['principal_report.json', 'optimization_trace.csv']
    payload = json.loads(written[0].read_text())
    assert payload['evaluations'] == 2


@pytest.mark.slow
def test_nelder_mead_recovers_lambda_linear_contract(single_group):
    settings = EvaluationSettings(tol=1e-9, paths=2048, principal_paths=4096, adjoint_paths=512, seed=2)
    family = ContractFamily('linear', 1, bounds=((0.0, 2.0),), initial=(0.4,))
    report = optimize_contract(family, single_group, UtilitySpec.identity(), budget=80,
                               settings=settings)
    assert report.params[0] == pytest.approx(1.0, abs=0.1)
    assert report.admissible


def test_identity_utility_has_no_adjoint_spread(two_groups, linear_eq, lambda_linear):
    adjoint = adjoint_closed_form(linear_eq, lambda_linear(two_groups), UtilitySpec.identity(), paths=256)
    assert adjoint.M_se.shape == (two_groups.time_steps + 1,)
    np.testing.assert_allclose(adjoint.M_se, 0.0, atol=1e-12)


def test_adjoint_spread_grows_towards_maturity(two_groups):
    contracts = [PenaltySpec.linear(1.25), PenaltySpec.linear(0.625)]
    eq = solve_equilibrium(two_groups, contracts, tol=1e-8)
    adjoint = adjoint_closed_form(eq, contracts, UtilitySpec.convex_hinge(0.5), paths=512)
    assert adjoint.M_se.shape == (two_groups.time_steps + 1,)
    assert adjoint.M_se[-1] > 0.0
    assert adjoint.M_se[0] < adjoint.M_se[-1]
    assert np.all(adjoint.M_se[1:] > 0.0)


def random_market(seed: int, n_groups: int):
    rng = np.random.default_rng(seed)
    pis = rng.dirichlet(np.ones(n_groups))
    groups = [
        subpopulation(zeta=rng.uniform(1.0, 3.0), gamma=rng.uniform(1.0, 3.0), beta=rng.uniform(1.0, 2.0),
                      pi=float(pi), lam=rng.uniform(0.5, 1.5),
                      inventory=InitialInventory.normal(0.0, 0.1))
        for pi in pis
    ]
    return market(groups, x_max=6.0, x_points=57)


@pytest.mark.parametrize('seed', range(5))
def test_lambda_linear_focs_hold_for_random_markets(seed, lambda_linear):
    config = random_market(seed, 2 + seed % 2)
    contracts = lambda_linear(config)
    eq = solve_equilibrium(config, contracts, tol=1e-10)
    adjoint = adjoint_closed_form(eq, contracts, UtilitySpec.identity(), paths=256)
    foc = foc_residual(eq, contracts, UtilitySpec.identity(), adjoint)
    assert foc.max_abs < 1e-8


REFERENCE_K2 = Path(__file__).resolve().parent.parent / 'configs' / 'reference_k2.json'


@pytest.mark.slow
def test_lambda_linear_contract_beats_the_softplus_family():
    spec = parse_config(REFERENCE_K2)
    config = spec.config.with_grid(time_steps=50, x_points=51, a_points=6)
    s = spec.solver
    settings = EvaluationSettings(damping=s['damping'], tol=s['tol'], max_outer=s['max_outer'],
                                  principal_paths=8192, adjoint_paths=512, seed=5,
                                  forward=s['forward'])
    lambdas = [p.lambda_weight for p in config.subpopulations]
    linear = ContractFamily('linear', 2, bounds=((0.0, 3.0), (0.0, 3.0)), initial=tuple(lambdas))
    reference = evaluate_member(linear, lambdas, config, spec.utility, settings)
    assert reference.J_se < 1e-12

    grid = [[P, R, eps, P, R, eps] for P in (0.5, 1.0, 2.0) for R in (0.5, 1.0, 1.5)
            for eps in (0.1, 0.2, 0.4)]
    reports = evaluate_family(spec.family, grid, config, spec.utility, settings)
    try:
        best = optimize_contract(spec.family, config, spec.utility, spec.budget, settings)
    except BudgetExhausted as e:
        best = e.report
    assert spec.budget == 60
    assert len(reports) == 27
    for report in reports + [best]:
        assert reference.J <= report.J + 2 * report.J_se, report.params
