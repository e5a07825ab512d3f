import numpy as np
import pytest

from conftest import market, subpopulation
from lq_oracle import (
    hjb_residual_check,
    linear_contract_solution,
    riccati_for_config,
    riccati_solve,
)
from model_core import InitialInventory, PenaltySpec, StepTooLarge


@pytest.fixture
def lq_params():
    return subpopulation(sigma=0.1, inventory=InitialInventory.normal(0.2, 0.1))


@pytest.fixture
def oracle(lq_params):
    return riccati_solve(lq_params, P=1.0, R=1.0, horizon=1.0, steps=1000)


def test_linear_contract_reference_two_groups(two_groups):
    sol = linear_contract_solution(two_groups)
    assert sol.price == pytest.approx(5.0 / 6.0)
    assert sol.YX_const == pytest.approx((-1.0, -0.5))
    assert sol.g == pytest.approx((1.0, 0.25))
    assert sol.trade == pytest.approx((1.0 / 6.0, -1.0 / 6.0))
    assert sol.clearing() == pytest.approx(0.0, abs=1e-15)
    assert sol.roles() == ['buyer', 'seller']
    assert sol.alpha(0.25, 0) == pytest.approx(0.75)
    assert sol.YA(1.0, 1) == pytest.approx(0.0)


def test_single_group_linear_contract_does_not_trade():
    sol = linear_contract_solution(market([subpopulation(lam=0.8)]))
    assert sol.price == pytest.approx(0.8)
    assert sol.roles() == ['inactive']


@pytest.mark.parametrize('seed', range(8))
def test_linear_contract_solution_clears_for_random_markets(seed):
    rng = np.random.default_rng(seed)
    n_groups = int(rng.integers(1, 5))
    pis = rng.dirichlet(np.ones(n_groups))
    groups = [subpopulation(zeta=rng.uniform(0.5, 3.0), gamma=rng.uniform(0.5, 3.0),
                            beta=rng.uniform(0.5, 3.0), pi=float(pi), lam=rng.uniform(0.1, 2.0))
              for pi in pis]
    sol = linear_contract_solution(market(groups))
    assert sol.clearing() == pytest.approx(0.0, abs=1e-12)
    assert min(sol.lambdas) - 1e-12 <= sol.price <= max(sol.lambdas) + 1e-12
    for k, p in enumerate(groups):
        assert sol.trade[k] == pytest.approx((p.lambda_weight - sol.price) / p.gamma)


def test_terminal_conditions(oracle):
    assert oracle.p[-1] == pytest.approx(1.0)
    assert oracle.q[-1] == pytest.approx(0.0)
    assert oracle.r[-1] == pytest.approx(0.0)
    assert oracle.s[-1] == pytest.approx(-1.0, abs=1e-9)
    assert oracle.u[-1] == pytest.approx(0.0, abs=1e-9)
    assert oracle.w[-1] == pytest.approx(0.5)
    x = np.array([-0.5, 1.0, 2.5])
    np.testing.assert_allclose(oracle.value(1.0, x, 0.0), PenaltySpec.quadratic(1.0, 1.0).evaluate(x)[0],
                               atol=1e-8)


def test_price_is_self_consistent(oracle):
    np.testing.assert_allclose(oracle.S, -(oracle.p * oracle.m_x + oracle.q * oracle.m_a + oracle.s),
                               atol=1e-12)
    assert oracle.m_x[0] == pytest.approx(0.2)
    assert oracle.m_a[0] == pytest.approx(0.0)


def test_p_solves_its_riccati_equation(oracle):
    dp = np.gradient(oracle.p, oracle.t)
    rhs = 2.0 * oracle.p ** 2 + oracle.q ** 2
    np.testing.assert_allclose(dp[1:-1], rhs[1:-1], rtol=1e-4)


def test_hjb_residual_is_small(oracle):
    check = hjb_residual_check(oracle, n_points=200, seed=3)
    assert check.n_points == 200
    assert not check.empty_sample
    assert check.max_residual < 1e-8


@pytest.mark.parametrize("name", ['p', 'q', 's'])
def test_residual_detects_a_perturbed_coefficient(oracle, name):
    check = hjb_residual_check(oracle.perturbed(name, 1e-3), n_points=200, seed=3)
    assert check.max_residual > 1e-5


def test_empty_residual_sample(oracle):
    check = hjb_residual_check(oracle, n_points=0)
    assert check.empty_sample
    assert check.max_residual == 0.0


def test_step_doubling_rejects_a_coarse_grid(lq_params):
    with pytest.raises(StepTooLarge):
        riccati_solve(lq_params, P=1.0, R=1.0, horizon=1.0, steps=1)


def test_fixed_price_oracle(lq_params):
    free = riccati_solve(lq_params, 1.0, 1.0, 1.0, 500, fixed_price=0.0)
    np.testing.assert_allclose(free.S, 0.0)
    assert hjb_residual_check(free, seed=1).max_residual < 1e-8
    # p, q, r do not see the price
    coupled = riccati_solve(lq_params, 1.0, 1.0, 1.0, 500)
    np.testing.assert_allclose(free.p, coupled.p)


def test_oracle_sized_to_config(lq_params):
    config = market([lq_params], time_steps=50, x_min=-1.0, x_max=3.0)
    sol = riccati_for_config(config, 1.0, 1.0)
    assert sol.t.size == 501
    assert sol.x_range == (-1.0, 3.0)
    assert sol.a_range == (0.0, 1.0)


def test_frame_and_save(tmp_path, oracle):
    frame = oracle.to_frame()
    assert list(frame.columns) == ['t', 'p', 'q', 'r', 's', 'u', 'w', 'S', 'mean_X', 'mean_A']
    path = oracle.save(tmp_path)
    assert path.name == 'riccati.csv'
    assert path.exists()


def test_fixed_price_mean_inventory_follows_the_controls(lq_params):
    sol = riccati_solve(lq_params, 1.0, 1.0, 1.0, 1000, fixed_price=0.0)
    upsilon = 2.0
    mean_yx = sol.p * sol.m_x + sol.q * sol.m_a + sol.s
    # g = -YX/zeta and Gamma = -(YX + S)/gamma with S = 0
    expected = 0.5 - upsilon * mean_yx + sol.m_a
    np.testing.assert_allclose(np.gradient(sol.m_x, sol.t)[1:-1], expected[1:-1], atol=1e-5)
    np.testing.assert_allclose(np.gradient(sol.m_a, sol.t)[1:-1],
                               -(sol.q * sol.m_x + sol.r * sol.m_a + sol.u)[1:-1], atol=1e-5)


def test_self_consistent_price_is_constant(oracle):
    np.testing.assert_allclose(oracle.S, oracle.S[0], atol=1e-9)
    pinned = riccati_solve(oracle.params, 1.0, 1.0, 1.0, 1000, fixed_price=float(oracle.S[0]))
    np.testing.assert_allclose(pinned.m_x, oracle.m_x, atol=1e-9)
    np.testing.assert_allclose(pinned.s, oracle.s, atol=1e-9)
