"""Small markets shared by the test modules"""

import pytest

from model_core import InitialInventory, MarketConfig, PenaltySpec, SubPopulationParams


def subpopulation(zeta=1.0, gamma=1.0, beta=1.0, sigma=0.1, h=0.5, pi=1.0, lam=1.0,
                  inventory=None) -> SubPopulationParams:
    return SubPopulationParams(
        zeta=zeta, gamma=gamma, beta=beta, sigma=sigma, baseline=(h,), pi=pi,
        lambda_weight=lam,
        initial_inventory=inventory if inventory is not None else InitialInventory.point(0.0),
    )


def market(subpops, time_steps=20, x_min=-1.0, x_max=3.0, x_points=41, a_points=6,
           mc_paths=2048, seed=11, reservation_cost=0.0) -> MarketConfig:
    return MarketConfig(horizon=1.0, time_steps=time_steps, x_min=x_min, x_max=x_max,
                        x_points=x_points, a_min=0.0, a_max=1.0, a_points=a_points,
                        subpopulations=tuple(subpops), reservation_cost=reservation_cost,
                        mc_paths=mc_paths, rng_seed=seed)


@pytest.fixture
def deterministic_k1():
    """lambda = zeta = gamma = beta = 1, h = 0.5, no noise, xi = 0"""
    return market([subpopulation(sigma=0.0)], time_steps=50)


@pytest.fixture
def noisy_k1():
    return market([subpopulation(sigma=0.1, inventory=InitialInventory.normal(0.0, 0.1))])


@pytest.fixture
def two_groups():
    """Two sub-populations with opposite trading roles under lambda-linear contracts"""
    return market([
        subpopulation(zeta=1.0, gamma=1.0, lam=1.0, pi=0.5,
                      inventory=InitialInventory.normal(0.0, 0.1)),
        subpopulation(zeta=2.0, gamma=2.0, lam=0.5, pi=0.5,
                      inventory=InitialInventory.normal(0.0, 0.1)),
    ])


@pytest.fixture
def lambda_linear():
    def build(config):
        return [PenaltySpec.linear(p.lambda_weight) for p in config.subpopulations]
    return build


@pytest.fixture
def softplus():
    def build(config, P=1.0, R=1.0, epsilon=0.2):
        return [PenaltySpec.softplus_hockey(P, R, epsilon) for _ in config.subpopulations]
    return build
