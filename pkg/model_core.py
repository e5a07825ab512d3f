#!/usr/bin/env python3
"""
REC Market Model Core
Domain types, parameter validation, penalty and utility libraries, and the
eta/upsilon constants consumed by every other pipeline stage
"""

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

WEIGHT_SUM_TOL = 1e-12
SLOPE_ROUNDING_TOL = 1e-12

PENALTY_KINDS = ('linear', 'quadratic', 'softplus_hockey')
UTILITY_KINDS = ('identity', 'convex_hinge')
INVENTORY_KINDS = ('normal', 'point')

# ============================================================================
# ERRORS
# ============================================================================

class RecMarketError(Exception):
    """Base class for numerical failures raised by the pipeline"""


class NonConvergence(RecMarketError):
    """Policy iteration at a time step did not reach its tolerance"""


class GridTooCoarse(RecMarketError):
    """The explicit advection step cannot be made monotone on this grid"""


class StepTooLarge(RecMarketError):
    """RK4 step-doubling error estimate exceeded the oracle tolerance"""


class InadmissibleContract(RecMarketError):
    """A penalty function failed the admissibility check"""


class MaxIterations(RecMarketError):
    """Outer fixed-point iteration hit its cap"""

    def __init__(self, message: str, history: Sequence[float]):
        super().__init__(message)
        self.history = list(history)


class BudgetExhausted(RecMarketError):
    """Contract search used every equilibrium solve it was given"""

    def __init__(self, message: str, report):
        super().__init__(message)
        self.report = report


class ConfigError(RecMarketError):
    """Configuration could not be parsed (code 2) or validated (code 3)"""

    def __init__(self, code: int, messages: Sequence[str]):
        super().__init__('; '.join(messages))
        self.code = code
        self.messages = list(messages)

# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass(frozen=True)
class InitialInventory:
    """Law of the initial REC inventory xi: normal(mean, sd) or a point mass"""
    kind: str = 'point'
    mean: float = 0.0
    sd: float = 0.0

    @classmethod
    def normal(cls, mean: float, sd: float) -> 'InitialInventory':
        return cls('normal', float(mean), float(sd))

    @classmethod
    def point(cls, value: float) -> 'InitialInventory':
        return cls('point', float(value), 0.0)

    @property
    def variance(self) -> float:
        return self.sd ** 2 if self.kind == 'normal' else 0.0

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == 'normal' and self.sd > 0:
            return self.mean + self.sd * rng.standard_normal(n)
        return np.full(n, self.mean)

    def quadrature(self, n_nodes: int = 40) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes and weights integrating against this law"""
        if self.kind == 'normal' and self.sd > 0:
            nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
            return self.mean + self.sd * nodes, weights / weights.sum()
        return np.array([self.mean]), np.array([1.0])

    def to_dict(self) -> Dict:
        if self.kind == 'normal':
            return {'kind': 'normal', 'mean': self.mean, 'sd': self.sd}
        return {'kind': 'point', 'value': self.mean}


@dataclass(frozen=True)
class SubPopulationParams:
    """Cost, noise and weight parameters shared by one sub-population"""
    zeta: float
    gamma: float
    beta: float
    sigma: float
    baseline: Tuple[float, ...]
    pi: float
    lambda_weight: float
    initial_inventory: InitialInventory = field(default_factory=InitialInventory)

    def baseline_on_grid(self, time_steps: int) -> np.ndarray:
        """h(t_n) for n = 0..Nt; the last interval value is reused at T"""
        values = np.asarray(self.baseline, dtype=float)
        if values.size == 1:
            return np.full(time_steps + 1, values[0])
        return np.append(values, values[-1])

    def to_dict(self) -> Dict:
        baseline = list(self.baseline)
        return {
            'zeta': self.zeta,
            'gamma': self.gamma,
            'beta': self.beta,
            'sigma': self.sigma,
            'baseline': baseline[0] if len(baseline) == 1 else baseline,
            'pi': self.pi,
            'lambda_weight': self.lambda_weight,
            'initial_inventory': self.initial_inventory.to_dict(),
        }


@dataclass(frozen=True)
class MarketConfig:
    """Horizon, grids and sub-populations of a single-period REC market"""
    horizon: float
    time_steps: int
    x_min: float
    x_max: float
    x_points: int
    a_min: float
    a_max: float
    a_points: int
    subpopulations: Tuple[SubPopulationParams, ...]
    reservation_cost: float = 0.0
    mc_paths: int = 20000
    rng_seed: int = 0

    @property
    def dt(self) -> float:
        return self.horizon / self.time_steps

    @property
    def t_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.time_steps + 1)

    @property
    def x_grid(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.x_points)

    @property
    def a_grid(self) -> np.ndarray:
        return np.linspace(self.a_min, self.a_max, self.a_points)

    @property
    def n_subpops(self) -> int:
        return len(self.subpopulations)

    def with_grid(self, **changes) -> 'MarketConfig':
        """Same market on a different time or state grid"""
        return replace(self, **changes)


@dataclass(frozen=True)
class PenaltySpec:
    """
    Terminal non-compliance penalty C(x) for one sub-population
    linear:          C = -slope * x + c
    quadratic:       C = P/2 * (x - R)^2 + c
    softplus_hockey: C = P * eps * log(1 + exp((R - x)/eps)) + c
    """
    kind: str
    slope: float = 0.0
    P: float = 0.0
    R: float = 0.0
    epsilon: float = 0.0
    intercept: float = 0.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind '{self.kind}'")

    @classmethod
    def linear(cls, slope: float, intercept: float = 0.0) -> 'PenaltySpec':
        return cls('linear', slope=float(slope), intercept=float(intercept))

    @classmethod
    def quadratic(cls, P: float, R: float, intercept: float = 0.0) -> 'PenaltySpec':
        return cls('quadratic', P=float(P), R=float(R), intercept=float(intercept))

    @classmethod
    def softplus_hockey(cls, P: float, R: float, epsilon: float,
                        intercept: float = 0.0) -> 'PenaltySpec':
        return cls('softplus_hockey', P=float(P), R=float(R),
                   epsilon=float(epsilon), intercept=float(intercept))

    def evaluate(self, x) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(C(x), C'(x), C''(x)) elementwise"""
        x = np.asarray(x, dtype=float)
        if self.kind == 'linear':
            value = -self.slope * x + self.intercept
            slope = np.full_like(x, -self.slope)
            curvature = np.zeros_like(x)
        elif self.kind == 'quadratic':
            value = 0.5 * self.P * (x - self.R) ** 2 + self.intercept
            slope = self.P * (x - self.R)
            curvature = np.full_like(x, self.P)
        else:
            z = (self.R - x) / self.epsilon
            value = self.P * self.epsilon * np.logaddexp(0.0, z) + self.intercept
            sig = expit(z)
            slope = -self.P * sig
            curvature = (self.P / self.epsilon) * sig * (1.0 - sig)
        return value, slope, curvature

    def shifted(self, delta: float) -> 'PenaltySpec':
        return replace(self, intercept=self.intercept + float(delta))

    def to_dict(self) -> Dict:
        if self.kind == 'linear':
            return {'kind': 'linear', 'slope': self.slope, 'intercept': self.intercept}
        if self.kind == 'quadratic':
            return {'kind': 'quadratic', 'P': self.P, 'R': self.R,
                    'intercept': self.intercept}
        return {'kind': 'softplus_hockey', 'P': self.P, 'R': self.R,
                'epsilon': self.epsilon, 'intercept': self.intercept}


@dataclass(frozen=True)
class UtilitySpec:
    """Principal utility U_P: identity, or x + kappa * max(x, 0)^2"""
    kind: str = 'identity'
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in UTILITY_KINDS:
            raise ValueError(f"unknown utility kind '{self.kind}'")

    @classmethod
    def identity(cls) -> 'UtilitySpec':
        return cls('identity', 0.0)

    @classmethod
    def convex_hinge(cls, kappa: float) -> 'UtilitySpec':
        return cls('convex_hinge', float(kappa))

    def evaluate(self, x) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        if self.kind == 'identity':
            return x.copy(), np.ones_like(x)
        pos = np.maximum(x, 0.0)
        return x + self.kappa * pos ** 2, 1.0 + 2.0 * self.kappa * pos

    def to_dict(self) -> Dict:
        if self.kind == 'identity':
            return {'kind': 'identity'}
        return {'kind': 'convex_hinge', 'kappa': self.kappa}


@dataclass(frozen=True)
class EtaWeights:
    """eta_k = pi_k/gamma_k, eta = sum eta_k, upsilon_k = 1/gamma_k + 1/zeta_k"""
    eta_k: Tuple[float, ...]
    eta: float
    upsilon_k: Tuple[float, ...]


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def messages(self) -> List[str]:
        return [str(v) for v in self.violations]

    def add(self, path: str, message: str):
        self.violations.append(Violation(path, message))


@dataclass
class AdmissibilityReport:
    """Grid-based numerical check of the admissible contract set"""
    admissible: bool
    convexity_violation: float
    sign_violation: float
    slope_bound: float
    slope_lipschitz: float
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'admissible': self.admissible,
            'convexity_violation': self.convexity_violation,
            'sign_violation': self.sign_violation,
            'slope_bound': self.slope_bound,
            'slope_lipschitz': self.slope_lipschitz,
            'notes': list(self.notes),
        }

# ============================================================================
# VALIDATION
# ============================================================================

def _is_finite(value) -> bool:
    try:
        return math.isfinite(float(value))
    except (TypeError, ValueError):
        return False


def validate_subpopulation(params: SubPopulationParams, time_steps: int,
                           path: str, report: ValidationReport):
    """Append every violated invariant of one sub-population to the report"""
    for name in ('zeta', 'gamma', 'beta'):
        value = getattr(params, name)
        if not _is_finite(value) or value <= 0:
            report.add(f"{path}.{name}", "must be > 0")
    if not _is_finite(params.sigma) or params.sigma < 0:
        report.add(f"{path}.sigma", "must be >= 0")
    baseline = np.asarray(params.baseline, dtype=float)
    if baseline.size not in (1, time_steps):
        report.add(f"{path}.baseline",
                   f"must be a scalar or have {time_steps} entries (got {baseline.size})")
    if not np.all(np.isfinite(baseline)) or np.any(baseline < 0):
        report.add(f"{path}.baseline", "must be finite and >= 0")
    if not _is_finite(params.pi) or not 0 < params.pi <= 1:
        report.add(f"{path}.pi", "must lie in (0, 1]")
    if not _is_finite(params.lambda_weight) or params.lambda_weight < 0:
        report.add(f"{path}.lambda_weight", "must be >= 0")
    inventory = params.initial_inventory
    if inventory.kind not in INVENTORY_KINDS:
        report.add(f"{path}.initial_inventory.kind",
                   f"must be one of {', '.join(INVENTORY_KINDS)}")
    if not _is_finite(inventory.mean):
        report.add(f"{path}.initial_inventory.mean", "must be finite")
    if not _is_finite(inventory.sd) or inventory.sd < 0:
        report.add(f"{path}.initial_inventory.sd", "must be >= 0")


def validate_config(config: MarketConfig) -> ValidationReport:
    """Check every MarketConfig invariant; violations are returned, never raised"""
    report = ValidationReport()

    if not _is_finite(config.horizon) or config.horizon <= 0:
        report.add('horizon', "must be > 0")
    if config.time_steps < 2:
        report.add('time_steps', "must be >= 2")
    if config.x_points < 3:
        report.add('x_grid.points', "must be >= 3")
    if config.a_points < 3:
        report.add('a_grid.points', "must be >= 3")
    if not config.x_min < config.x_max:
        report.add('x_grid', "x_min must be < x_max")
    if config.a_min != 0:
        report.add('a_grid.min', "must be 0 so that A_0 = 0 lies on the grid")
    if not config.a_max > config.a_min:
        report.add('a_grid.max', "must be > a_min")
    if config.mc_paths < 1:
        report.add('mc_paths', "must be >= 1")
    if not _is_finite(config.reservation_cost):
        report.add('reservation_cost', "must be finite")

    if not config.subpopulations:
        report.add('subpopulations', "at least one sub-population is required")
        return report

    for k, params in enumerate(config.subpopulations):
        validate_subpopulation(params, config.time_steps, f"subpopulations[{k}]", report)

    total = sum(p.pi for p in config.subpopulations)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        report.add('subpopulations[*].pi', f"population weights sum {total:g} ≠ 1")

    return report


def validate_penalty(spec: PenaltySpec, path: str = 'penalty') -> List[Violation]:
    """Parameter-level invariants of a penalty spec"""
    violations = []
    if spec.kind == 'linear' and not spec.slope >= 0:
        violations.append(Violation(f"{path}.slope", "must be >= 0"))
    if spec.kind in ('quadratic', 'softplus_hockey') and not spec.P > 0:
        violations.append(Violation(f"{path}.P", "must be > 0"))
    if spec.kind == 'softplus_hockey' and not spec.epsilon > 0:
        violations.append(Violation(f"{path}.epsilon", "must be > 0"))
    for name in ('slope', 'P', 'R', 'epsilon', 'intercept'):
        if not _is_finite(getattr(spec, name)):
            violations.append(Violation(f"{path}.{name}", "must be finite"))
    return violations

# ============================================================================
# ANALYTIC CONSTANTS
# ============================================================================

def eta_weights(config: MarketConfig) -> EtaWeights:
    eta_k = tuple(p.pi / p.gamma for p in config.subpopulations)
    upsilon_k = tuple(1.0 / p.gamma + 1.0 / p.zeta for p in config.subpopulations)
    return EtaWeights(eta_k=eta_k, eta=sum(eta_k), upsilon_k=upsilon_k)

# ============================================================================
# PENALTY AND UTILITY LIBRARIES
# ============================================================================

def penalty_eval(spec: PenaltySpec, x):
    """Value, slope and curvature of C at x"""
    return spec.evaluate(x)


def admissibility_check(spec: PenaltySpec, grid: np.ndarray,
                        evaluator: Optional[Callable] = None) -> AdmissibilityReport:
    """
    Verify convexity, non-positive slope, bounded slope and a Lipschitz slope
    on the grid. `evaluator` replaces spec.evaluate (used to inject shapes
    outside the three shipped kinds).
    """
    grid = np.asarray(grid, dtype=float)
    evaluate = evaluator if evaluator is not None else spec.evaluate
    _, slope, _ = evaluate(grid)
    slope = np.asarray(slope, dtype=float)

    notes = []
    if not np.all(np.isfinite(slope)):
        return AdmissibilityReport(False, math.inf, math.inf, math.inf, math.inf,
                                   ['slope is not finite on the grid'])

    dslope = np.diff(slope)
    dx = np.diff(grid)
    convexity_violation = float(max(0.0, -dslope.min())) if dslope.size else 0.0
    sign_violation = float(max(0.0, slope.max()))
    slope_bound = float(np.abs(slope).max())
    slope_lipschitz = float(np.max(np.abs(dslope) / dx)) if dslope.size else 0.0

    if spec is not None and spec.kind == 'quadratic':
        notes.append('quadratic slope is unbounded globally; checked on the grid only')

    admissible = (convexity_violation <= SLOPE_ROUNDING_TOL
                  and sign_violation <= SLOPE_ROUNDING_TOL)
    if convexity_violation > SLOPE_ROUNDING_TOL:
        notes.append(f'slope decreases by up to {convexity_violation:.3g} (not convex)')
    if sign_violation > SLOPE_ROUNDING_TOL:
        notes.append(f'slope reaches {sign_violation:.3g} > 0 (C increasing)')

    return AdmissibilityReport(admissible, convexity_violation, sign_violation,
                               slope_bound, slope_lipschitz, notes)


def utility_eval(spec: UtilitySpec, x):
    """U_P(x) and U_P'(x)"""
    return spec.evaluate(x)
