#!/usr/bin/env python3
"""
Principal (Regulator) Layer
Evaluates the regulator's objective for a contract vector, computes the
closed-form adjoints and first-order-condition residuals, binds the agents'
reservation constraint through contract intercepts, and searches parametric
contract families with Nelder-Mead.
"""

import json
import math
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.optimize import minimize

from hjb_solver import MAX_SUBSTEPS
from mfg_equilibrium import (
    DEFAULT_DAMPING,
    DEFAULT_FORWARD,
    DEFAULT_MAX_OUTER,
    DEFAULT_TOL,
    MfgEquilibrium,
    block_sizes,
    simulate_block,
    solve_equilibrium,
)
from model_core import (
    BudgetExhausted,
    MarketConfig,
    PenaltySpec,
    RecMarketError,
    UtilitySpec,
    eta_weights,
)

PRINCIPAL_STREAM = 4
DEFAULT_ADJOINT_PATHS = 2000
RESERVATION_TOL = 1e-8
NELDER_MEAD_XATOL = 1e-3
NELDER_MEAD_FATOL = 1e-6

# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class AdjointState:
    """
    K^X_k = -pi_k M lambda_k, K^V_k = -pi_k M, K^A_k = -pi_k M lambda_k (T - t),
    L = 0. M(t) is the conditional expectation of the principal's marginal
    utility, regressed on the representative agents' time-t states.
    """
    t_grid: np.ndarray
    M_mean: np.ndarray
    M_se: np.ndarray
    M_samples: np.ndarray
    K_X: np.ndarray
    K_V: np.ndarray
    K_A: np.ndarray
    L: np.ndarray
    YX_samples: np.ndarray
    YA_samples: np.ndarray

    @property
    def L_is_zero(self) -> bool:
        return not np.any(self.L)


@dataclass
class FocResidual:
    residual_X: np.ndarray
    residual_A: np.ndarray
    se_X: Optional[np.ndarray] = None
    se_A: Optional[np.ndarray] = None

    @property
    def max_abs(self) -> float:
        return float(max(np.max(np.abs(self.residual_X)), np.max(np.abs(self.residual_A))))


@dataclass
class EvaluationSettings:
    """Knobs shared by every equilibrium solve inside a contract search"""
    damping: float = DEFAULT_DAMPING
    tol: float = DEFAULT_TOL
    max_outer: int = DEFAULT_MAX_OUTER
    paths: Optional[int] = None
    principal_paths: Optional[int] = None
    adjoint_paths: int = DEFAULT_ADJOINT_PATHS
    seed: Optional[int] = None
    threads: int = 1
    max_substeps: int = MAX_SUBSTEPS
    forward: str = DEFAULT_FORWARD


@dataclass
class PrincipalReport:
    params: List[float]
    contracts: List[PenaltySpec]
    J: float
    J_se: float
    foc: Optional[FocResidual]
    value_v0: List[float]
    reservation_cost: float
    price_level: float
    trace: List[Dict] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)

    @property
    def reservation_gaps(self) -> List[float]:
        return [v - self.reservation_cost for v in self.value_v0]

    @property
    def reservation_satisfied(self) -> List[bool]:
        return [gap <= RESERVATION_TOL for gap in self.reservation_gaps]

    @property
    def admissible(self) -> bool:
        return all(self.reservation_satisfied)

    def trace_row(self, iteration: int, names: Sequence[str]) -> Dict:
        row = {'iteration': iteration}
        row.update(dict(zip(names, self.params)))
        row.update({
            'JP': self.J,
            'SE': self.J_se,
            'reservation_gap': max(self.reservation_gaps) if self.value_v0 else math.nan,
            'max_FOC_residual': self.foc.max_abs if self.foc is not None else math.nan,
        })
        return row

    def to_dict(self) -> Dict:
        return {
            'params': list(self.params),
            'contracts': [c.to_dict() for c in self.contracts],
            'JP': self.J,
            'JP_se': self.J_se,
            'price_level': self.price_level,
            'reservation': {
                'R_0': self.reservation_cost,
                'E_V0': list(self.value_v0),
                'satisfied': self.reservation_satisfied,
            },
            'foc_max_abs': self.foc.max_abs if self.foc is not None else None,
            'foc_residual_X': self.foc.residual_X.tolist() if self.foc is not None else None,
            'foc_residual_A': self.foc.residual_A.tolist() if self.foc is not None else None,
            'evaluations': len(self.trace),
            'flags': list(self.flags),
        }

    def save(self, out_dir: Path) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / 'principal_report.json'
        with open(report_path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        written = [report_path]
        if self.trace:
            trace_path = out_dir / 'optimization_trace.csv'
            pd.DataFrame(self.trace).to_csv(trace_path, index=False, float_format="%.17g")
            written.append(trace_path)
        return written


@dataclass(frozen=True)
class ContractFamily:
    """
    Parametric contract family. linear: one slope per sub-population;
    softplus_hockey: (P, R, epsilon) per sub-population. Intercepts are set
    afterwards by reservation_shift.
    """
    kind: str
    n_subpops: int
    bounds: Tuple[Tuple[float, float], ...]
    initial: Tuple[float, ...]

    def __post_init__(self):
        if self.kind not in ('linear', 'softplus_hockey'):
            raise ValueError(f"unknown contract family '{self.kind}'")
        width = self.n_subpops if self.kind == 'linear' else 3 * self.n_subpops
        if len(self.bounds) != width or len(self.initial) != width:
            raise ValueError(f"{self.kind} family over {self.n_subpops} sub-populations needs {width} parameters")
        for lo, hi in self.bounds:
            if lo > hi:
                raise ValueError("family bounds must satisfy lower <= upper")
        if self.kind == 'linear' and any(lo < 0 for lo, _ in self.bounds):
            raise ValueError("linear slopes must be bounded below by 0")
        if self.kind == 'softplus_hockey':
            for k in range(self.n_subpops):
                if self.bounds[3 * k][0] <= 0 or self.bounds[3 * k + 2][0] <= 0:
                    raise ValueError("softplus P and epsilon must be bounded below by a positive value")

    @property
    def names(self) -> List[str]:
        if self.kind == 'linear':
            return [f"slope_{k}" for k in range(self.n_subpops)]
        return [f"{name}_{k}" for k in range(self.n_subpops) for name in ('P', 'R', 'epsilon')]

    @property
    def is_degenerate(self) -> bool:
        return all(lo == hi for lo, hi in self.bounds)

    def clip(self, theta) -> np.ndarray:
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.clip(np.asarray(theta, dtype=float), lo, hi)

    def contracts(self, theta) -> List[PenaltySpec]:
        theta = self.clip(theta)
        if self.kind == 'linear':
            return [PenaltySpec.linear(slope) for slope in theta]
        return [PenaltySpec.softplus_hockey(*theta[3 * k:3 * k + 3]) for k in range(self.n_subpops)]

# ============================================================================
# REPRESENTATIVE-AGENT SAMPLES
# ============================================================================

def _representative_blocks(eq: MfgEquilibrium, k: int, paths: int, seed: int,
                           threads: int, record: bool):
    return Parallel(n_jobs=threads)(
        delayed(simulate_block)(eq.feedbacks[k], eq.config, seed, b, size,
                                record_paths=record, stream=PRINCIPAL_STREAM)
        for b, size in enumerate(block_sizes(paths))
    )


def terminal_samples(eq: MfgEquilibrium, paths: Optional[int] = None, seed: Optional[int] = None,
                     threads: int = 1) -> np.ndarray:
    """X_T of independent representative agents, shape (K, paths)"""
    paths = eq.config.mc_paths if paths is None else paths
    seed = eq.seed if seed is None else seed
    return np.stack([
        np.concatenate([res.terminal_X for res in _representative_blocks(eq, k, paths, seed, threads, False)])
        for k in range(eq.config.n_subpops)
    ])


def principal_argument(X_T: np.ndarray, contracts: Sequence[PenaltySpec], config: MarketConfig) -> np.ndarray:
    """sum_k pi_k (-C^k(X_T^k) - lambda_k X_T^k) per sample"""
    total = np.zeros(X_T.shape[1])
    for k, (params, contract) in enumerate(zip(config.subpopulations, contracts)):
        penalty, _, _ = contract.evaluate(X_T[k])
        total += params.pi * (-penalty - params.lambda_weight * X_T[k])
    return total

# ============================================================================
# OBJECTIVE AND ADJOINTS
# ============================================================================

def principal_objective(eq: MfgEquilibrium, contracts: Sequence[PenaltySpec], utility: UtilitySpec,
                        paths: Optional[int] = None, seed: Optional[int] = None,
                        threads: int = 1) -> Tuple[float, float]:
    """Monte Carlo J^P and its standard error"""
    X_T = terminal_samples(eq, paths, seed, threads)
    values, _ = utility.evaluate(principal_argument(X_T, contracts, eq.config))
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), se


def _quadratic_features(states: np.ndarray) -> np.ndarray:
    """[1, z_i, z_i z_j] for the stacked state columns"""
    n, d = states.shape
    columns = [np.ones(n)] + [states[:, i] for i in range(d)]
    columns += [states[:, i] * states[:, j] for i, j in combinations_with_replacement(range(d), 2)]
    return np.column_stack(columns)


def adjoint_closed_form(eq: MfgEquilibrium, contracts: Sequence[PenaltySpec], utility: UtilitySpec,
                        paths: int = DEFAULT_ADJOINT_PATHS, seed: Optional[int] = None,
                        threads: int = 1) -> AdjointState:
    config = eq.config
    seed = eq.seed if seed is None else seed
    n_k = config.n_subpops
    n_t = config.time_steps

    blocks = [_representative_blocks(eq, k, paths, seed, threads, True) for k in range(n_k)]
    X = np.stack([np.concatenate([b.paths['X'] for b in blocks[k]], axis=1) for k in range(n_k)])
    A = np.stack([np.concatenate([b.paths['A'] for b in blocks[k]], axis=1) for k in range(n_k)])
    YX = np.stack([np.concatenate([b.paths['YX'] for b in blocks[k]], axis=1) for k in range(n_k)])
    YA = np.stack([np.concatenate([b.paths['YA'] for b in blocks[k]], axis=1) for k in range(n_k)])

    _, marginal = utility.evaluate(principal_argument(X[:, -1, :], contracts, config))
    M_samples = np.empty((n_t + 1, paths))
    for n in range(n_t + 1):
        features = _quadratic_features(np.concatenate([X[:, n, :], A[:, n, :]]).T)
        coef, *_ = np.linalg.lstsq(features, marginal, rcond=None)
        M_samples[n] = features @ coef
    M_mean = M_samples.mean(axis=1)
    M_se = M_samples.std(axis=1, ddof=1) / math.sqrt(paths) if paths > 1 else np.zeros(n_t + 1)

    pis = np.array([p.pi for p in config.subpopulations])[:, np.newaxis]
    lambdas = np.array([p.lambda_weight for p in config.subpopulations])[:, np.newaxis]
    remaining = (config.horizon - config.t_grid)[np.newaxis, :]
    K_V = -pis * M_mean[np.newaxis, :]
    return AdjointState(t_grid=config.t_grid, M_mean=M_mean, M_se=M_se, M_samples=M_samples,
                        K_X=K_V * lambdas, K_V=K_V, K_A=K_V * lambdas * remaining,
                        L=np.zeros((n_k, n_t + 1)), YX_samples=YX, YA_samples=YA)


def foc_residual(eq: MfgEquilibrium, contracts: Sequence[PenaltySpec], utility: UtilitySpec,
                 adjoint: Optional[AdjointState] = None, method: str = 'analytic',
                 threads: int = 1) -> FocResidual:
    """
    Residuals of the principal's first-order conditions per (k, t).
    'analytic' uses population-mean Y fields and the mean of M;
    'monte_carlo' averages the pathwise expression and reports standard errors.
    """
    config = eq.config
    if adjoint is None:
        adjoint = adjoint_closed_form(eq, contracts, utility, threads=threads)
    weights = eta_weights(config)
    eta_k = np.asarray(weights.eta_k)[:, np.newaxis]
    upsilon = np.asarray(weights.upsilon_k)[:, np.newaxis]
    gammas = np.array([p.gamma for p in config.subpopulations])[:, np.newaxis]
    betas = np.array([p.beta for p in config.subpopulations])[:, np.newaxis]
    pis = np.array([p.pi for p in config.subpopulations])[:, np.newaxis]
    lambdas = np.array([p.lambda_weight for p in config.subpopulations])[:, np.newaxis]
    remaining = (config.horizon - config.t_grid)[np.newaxis, :]

    mean_YX = eq.flows.mean_YX
    mean_YA = eq.flows.mean_YA
    price_term = np.sum(eta_k / weights.eta * mean_YX, axis=0)
    coupling = (eta_k / weights.eta) * np.sum((adjoint.K_X + adjoint.K_V * price_term) / gammas,
                                              axis=0)[np.newaxis, :]
    L_V = adjoint.L

    if method == 'analytic':
        residual_X = (-upsilon * adjoint.K_X - upsilon * mean_YX * adjoint.K_V
                      + np.array([p.sigma for p in config.subpopulations])[:, np.newaxis] * L_V
                      + coupling)
        residual_A = (-adjoint.K_A - adjoint.K_V * mean_YA) / betas
        return FocResidual(residual_X, residual_A)

    if method != 'monte_carlo':
        raise ValueError(f"unknown FOC method '{method}'")

    M = adjoint.M_samples[np.newaxis, :, :]
    KX = -pis[:, :, np.newaxis] * M * lambdas[:, :, np.newaxis]
    KV = -pis[:, :, np.newaxis] * M
    KA = KX * remaining[:, :, np.newaxis]
    pathwise_X = -upsilon[:, :, np.newaxis] * KX - upsilon[:, :, np.newaxis] * adjoint.YX_samples * KV
    pathwise_A = (-KA - KV * adjoint.YA_samples) / betas[:, :, np.newaxis]
    n = pathwise_X.shape[-1]
    se_X = pathwise_X.std(axis=-1, ddof=1) / math.sqrt(n)
    se_A = pathwise_A.std(axis=-1, ddof=1) / math.sqrt(n)
    return FocResidual(pathwise_X.mean(axis=-1) + coupling, pathwise_A.mean(axis=-1), se_X, se_A)

# ============================================================================
# RESERVATION CONSTRAINT
# ============================================================================

def agent_value_v0(eq: MfgEquilibrium) -> List[float]:
    """E[V_0^(k)] = integral of V(0, x, 0) against the initial inventory law"""
    values = []
    for sol in eq.feedbacks:
        nodes, weights = sol.params.initial_inventory.quadrature()
        slice_0 = np.interp(nodes, sol.x_grid, sol.V[0, :, 0])
        values.append(float(np.dot(weights, slice_0)))
    return values


def reservation_shift(contracts: Sequence[PenaltySpec], eq: MfgEquilibrium,
                      reservation_cost: float) -> Tuple[List[PenaltySpec], List[float]]:
    """Intercept shifts making E[V_0^(k)] = R_0 bind for every k"""
    deltas = [reservation_cost - v for v in agent_value_v0(eq)]
    return [c.shifted(d) for c, d in zip(contracts, deltas)], deltas


def shift_equilibrium(eq: MfgEquilibrium, deltas: Sequence[float]) -> MfgEquilibrium:
    """Same fixed point with every contract intercept moved; only V changes"""
    feedbacks = [sol.shifted(d) for sol, d in zip(eq.feedbacks, deltas)]
    return replace(eq, feedbacks=feedbacks, penalties=[sol.penalty for sol in feedbacks])

# ============================================================================
# SUPPLEMENTARY CHECKS
# ============================================================================

def value_process_check(eq: MfgEquilibrium, k: int, paths: int = 4000,
                        seed: Optional[int] = None) -> Dict[str, float]:
    """
    Integrate dV = (-upsilon YX^2/2 - YA^2/(2 beta) + S^2/(2 gamma)) dt + sigma YX dW
    from V(0, X_0, 0) along simulated paths and compare V_T with C(X_T)
    """
    seed = eq.seed if seed is None else seed
    config = eq.config
    params = config.subpopulations[k]
    upsilon = 1.0 / params.gamma + 1.0 / params.zeta
    blocks = _representative_blocks(eq, k, paths, seed, 1, True)
    rec = {name: np.concatenate([b.paths[name] for b in blocks], axis=1)
           for name in ('X', 'YX', 'YA', 'V', 'dW')}
    S = eq.price.values[:-1, np.newaxis]
    YX, YA = rec['YX'][:-1], rec['YA'][:-1]
    drift = -0.5 * upsilon * YX ** 2 - YA ** 2 / (2 * params.beta) + S ** 2 / (2 * params.gamma)
    V_T = rec['V'][0] + np.sum(drift * config.dt + params.sigma * YX * rec['dW'], axis=0)
    terminal, _, _ = eq.penalties[k].evaluate(rec['X'][-1])
    gap = V_T - terminal
    return {
        'mean_gap': float(gap.mean()),
        'se_gap': float(gap.std(ddof=1) / math.sqrt(gap.size)) if gap.size > 1 else 0.0,
        'max_abs_gap': float(np.max(np.abs(gap))),
    }


def optimal_yx_map(ybar, config: MarketConfig, M: float = 1.0) -> np.ndarray:
    """
    Population means of YX implied by the first-order conditions:
    Y_k <- -lambda_k + (eta_k/eta) M (sum eta lambda + sum eta Y) / (upsilon_k pi_k M)
    """
    weights = eta_weights(config)
    eta_k = np.asarray(weights.eta_k)
    upsilon = np.asarray(weights.upsilon_k)
    pis = np.array([p.pi for p in config.subpopulations])
    lambdas = np.array([p.lambda_weight for p in config.subpopulations])
    ybar = np.asarray(ybar, dtype=float)
    imbalance = np.dot(eta_k, lambdas) + np.dot(eta_k, ybar)
    return -lambdas + (eta_k / weights.eta) * M * imbalance / (upsilon * pis * M)


def iterate_optimal_yx(config: MarketConfig, y0, M: float = 1.0, tol: float = 1e-12,
                       max_iter: int = 1000) -> Tuple[np.ndarray, int, bool]:
    """Fixed-point iteration of optimal_yx_map; reports whether it lands on -lambda"""
    y = np.asarray(y0, dtype=float)
    lambdas = np.array([p.lambda_weight for p in config.subpopulations])
    for iteration in range(1, max_iter + 1):
        y_new = optimal_yx_map(y, config, M)
        if np.max(np.abs(y_new - y)) < tol:
            return y_new, iteration, bool(np.allclose(y_new, -lambdas, atol=1e-9))
        y = y_new
    return y, max_iter, bool(np.allclose(y, -lambdas, atol=1e-9))

# ============================================================================
# CONTRACT SEARCH
# ============================================================================

def evaluate_member(family: ContractFamily, theta, config: MarketConfig, utility: UtilitySpec,
                    settings: EvaluationSettings, with_foc: bool = True) -> PrincipalReport:
    """solve_equilibrium -> reservation_shift -> principal_objective for one family member"""
    theta = family.clip(theta)
    contracts = family.contracts(theta)
    eq = solve_equilibrium(config, contracts, damping=settings.damping, tol=settings.tol,
                           max_outer=settings.max_outer, paths=settings.paths, seed=settings.seed,
                           threads=settings.threads, max_substeps=settings.max_substeps,
                           forward=settings.forward)
    shifted, deltas = reservation_shift(contracts, eq, config.reservation_cost)
    eq = shift_equilibrium(eq, deltas)
    J, se = principal_objective(eq, shifted, utility, settings.principal_paths, settings.seed,
                                settings.threads)
    foc = None
    if with_foc:
        adjoint = adjoint_closed_form(eq, shifted, utility, settings.adjoint_paths, settings.seed,
                                      settings.threads)
        foc = foc_residual(eq, shifted, utility, adjoint)
    return PrincipalReport(params=theta.tolist(), contracts=shifted, J=J, J_se=se, foc=foc,
                           value_v0=agent_value_v0(eq), reservation_cost=config.reservation_cost,
                           price_level=float(eq.price.values.mean()), flags=list(eq.flags))


def evaluate_family(family: ContractFamily, thetas: Sequence[Sequence[float]], config: MarketConfig,
                 utility: UtilitySpec, settings: Optional[EvaluationSettings] = None,
                 threads: int = 1) -> List[PrincipalReport]:
    """Evaluate explicit family members in parallel; reports follow the order of thetas"""
    settings = settings or EvaluationSettings()
    inner = replace(settings, threads=1)
    return Parallel(n_jobs=threads)(
        delayed(evaluate_member)(family, theta, config, utility, inner, False) for theta in thetas
    )


class _BudgetStop(Exception):
    pass


def optimize_contract(family: ContractFamily, config: MarketConfig, utility: UtilitySpec,
                      budget: int, settings: Optional[EvaluationSettings] = None,
                      verbose: bool = False) -> PrincipalReport:
    """Nelder-Mead over the family; raises BudgetExhausted carrying the best member so far"""
    settings = settings or EvaluationSettings()
    names = family.names
    trace: List[Dict] = []
    best: List[PrincipalReport] = []

    def record(report: PrincipalReport):
        trace.append(report.trace_row(len(trace) + 1, names))
        if not best or report.J < best[0].J:
            best[:] = [report]

    def objective(theta) -> float:
        if len(trace) >= budget:
            raise _BudgetStop()
        try:
            report = evaluate_member(family, theta, config, utility, settings)
        except RecMarketError as e:
            if verbose:
                print(f"   ⚠️  Evaluation {len(trace) + 1} failed: {e}")
            trace.append({'iteration': len(trace) + 1, **dict(zip(names, family.clip(theta))),
                          'JP': math.inf, 'SE': math.nan, 'reservation_gap': math.nan,
                          'max_FOC_residual': math.nan})
            return math.inf
        record(report)
        if verbose:
            print(f"   Evaluation {len(trace)}: JP = {report.J:.6f} ± {report.J_se:.2e}")
        return report.J

    def finish() -> PrincipalReport:
        if not best:
            raise RecMarketError("no contract in the family could be evaluated")
        best[0].trace = trace
        return best[0]

    if family.is_degenerate:
        objective(np.array(family.initial))
        return finish()

    exhausted = False
    try:
        result = minimize(objective, family.clip(family.initial), method='Nelder-Mead',
                          bounds=family.bounds,
                          options={'maxfev': budget, 'xatol': NELDER_MEAD_XATOL,
                                   'fatol': NELDER_MEAD_FATOL})
        exhausted = not result.success
    except _BudgetStop:
        exhausted = True

    report = finish()
    if exhausted:
        raise BudgetExhausted(f"contract search used its budget of {budget} equilibrium solves", report)
    return report
