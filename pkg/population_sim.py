#!/usr/bin/env python3
"""
Finite Population Simulation
Runs N agents under the mean-field feedback controls at the equilibrium price
and measures how far the finite market is from the mean-field limit:
clearing residual, empirical distributions, realized costs and unilateral
deviation gains.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import wasserstein_distance

from hjb_solver import feedback_controls, running_cost
from mfg_equilibrium import (
    MfgEquilibrium,
    block_generator,
    block_sizes,
    simulate_block,
)
from model_core import PenaltySpec, SubPopulationParams

POPULATION_STREAM = 1
DEVIATION_STREAM = 2
ASSIGNMENT_STREAM = 3
DUMP_ROW_LIMIT = 10_000_000
DEFAULT_DEVIATION_REPS = 256
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
PATH_FIELDS = ('X', 'A', 'YX', 'YA', 'V', 'g', 'Gamma', 'alpha')

# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class PopulationRun:
    """Agent paths on the time grid; agents are ordered by sub-population"""
    N: int
    seed: int
    assignment: str
    t_grid: np.ndarray
    price: np.ndarray
    k_of_agent: np.ndarray
    paths: Dict[str, np.ndarray]
    escape_fraction: float
    flags: List[str] = field(default_factory=list)

    @property
    def counts(self) -> List[int]:
        return np.bincount(self.k_of_agent).tolist()

    @property
    def clearing(self) -> np.ndarray:
        """(1/N) sum_i Gamma_t^i"""
        return self.paths['Gamma'].mean(axis=1)

    def summary(self) -> Dict:
        clearing = self.clearing
        return {
            'N': self.N,
            'seed': self.seed,
            'assignment': self.assignment,
            'counts': self.counts,
            'max_clearing_residual': float(np.max(np.abs(clearing))),
            'clearing_residual': clearing.tolist(),
            'mean_X_T': float(self.paths['X'][-1].mean()),
            'var_X_T': float(self.paths['X'][-1].var()),
            'escape_fraction': self.escape_fraction,
            'flags': list(self.flags),
        }

    def path_frame(self) -> pd.DataFrame:
        n_t1, n = self.paths['X'].shape
        if n_t1 * n > DUMP_ROW_LIMIT:
            raise ValueError(f"path dump would write {n_t1 * n} rows (limit {DUMP_ROW_LIMIT})")
        return pd.DataFrame({
            't': np.repeat(self.t_grid, n),
            'agent': np.tile(np.arange(n), n_t1),
            'k': np.tile(self.k_of_agent, n_t1),
            'X': self.paths['X'].ravel(),
            'A': self.paths['A'].ravel(),
            'g': self.paths['g'].ravel(),
            'Gamma': self.paths['Gamma'].ravel(),
            'alpha': self.paths['alpha'].ravel(),
        })

    def save(self, out_dir: Path) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_path = out_dir / 'summary.json'
        with open(summary_path, 'w') as f:
            json.dump(self.summary(), f, indent=2)
        return [summary_path]

    def save_paths(self, out_dir: Path) -> Path:
        """Full path dump; refuses above DUMP_ROW_LIMIT rows"""
        frame = self.path_frame()
        paths_path = Path(out_dir) / 'paths.csv'
        frame.to_csv(paths_path, index=False, float_format="%.17g")
        return paths_path


@dataclass
class DeviationReport:
    agent: int
    k: int
    delta: Tuple[float, float, float]
    baseline_cost: float
    deviated_cost: float
    gain: float
    gain_se: float
    reps: int

    @property
    def confidence_interval(self) -> Tuple[float, float]:
        return self.gain - 1.96 * self.gain_se, self.gain + 1.96 * self.gain_se

    def to_dict(self) -> Dict:
        low, high = self.confidence_interval
        return {
            'agent': self.agent, 'k': self.k, 'delta': list(self.delta),
            'baseline_cost': self.baseline_cost, 'deviated_cost': self.deviated_cost,
            'gain': self.gain, 'gain_se': self.gain_se, 'ci_95': [low, high], 'reps': self.reps,
        }

# ============================================================================
# SIMULATION
# ============================================================================

def assign_counts(N: int, pis: Sequence[float], seed: int, multinomial: bool = False) -> List[int]:
    """Agents per sub-population: largest-remainder rounding of N*pi, or a multinomial draw"""
    pis = np.asarray(pis, dtype=float)
    if multinomial:
        rng = block_generator(seed, 0, 0, ASSIGNMENT_STREAM)
        return rng.multinomial(N, pis / pis.sum()).tolist()
    raw = N * pis
    counts = np.floor(raw).astype(int)
    remainder = N - counts.sum()
    order = np.argsort(-(raw - counts), kind='stable')
    counts[order[:remainder]] += 1
    return counts.tolist()


def simulate_population(eq: MfgEquilibrium, N: int, seed: Optional[int] = None,
                        multinomial: bool = False, threads: int = 1,
                        verbose: bool = False) -> PopulationRun:
    """N agents under the equilibrium feedback controls and price"""
    seed = eq.seed if seed is None else seed
    config = eq.config
    counts = assign_counts(N, [p.pi for p in config.subpopulations], seed, multinomial)

    jobs = [(k, b, size) for k, n_k in enumerate(counts) for b, size in enumerate(block_sizes(n_k))]
    results = Parallel(n_jobs=threads)(
        delayed(simulate_block)(eq.feedbacks[k], config, seed, b, size,
                                record_paths=True, stream=POPULATION_STREAM)
        for k, b, size in jobs
    )

    paths = {name: np.concatenate([res.paths[name] for res in results], axis=1)
             for name in PATH_FIELDS + ('dW',)}
    k_of_agent = np.concatenate([np.full(res.n_paths, res.k) for res in results]).astype(int)
    escape_fraction = sum(res.escaped for res in results) / N

    flags = []
    if escape_fraction > 0.01:
        flags.append(f"PathEscape: {escape_fraction:.2%} of agents clamped at the grid boundary")
    if verbose:
        print(f"   ✓ Simulated {N} agents (counts {counts})")

    return PopulationRun(N=N, seed=seed, assignment='multinomial' if multinomial else 'exact',
                         t_grid=config.t_grid, price=eq.price.values, k_of_agent=k_of_agent,
                         paths=paths, escape_fraction=escape_fraction, flags=flags)

# ============================================================================
# COSTS
# ============================================================================

def trapezoid_weights(n_nodes: int, dt: float) -> np.ndarray:
    weights = np.full(n_nodes, dt)
    weights[[0, -1]] = 0.5 * dt
    return weights


def path_cost(dt: float, g, trade, alpha, price, X_T, params: SubPopulationParams,
              penalty: PenaltySpec) -> np.ndarray:
    """
    Trapezoidal running cost plus terminal penalty. Control arrays are
    (Nt+1,) or (Nt+1, n_paths); price is (Nt+1,).
    """
    g = np.asarray(g, dtype=float)
    price = np.asarray(price, dtype=float)
    if g.ndim == 2:
        price = price[:, np.newaxis]
    integrand = running_cost(g, np.asarray(trade, dtype=float), np.asarray(alpha, dtype=float),
                             price, params)
    weights = trapezoid_weights(g.shape[0], dt)
    if g.ndim == 2:
        weights = weights[:, np.newaxis]
    terminal, _, _ = penalty.evaluate(X_T)
    return np.sum(weights * integrand, axis=0) + terminal


def realized_cost(eq: MfgEquilibrium, run: PopulationRun, agent: int) -> float:
    k = int(run.k_of_agent[agent])
    return float(path_cost(eq.config.dt, run.paths['g'][:, agent], run.paths['Gamma'][:, agent],
                           run.paths['alpha'][:, agent], run.price, run.paths['X'][-1, agent],
                           eq.config.subpopulations[k], eq.penalties[k]))


def realized_costs(eq: MfgEquilibrium, run: PopulationRun) -> np.ndarray:
    """Realized cost of every agent"""
    costs = np.empty(run.N)
    for k, params in enumerate(eq.config.subpopulations):
        members = run.k_of_agent == k
        if not members.any():
            continue
        costs[members] = path_cost(eq.config.dt, run.paths['g'][:, members],
                                   run.paths['Gamma'][:, members], run.paths['alpha'][:, members],
                                   run.price, run.paths['X'][-1, members], params, eq.penalties[k])
    return costs

# ============================================================================
# DEVIATIONS
# ============================================================================

def _replicate_cost(eq: MfgEquilibrium, k: int, x0: float, dW: np.ndarray,
                    delta: Tuple[float, float, float]) -> np.ndarray:
    """Cost of n_reps copies of one agent from x0 driven by dW (Nt, n_reps), controls shifted by delta"""
    config = eq.config
    feedback = eq.feedbacks[k]
    params = config.subpopulations[k]
    n_t, reps = dW.shape
    dt = config.dt
    h = params.baseline_on_grid(n_t)
    S = eq.price.values
    X = np.full(reps, float(x0))
    A = np.zeros(reps)
    controls = np.empty((3, n_t + 1, reps))
    for n in range(n_t + 1):
        YX, YA, _, _ = feedback.evaluate_at_step(n, X, A)
        g, trade, alpha = feedback_controls(YX, YA, S[n], params)
        g, trade, alpha = g + delta[0], trade + delta[1], alpha + delta[2]
        controls[:, n] = g, trade, alpha
        if n == n_t:
            break
        X = X + (h[n] + g + trade + A) * dt + params.sigma * dW[n]
        A = A + alpha * dt
    return path_cost(dt, controls[0], controls[1], controls[2], S, X, params, eq.penalties[k])


def nash_deviation_gain(eq: MfgEquilibrium, run: PopulationRun, agent: int,
                        delta: Tuple[float, float, float] = (0.0, 0.0, 0.0),
                        reps: int = DEFAULT_DEVIATION_REPS) -> DeviationReport:
    """
    Gain J - J' of agent i switching to controls shifted by delta, price
    held fixed. Baseline and deviation share the same noise replications.
    """
    k = int(run.k_of_agent[agent])
    x0 = run.paths['X'][0, agent]
    rng = block_generator(run.seed, k, agent, DEVIATION_STREAM)
    dW = math.sqrt(eq.config.dt) * rng.standard_normal((eq.config.time_steps, reps))

    baseline = _replicate_cost(eq, k, x0, dW, (0.0, 0.0, 0.0))
    deviated = _replicate_cost(eq, k, x0, dW, tuple(float(d) for d in delta))
    gains = baseline - deviated
    gain_se = float(gains.std(ddof=1) / math.sqrt(reps)) if reps > 1 else 0.0
    return DeviationReport(agent=agent, k=k, delta=tuple(float(d) for d in delta),
                           baseline_cost=float(baseline.mean()), deviated_cost=float(deviated.mean()),
                           gain=float(gains.mean()), gain_se=gain_se, reps=reps)

# ============================================================================
# EMPIRICAL MEASURES
# ============================================================================

def mean_field_terminal_sample(eq: MfgEquilibrium, k: int, paths: Optional[int] = None,
                               threads: int = 1) -> np.ndarray:
    """X_T of the mean-field Monte Carlo population of sub-population k"""
    paths = eq.config.mc_paths if paths is None else paths
    results = Parallel(n_jobs=threads)(
        delayed(simulate_block)(eq.feedbacks[k], eq.config, eq.seed, b, size)
        for b, size in enumerate(block_sizes(paths))
    )
    return np.concatenate([res.terminal_X for res in results])


def _describe(values: np.ndarray) -> Dict:
    return {
        'mean': float(values.mean()),
        'var': float(values.var()),
        'quantiles': dict(zip([str(q) for q in QUANTILES], np.quantile(values, QUANTILES).tolist())),
    }


def empirical_measures(eq: MfgEquilibrium, run: PopulationRun, t: float,
                       reference_paths: Optional[int] = None, threads: int = 1) -> Dict[int, Dict]:
    """
    Cross-sectional summaries of X_t and A_t per sub-population, and the
    1-Wasserstein distance between the empirical and mean-field X_T samples
    """
    n = int(round(t / eq.config.dt))
    n = min(max(n, 0), eq.config.time_steps)
    summary = {}
    for k in range(eq.config.n_subpops):
        members = run.k_of_agent == k
        if not members.any():
            continue
        reference = mean_field_terminal_sample(eq, k, reference_paths, threads)
        summary[k] = {
            't': float(run.t_grid[n]),
            'X': _describe(run.paths['X'][n, members]),
            'A': _describe(run.paths['A'][n, members]),
            'wasserstein_X_T': float(wasserstein_distance(run.paths['X'][-1, members], reference)),
        }
    return summary
