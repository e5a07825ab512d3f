#!/usr/bin/env python3
"""
Mean-Field Equilibrium
Closes the loop between the agents' backward solves and the forward
population: iterate the price path until the price implied by the agents'
adjoints reproduces the input price, i.e. the market clears. The forward
pass pushes a grid density with the transpose of the backward step
('density') or simulates representative agents ('monte_carlo').
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from hjb_solver import (
    MAX_SUBSTEPS,
    FeedbackSolution,
    PricePath,
    feedback_controls,
    solve_backward,
)
from model_core import (
    EtaWeights,
    InadmissibleContract,
    MarketConfig,
    MaxIterations,
    NonConvergence,
    PenaltySpec,
    admissibility_check,
    eta_weights,
    validate_penalty,
)

BLOCK_SIZE = 4096
ESCAPE_WARN_FRACTION = 0.01
MEAN_FIELD_STREAM = 0
DEFAULT_DAMPING = 0.5
DEFAULT_TOL = 1e-6
DEFAULT_MAX_OUTER = 100
ZERO_DRIFT_TOL = 1e-9
FORWARD_METHODS = ('density', 'monte_carlo')
DEFAULT_FORWARD = 'density'

FLOW_FIELDS = ('YX', 'YA', 'Gamma', 'X', 'A')

# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class BlockResult:
    """Per-time moments of one block of paths; optional raw paths"""
    k: int
    block: int
    n_paths: int
    means: Dict[str, np.ndarray]
    m2: Dict[str, np.ndarray]
    escaped: int
    terminal_X: Optional[np.ndarray] = None
    terminal_A: Optional[np.ndarray] = None
    mass: Optional[np.ndarray] = None
    paths: Optional[Dict[str, np.ndarray]] = None


@dataclass
class MeanFieldFlows:
    """Moment flows of each sub-population on the time grid, arrays of shape (K, Nt+1)"""
    t_grid: np.ndarray
    n_paths: int
    mean_YX: np.ndarray
    se_YX: np.ndarray
    mean_YA: np.ndarray
    mean_Gamma: np.ndarray
    se_Gamma: np.ndarray
    mean_X: np.ndarray
    var_X: np.ndarray
    mean_A: np.ndarray
    var_A: np.ndarray
    escape_fraction: np.ndarray
    markov_YX: Optional[np.ndarray] = None
    method: str = 'monte_carlo'

    @property
    def n_subpops(self) -> int:
        return self.mean_YX.shape[0]

    def escape_flags(self) -> List[str]:
        what = 'of paths clamped' if self.method == 'monte_carlo' else 'of the mass'
        return [f"PathEscape: sub-population {k} has {frac:.2%} {what} at the grid boundary"
                for k, frac in enumerate(self.escape_fraction) if frac > ESCAPE_WARN_FRACTION]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for k in range(self.n_subpops):
            rows.append(pd.DataFrame({
                't': self.t_grid,
                'k': k,
                'mean_YX': self.mean_YX[k],
                'se_YX': self.se_YX[k],
                'mean_Gamma': self.mean_Gamma[k],
                'mean_X': self.mean_X[k],
                'var_X': self.var_X[k],
                'mean_A': self.mean_A[k],
                'var_A': self.var_A[k],
            }))
        return pd.concat(rows, ignore_index=True)


@dataclass
class ClearingProfile:
    values: np.ndarray
    max_abs: float


@dataclass
class MfgEquilibrium:
    price: PricePath
    feedbacks: List[FeedbackSolution]
    flows: MeanFieldFlows
    iterations: int
    final_update_norm: float
    history: List[float]
    config: MarketConfig
    penalties: List[PenaltySpec]
    seed: int
    flags: List[str] = field(default_factory=list)

    @property
    def clearing(self) -> ClearingProfile:
        return clearing_residual(self)

    def summary(self) -> Dict:
        clearing = self.clearing
        return {
            'price': self.price.values.tolist(),
            'iterations': self.iterations,
            'final_update_norm': self.final_update_norm,
            'residual_history': list(self.history),
            'clearing_residual': clearing.values.tolist(),
            'max_clearing_residual': clearing.max_abs,
            'forward': self.flows.method,
            'escape_fraction': self.flows.escape_fraction.tolist(),
            'penalties': [p.to_dict() for p in self.penalties],
            'flags': list(self.flags),
        }

    def save(self, out_dir: Path, with_feedbacks: bool = False) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_path = out_dir / 'equilibrium.json'
        flows_path = out_dir / 'flows.csv'
        with open(summary_path, 'w') as f:
            json.dump(self.summary(), f, indent=2)
        self.flows.to_frame().to_csv(flows_path, index=False, float_format="%.17g")
        written = [summary_path, flows_path]
        if with_feedbacks:
            for sol in self.feedbacks:
                written.extend(sol.save(out_dir, f"feedback_k{sol.k}"))
        return written

# ============================================================================
# MONTE CARLO KERNEL
# ============================================================================

def block_generator(seed: int, k: int, block: int, stream: int = MEAN_FIELD_STREAM) -> np.random.Generator:
    """Counter-based stream keyed by (seed, sub-population, block, stream)"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k, block, stream])))


def block_sizes(n_paths: int, block_size: int = BLOCK_SIZE) -> List[int]:
    full, rest = divmod(n_paths, block_size)
    return [block_size] * full + ([rest] if rest else [])


def _deposit(mass: np.ndarray, x_grid: np.ndarray, a_grid: np.ndarray, X: np.ndarray, A: np.ndarray,
             weights: Optional[np.ndarray] = None):
    """Cloud-in-cell deposit of the particles onto the (x, a) nodes; unit weights by default"""
    weights = np.ones_like(X) if weights is None else np.asarray(weights, dtype=float)
    dx = x_grid[1] - x_grid[0]
    da = a_grid[1] - a_grid[0]
    xc = np.clip(X, x_grid[0], x_grid[-1])
    ac = np.clip(A, a_grid[0], a_grid[-1])
    ix = np.clip(((xc - x_grid[0]) // dx).astype(int), 0, x_grid.size - 2)
    ia = np.clip(((ac - a_grid[0]) // da).astype(int), 0, a_grid.size - 2)
    fx = (xc - x_grid[ix]) / dx
    fa = (ac - a_grid[ia]) / da
    np.add.at(mass, (ix, ia), weights * (1 - fx) * (1 - fa))
    np.add.at(mass, (ix + 1, ia), weights * fx * (1 - fa))
    np.add.at(mass, (ix, ia + 1), weights * (1 - fx) * fa)
    np.add.at(mass, (ix + 1, ia + 1), weights * fx * fa)


def simulate_block(feedback: FeedbackSolution, config: MarketConfig, seed: int, block: int,
                   n_paths: int, initial_x: Optional[np.ndarray] = None,
                   deposit_mass: bool = False, record_paths: bool = False,
                   stream: int = MEAN_FIELD_STREAM) -> BlockResult:
    """Euler-Maruyama for (X, A) of one sub-population under its feedback controls"""
    params = feedback.params
    n_t = config.time_steps
    dt = config.dt
    rng = block_generator(seed, feedback.k, block, stream)
    h = params.baseline_on_grid(n_t)
    S = feedback.price.values

    if initial_x is None:
        X = params.initial_inventory.sample(rng, n_paths)
    else:
        X = np.array(initial_x, dtype=float)
    A = np.zeros(n_paths)
    escaped = np.zeros(n_paths, dtype=bool)

    means = {name: np.empty(n_t + 1) for name in FLOW_FIELDS}
    m2 = {name: np.empty(n_t + 1) for name in FLOW_FIELDS}
    mass = np.zeros((n_t + 1, feedback.x_grid.size, feedback.a_grid.size)) if deposit_mass else None
    paths = None
    if record_paths:
        paths = {name: np.empty((n_t + 1, n_paths)) for name in ('X', 'A', 'YX', 'YA', 'V', 'g', 'Gamma', 'alpha')}
        paths['dW'] = np.zeros((n_t, n_paths))

    for n in range(n_t + 1):
        YX, YA, V, clamped = feedback.evaluate_at_step(n, X, A)
        escaped |= clamped
        g, trade, alpha = feedback_controls(YX, YA, S[n], params)

        for name, values in (('YX', YX), ('YA', YA), ('Gamma', trade), ('X', X), ('A', A)):
            mean = values.mean()
            means[name][n] = mean
            m2[name][n] = np.sum((values - mean) ** 2)
        if deposit_mass:
            _deposit(mass[n], feedback.x_grid, feedback.a_grid, X, A)
        if record_paths:
            for name, values in (('X', X), ('A', A), ('YX', YX), ('YA', YA), ('V', V),
                                 ('g', g), ('Gamma', trade), ('alpha', alpha)):
                paths[name][n] = values

        if n == n_t:
            break
        dW = math.sqrt(dt) * rng.standard_normal(n_paths)
        if record_paths:
            paths['dW'][n] = dW
        X = X + (h[n] + g + trade + A) * dt + params.sigma * dW
        A = A + alpha * dt

    return BlockResult(k=feedback.k, block=block, n_paths=n_paths, means=means, m2=m2,
                       escaped=int(escaped.sum()), terminal_X=X, terminal_A=A,
                       mass=mass, paths=paths)


def merge_blocks(results: Sequence[BlockResult]):
    """Pairwise moment merge in the given (fixed) order"""
    first = results[0]
    count = first.n_paths
    means = {name: first.means[name].copy() for name in FLOW_FIELDS}
    m2 = {name: first.m2[name].copy() for name in FLOW_FIELDS}
    escaped = first.escaped
    mass = first.mass.copy() if first.mass is not None else None
    for res in results[1:]:
        total = count + res.n_paths
        for name in FLOW_FIELDS:
            delta = res.means[name] - means[name]
            means[name] = means[name] + delta * res.n_paths / total
            m2[name] = m2[name] + res.m2[name] + delta ** 2 * count * res.n_paths / total
        escaped += res.escaped
        if mass is not None:
            mass += res.mass
        count = total
    return count, means, m2, escaped, mass

# ============================================================================
# FORWARD PASS AND PRICE UPDATE
# ============================================================================

def forward_mean_field(feedbacks: Sequence[FeedbackSolution], price: PricePath, config: MarketConfig,
                       paths: Optional[int] = None, seed: Optional[int] = None, threads: int = 1,
                       deposit_mass: bool = False) -> MeanFieldFlows:
    """Monte Carlo moment flows; results do not depend on `threads`"""
    paths = config.mc_paths if paths is None else paths
    seed = config.rng_seed if seed is None else seed
    for sol in feedbacks:
        if not np.array_equal(sol.price.values, price.values):
            raise ValueError(f"feedback for sub-population {sol.k} was solved under a different price")

    sizes = block_sizes(paths)
    jobs = [(sol, b, size) for sol in feedbacks for b, size in enumerate(sizes)]
    results = Parallel(n_jobs=threads)(
        delayed(simulate_block)(sol, config, seed, b, size, deposit_mass=deposit_mass)
        for sol, b, size in jobs
    )

    n_k = len(feedbacks)
    shape = (n_k, config.time_steps + 1)
    out = {name: np.empty(shape) for name in
           ('mean_YX', 'se_YX', 'mean_YA', 'mean_Gamma', 'se_Gamma', 'mean_X', 'var_X', 'mean_A', 'var_A')}
    escape = np.empty(n_k)
    markov = np.empty(shape) if deposit_mass else None

    per_k = len(sizes)
    for k in range(n_k):
        count, means, m2, escaped, mass = merge_blocks(results[k * per_k:(k + 1) * per_k])
        ddof = max(count - 1, 1)
        out['mean_YX'][k] = means['YX']
        out['se_YX'][k] = np.sqrt(np.maximum(m2['YX'], 0.0) / ddof / count)
        out['mean_YA'][k] = means['YA']
        out['mean_Gamma'][k] = means['Gamma']
        out['se_Gamma'][k] = np.sqrt(np.maximum(m2['Gamma'], 0.0) / ddof / count)
        out['mean_X'][k] = means['X']
        out['var_X'][k] = m2['X'] / count
        out['mean_A'][k] = means['A']
        out['var_A'][k] = m2['A'] / count
        escape[k] = escaped / count
        if deposit_mass:
            field_YX = feedbacks[k].YX
            markov[k] = np.einsum('nij,nij->n', field_YX, mass) / count

    return MeanFieldFlows(t_grid=config.t_grid, n_paths=paths, escape_fraction=escape,
                          markov_YX=markov, **out)


def _density_moments(feedback: FeedbackSolution, config: MarketConfig) -> Dict[str, np.ndarray]:
    """Push one sub-population's grid density forward with the transposed backward steps"""
    params = feedback.params
    x, a = feedback.x_grid, feedback.a_grid
    n_t = config.time_steps
    X_nodes = np.broadcast_to(x[:, np.newaxis], (x.size, a.size))
    A_nodes = np.broadcast_to(a[np.newaxis, :], (x.size, a.size))
    S = feedback.price.values

    nodes, weights = params.initial_inventory.quadrature()
    mass = np.zeros((x.size, a.size))
    _deposit(mass, x, a, nodes, np.zeros_like(nodes), weights)
    mass = mass.ravel()

    out = {name: np.empty(n_t + 1) for name in
           ('mean_YX', 'mean_YA', 'mean_Gamma', 'mean_X', 'var_X', 'mean_A', 'var_A')}
    boundary = np.zeros((x.size, a.size), dtype=bool)
    boundary[[0, -1], :] = True
    boundary[:, -1] = True
    escape = 0.0
    sweep = feedback.sweep()

    for n in range(n_t + 1):
        m = mass.reshape(x.size, a.size)
        _, trade, _ = feedback_controls(feedback.YX[n], feedback.YA[n], S[n], params)
        out['mean_YX'][n] = np.sum(m * feedback.YX[n])
        out['mean_YA'][n] = np.sum(m * feedback.YA[n])
        out['mean_Gamma'][n] = np.sum(m * trade)
        out['mean_X'][n] = np.sum(m * X_nodes)
        out['mean_A'][n] = np.sum(m * A_nodes)
        out['var_X'][n] = max(np.sum(m * X_nodes ** 2) - out['mean_X'][n] ** 2, 0.0)
        out['var_A'][n] = max(np.sum(m * A_nodes ** 2) - out['mean_A'][n] ** 2, 0.0)
        escape = max(escape, float(np.sum(np.abs(m[boundary]))))
        if n == n_t:
            break
        mass = sweep.push_density(feedback.stacked(n + 1), n, feedback.stats['substeps'][n], mass)
        if not np.all(np.isfinite(mass)):
            raise NonConvergence(f"sub-population {feedback.k}: non-finite density at t={config.t_grid[n + 1]:.4g}")

    out['escape'] = escape
    return out


def density_mean_field(feedbacks: Sequence[FeedbackSolution], price: PricePath, config: MarketConfig,
                       threads: int = 1) -> MeanFieldFlows:
    """
    Moment flows from the population density. Because the density moves by the
    exact transpose of the backward step, E_m[YX] is constant in time.
    """
    for sol in feedbacks:
        if not np.array_equal(sol.price.values, price.values):
            raise ValueError(f"feedback for sub-population {sol.k} was solved under a different price")

    results = Parallel(n_jobs=threads)(delayed(_density_moments)(sol, config) for sol in feedbacks)
    stacked = {name: np.array([res[name] for res in results]) for name in results[0] if name != 'escape'}
    zeros = np.zeros_like(stacked['mean_YX'])
    return MeanFieldFlows(t_grid=config.t_grid, n_paths=0, se_YX=zeros, se_Gamma=zeros.copy(),
                          escape_fraction=np.array([res['escape'] for res in results]),
                          markov_YX=stacked['mean_YX'].copy(), method='density', **stacked)


def mean_field_flows(feedbacks: Sequence[FeedbackSolution], price: PricePath, config: MarketConfig,
                     forward: str = DEFAULT_FORWARD, paths: Optional[int] = None,
                     seed: Optional[int] = None, threads: int = 1) -> MeanFieldFlows:
    if forward == 'density':
        return density_mean_field(feedbacks, price, config, threads)
    if forward == 'monte_carlo':
        return forward_mean_field(feedbacks, price, config, paths, seed, threads)
    raise ValueError(f"unknown forward method '{forward}'; expected one of {FORWARD_METHODS}")


def update_price(flows: MeanFieldFlows, weights: EtaWeights) -> PricePath:
    """S_t = -sum_k eta_k E[YX_k(t)] / eta"""
    eta_k = np.asarray(weights.eta_k)[:, np.newaxis]
    return PricePath(-np.sum(eta_k * flows.mean_YX, axis=0) / weights.eta)


def clearing_residual(eq: MfgEquilibrium) -> ClearingProfile:
    """sum_k pi_k E[Gamma_k(t)] per time node"""
    pi = np.array([p.pi for p in eq.config.subpopulations])[:, np.newaxis]
    values = np.sum(pi * eq.flows.mean_Gamma, axis=0)
    return ClearingProfile(values=values, max_abs=float(np.max(np.abs(values))))

# ============================================================================
# FIXED POINT
# ============================================================================

def check_penalties(config: MarketConfig, penalties: Sequence[PenaltySpec]) -> List[str]:
    """Raise for inadmissible non-quadratic contracts; quadratic ones only warn"""
    if len(penalties) != config.n_subpops:
        raise ValueError(f"{len(penalties)} penalties given for {config.n_subpops} sub-populations")
    flags = []
    for k, spec in enumerate(penalties):
        violations = validate_penalty(spec, f"penalties[{k}]")
        if violations:
            raise InadmissibleContract('; '.join(str(v) for v in violations))
        report = admissibility_check(spec, config.x_grid)
        if spec.kind == 'quadratic':
            flags.extend(f"penalties[{k}]: {note}" for note in report.notes)
        elif not report.admissible:
            raise InadmissibleContract(f"penalties[{k}]: " + '; '.join(report.notes))
    return flags


def solve_feedbacks(config: MarketConfig, penalties: Sequence[PenaltySpec], price: PricePath,
                    threads: int = 1, max_substeps: int = MAX_SUBSTEPS) -> List[FeedbackSolution]:
    return Parallel(n_jobs=threads)(
        delayed(solve_backward)(params, penalties[k], price, config, k, max_substeps)
        for k, params in enumerate(config.subpopulations)
    )


def initial_price_guess(config: MarketConfig) -> PricePath:
    weights = eta_weights(config)
    level = sum(e * p.lambda_weight for e, p in zip(weights.eta_k, config.subpopulations)) / weights.eta
    return PricePath.constant(level, config.time_steps)


def evaluate_at_price(config: MarketConfig, penalties: Sequence[PenaltySpec], price: PricePath,
                      paths: Optional[int] = None, seed: Optional[int] = None, threads: int = 1,
                      max_substeps: int = MAX_SUBSTEPS, forward: str = DEFAULT_FORWARD) -> MfgEquilibrium:
    """One backward/forward pass at a fixed price, without iterating"""
    if forward not in FORWARD_METHODS:
        raise ValueError(f"unknown forward method '{forward}'; expected one of {FORWARD_METHODS}")
    flags = check_penalties(config, penalties)
    seed = config.rng_seed if seed is None else seed
    feedbacks = solve_feedbacks(config, penalties, price, threads, max_substeps)
    flows = mean_field_flows(feedbacks, price, config, forward, paths, seed, threads)
    update = update_price(flows, eta_weights(config))
    change = float(np.max(np.abs(update.values - price.values)))
    for sol in feedbacks:
        flags.extend(sol.flags)
    flags.extend(flows.escape_flags())
    return MfgEquilibrium(price=price, feedbacks=feedbacks, flows=flows, iterations=0,
                          final_update_norm=change, history=[change], config=config,
                          penalties=list(penalties), seed=seed, flags=flags)


def solve_equilibrium(config: MarketConfig, penalties: Sequence[PenaltySpec],
                      damping: float = DEFAULT_DAMPING, tol: float = DEFAULT_TOL,
                      max_outer: int = DEFAULT_MAX_OUTER, paths: Optional[int] = None,
                      seed: Optional[int] = None, threads: int = 1,
                      initial_price: Optional[PricePath] = None,
                      max_substeps: int = MAX_SUBSTEPS, forward: str = DEFAULT_FORWARD,
                      verbose: bool = False) -> MfgEquilibrium:
    """
    Damped fixed point S <- (1 - w) S + w * update_price(forward(backward(S))).
    Common random numbers: every outer iteration reuses the same seed.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if forward not in FORWARD_METHODS:
        raise ValueError(f"unknown forward method '{forward}'; expected one of {FORWARD_METHODS}")
    flags = check_penalties(config, penalties)
    seed = config.rng_seed if seed is None else seed
    weights = eta_weights(config)
    price = initial_price if initial_price is not None else initial_price_guess(config)
    history = []

    for iteration in range(1, max_outer + 1):
        feedbacks = solve_feedbacks(config, penalties, price, threads, max_substeps)
        flows = mean_field_flows(feedbacks, price, config, forward, paths, seed, threads)
        update = update_price(flows, weights)
        change = float(np.max(np.abs(update.values - price.values)))
        history.append(change)
        if verbose:
            print(f"   Iteration {iteration}: sup|ΔS| = {change:.3e}, S_0 = {price.values[0]:.6f}")

        if change < tol:
            for sol in feedbacks:
                flags.extend(sol.flags)
            flags.extend(flows.escape_flags())
            return MfgEquilibrium(price=price, feedbacks=feedbacks, flows=flows,
                                  iterations=iteration, final_update_norm=change,
                                  history=history, config=config, penalties=list(penalties),
                                  seed=seed, flags=flags)

        price = PricePath((1.0 - damping) * price.values + damping * update.values)

    raise MaxIterations(
        f"price fixed point not reached in {max_outer} iterations "
        f"(last sup|ΔS| = {history[-1]:.3e}); retry with smaller damping", history)


def price_forms(eq: MfgEquilibrium, paths: Optional[int] = None, threads: int = 1) -> Dict[str, np.ndarray]:
    """
    Equilibrium price computed two ways on the same simulated population:
    the feedback field integrated against the deposited population density
    ('markov') and the average of pathwise YX samples ('mckean_vlasov').
    """
    flows = forward_mean_field(eq.feedbacks, eq.price, eq.config, paths, eq.seed, threads,
                               deposit_mass=True)
    weights = eta_weights(eq.config)
    eta_k = np.asarray(weights.eta_k)[:, np.newaxis]
    return {
        'markov': -np.sum(eta_k * flows.markov_YX, axis=0) / weights.eta,
        'mckean_vlasov': -np.sum(eta_k * flows.mean_YX, axis=0) / weights.eta,
    }


@dataclass
class DriftCheck:
    """Per-step increments of the adjoints along simulated paths, arrays of length Nt"""
    k: int
    n_paths: int
    t_grid: np.ndarray
    mean_dYX: np.ndarray
    se_dYX: np.ndarray
    mean_dYA: np.ndarray
    se_dYA: np.ndarray

    def pass_fractions(self, n_se: float = 3.0) -> Dict[str, float]:
        def within(mean, se):
            return float(np.mean((np.abs(mean) <= n_se * se) | (np.abs(mean) < ZERO_DRIFT_TOL)))
        return {'YX': within(self.mean_dYX, self.se_dYX), 'YA': within(self.mean_dYA, self.se_dYA)}

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            't': self.t_grid[:-1], 'k': self.k,
            'mean_dYX': self.mean_dYX, 'se_dYX': self.se_dYX,
            'mean_dYA_plus_YX': self.mean_dYA, 'se_dYA_plus_YX': self.se_dYA,
        })


def _drift_sums(feedback: FeedbackSolution, config: MarketConfig, seed: int, block: int,
                n_paths: int) -> np.ndarray:
    res = simulate_block(feedback, config, seed, block, n_paths, record_paths=True)
    YX, YA = res.paths['YX'], res.paths['YA']
    dYX = np.diff(YX, axis=0)
    # dYA = -YX dt along the optimum
    dYA = np.diff(YA, axis=0) / config.dt + YX[:-1]
    return np.stack([dYX.sum(axis=1), (dYX ** 2).sum(axis=1), dYA.sum(axis=1), (dYA ** 2).sum(axis=1)])


def adjoint_drift_check(eq: MfgEquilibrium, k: int, paths: Optional[int] = None,
                        seed: Optional[int] = None, threads: int = 1) -> DriftCheck:
    """E[dYX] and E[dYA/dt + YX] per time step with standard errors; both vanish at equilibrium"""
    config = eq.config
    paths = config.mc_paths if paths is None else paths
    seed = eq.seed if seed is None else seed
    sizes = block_sizes(paths)
    sums = Parallel(n_jobs=threads)(
        delayed(_drift_sums)(eq.feedbacks[k], config, seed, b, size) for b, size in enumerate(sizes)
    )
    total = sums[0]
    for part in sums[1:]:
        total = total + part

    def moments(s1, s2):
        mean = s1 / paths
        var = np.maximum(s2 / paths - mean ** 2, 0.0) * paths / max(paths - 1, 1)
        return mean, np.sqrt(var / paths)

    mean_x, se_x = moments(total[0], total[1])
    mean_a, se_a = moments(total[2], total[3])
    return DriftCheck(k=k, n_paths=paths, t_grid=config.t_grid, mean_dYX=mean_x, se_dYX=se_x,
                      mean_dYA=mean_a, se_dYA=se_a)
