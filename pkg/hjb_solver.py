#!/usr/bin/env python3
"""
HJB Backward Solver
Solves one sub-population's control problem on the (t, x, a) grid for a fixed
price path. The adjoints YX = dV/dx, YA = dV/da and the value V are advanced
together as one transport system: second-order upwind advection in (x, a)
with two explicit stages, Crank-Nicolson diffusion in x. The transpose of
every step carries a population density forward, so the forward pass in
mfg_equilibrium sees exactly the dynamics the feedback was solved with.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from model_core import (
    GridTooCoarse,
    MarketConfig,
    NonConvergence,
    PenaltySpec,
    SubPopulationParams,
)

NEGATIVE_CONTROL_TOL = 1e-9
CFL_SAFETY = 0.9
MAX_SUBSTEPS = 64

# stencil offsets and weights in units of 1/(2 h)
FORWARD, CENTRAL, BACKWARD = 0, 1, 2
STENCILS = {
    FORWARD: ((0, 1, 2), (-3.0, 4.0, -1.0)),
    CENTRAL: ((-1, 1), (-1.0, 1.0)),
    BACKWARD: ((-2, -1, 0), (1.0, -4.0, 3.0)),
}

# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass(frozen=True)
class PricePath:
    """REC price S_t on the time grid, one entry per node"""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or not np.all(np.isfinite(values)):
            raise ValueError("price path must be a finite 1-d array")
        object.__setattr__(self, 'values', values)

    @classmethod
    def constant(cls, value: float, time_steps: int) -> 'PricePath':
        return cls(np.full(time_steps + 1, float(value)))

    def __len__(self) -> int:
        return self.values.size


@dataclass
class SubstepOperators:
    """Advection matrices of the two stages of one substep"""
    tau: float
    first: sp.csr_matrix
    second: sp.csr_matrix


@dataclass
class FeedbackSolution:
    """V, YX, YA on the full (Nt+1) x Nx x Na grid for sub-population k"""
    V: np.ndarray
    YX: np.ndarray
    YA: np.ndarray
    k: int
    price: PricePath
    t_grid: np.ndarray
    x_grid: np.ndarray
    a_grid: np.ndarray
    params: SubPopulationParams
    penalty: PenaltySpec
    flags: List[str] = field(default_factory=list)
    stats: Dict = field(default_factory=dict)

    def controls(self, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Feedback controls (g, Gamma, alpha) on the grid slice at t_n"""
        return feedback_controls(self.YX[n], self.YA[n], self.price.values[n], self.params)

    def stacked(self, n: int) -> np.ndarray:
        """(YX, YA, V) at t_n as the (Nx*Na, 3) array the sweep works on"""
        return np.stack([self.YX[n], self.YA[n], self.V[n]], axis=-1).reshape(-1, 3)

    def sweep(self) -> 'BackwardSweep':
        return BackwardSweep(self.params, self.price, self.t_grid, self.x_grid, self.a_grid)

    def shifted(self, delta: float) -> 'FeedbackSolution':
        """Solution for the same penalty with its intercept moved by delta"""
        return FeedbackSolution(
            V=self.V + delta, YX=self.YX, YA=self.YA, k=self.k, price=self.price,
            t_grid=self.t_grid, x_grid=self.x_grid, a_grid=self.a_grid,
            params=self.params, penalty=self.penalty.shifted(delta),
            flags=list(self.flags), stats=dict(self.stats),
        )

    def evaluate_at_step(self, n: int, x, a) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Bilinear (YX, YA, V) at time node n plus the mask of clamped queries"""
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        xc = np.clip(x, self.x_grid[0], self.x_grid[-1])
        ac = np.clip(a, self.a_grid[0], self.a_grid[-1])
        clamped = (xc != x) | (ac != a)
        fields = np.stack([self.YX[n], self.YA[n], self.V[n]], axis=-1)
        interp = RegularGridInterpolator((self.x_grid, self.a_grid), fields)
        out = interp(np.column_stack([xc.ravel(), ac.ravel()]))
        shape = xc.shape
        return out[:, 0].reshape(shape), out[:, 1].reshape(shape), out[:, 2].reshape(shape), clamped

    def grid_header(self) -> Dict:
        return {
            'k': self.k,
            't_grid': self.t_grid.tolist(),
            'x_grid': self.x_grid.tolist(),
            'a_grid': self.a_grid.tolist(),
            'price': self.price.values.tolist(),
            'penalty': self.penalty.to_dict(),
            'flags': list(self.flags),
            'stats': dict(self.stats),
        }

    def to_frame(self) -> pd.DataFrame:
        ti, xi, ai = np.indices(self.V.shape)
        return pd.DataFrame({
            't_index': ti.ravel(),
            'x_index': xi.ravel(),
            'a_index': ai.ravel(),
            'V': self.V.ravel(),
            'YX': self.YX.ravel(),
            'YA': self.YA.ravel(),
        })

    def save(self, out_dir: Path, stem: str) -> List[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}_grid.json"
        self.to_frame().to_csv(csv_path, index=False, float_format="%.17g")
        with open(json_path, 'w') as f:
            json.dump(self.grid_header(), f, indent=2)
        return [csv_path, json_path]

# ============================================================================
# FEEDBACK CONTROLS
# ============================================================================

def feedback_controls(YX_val, YA_val, S_t, params: SubPopulationParams):
    """g = -YX/zeta, Gamma = (-YX - S)/gamma, alpha = -YA/beta"""
    YX_val = np.asarray(YX_val, dtype=float)
    YA_val = np.asarray(YA_val, dtype=float)
    g = -YX_val / params.zeta
    trade = (-YX_val - S_t) / params.gamma
    alpha = -YA_val / params.beta
    return g, trade, alpha


def running_cost(g, trade, alpha, S_t, params: SubPopulationParams):
    return (0.5 * params.zeta * g ** 2 + 0.5 * params.gamma * trade ** 2
            + 0.5 * params.beta * alpha ** 2 + S_t * trade)

# ============================================================================
# DISCRETE OPERATORS
# ============================================================================

def _stencil_choice(b: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """
    One-sided stencil on the side the drift points to; central on the node
    next to the boundary, the opposite one-sided stencil on the boundary itself
    """
    positive = np.where(index <= n - 3, FORWARD, np.where(index == n - 2, CENTRAL, BACKWARD))
    negative = np.where(index >= 2, BACKWARD, np.where(index == 1, CENTRAL, FORWARD))
    return np.where(b > 0, positive, negative)


def upwind_matrix(b: np.ndarray, axis: int, spacing: float) -> sp.csr_matrix:
    """b * dY/d(axis) on the flattened (Nx, Na) grid, second order and upwinded"""
    shape = b.shape
    size = b.size
    stride = shape[1] if axis == 0 else 1
    flat = np.arange(size).reshape(shape)
    choice = _stencil_choice(b, np.indices(shape)[axis], shape[axis])

    rows, cols, vals = [], [], []
    for kind, (offsets, weights) in STENCILS.items():
        mask = (choice == kind) & (b != 0)
        if not mask.any():
            continue
        nodes = flat[mask]
        coeff = b[mask] / (2.0 * spacing)
        for offset, weight in zip(offsets, weights):
            rows.append(nodes)
            cols.append(nodes + offset * stride)
            vals.append(weight * coeff)
    if not rows:
        return sp.csr_matrix((size, size))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(size, size))


def diffusion_matrix(n_x: int, n_a: int, coeff: float) -> sp.csr_matrix:
    """coeff * D_xx on the flattened grid with zero rows at both x-boundaries"""
    main = np.full(n_x, -2.0 * coeff)
    main[[0, -1]] = 0.0
    upper = np.full(n_x - 1, coeff)
    upper[0] = 0.0
    lower = np.full(n_x - 1, coeff)
    lower[-1] = 0.0
    d_x = sp.diags([lower, main, upper], [-1, 0, 1])
    return sp.kron(d_x, sp.identity(n_a), format='csr')

# ============================================================================
# BACKWARD SWEEP
# ============================================================================

class BackwardSweep:
    """One sub-population, one price path: steps (YX, YA, V) from T back to 0"""

    def __init__(self, params: SubPopulationParams, price: PricePath, t_grid: np.ndarray,
                 x_grid: np.ndarray, a_grid: np.ndarray, max_substeps: int = MAX_SUBSTEPS):
        self.params = params
        self.price = price.values
        self.t = t_grid
        self.x = x_grid
        self.a = a_grid
        self.shape = (x_grid.size, a_grid.size)
        self.dx = x_grid[1] - x_grid[0]
        self.da = a_grid[1] - a_grid[0]
        self.dt = t_grid[1] - t_grid[0]
        self.baseline = params.baseline_on_grid(t_grid.size - 1)
        self.upsilon = 1.0 / params.gamma + 1.0 / params.zeta
        self.max_substeps = max_substeps
        self.a_nodes = np.broadcast_to(a_grid[np.newaxis, :], self.shape).ravel()
        self.diffusion = None
        if params.sigma > 0:
            self.diffusion = diffusion_matrix(x_grid.size, a_grid.size,
                                              0.5 * params.sigma ** 2 / self.dx ** 2)
        self._factors: Dict[float, object] = {}
        self.substeps: List[int] = []

    def drift(self, YX: np.ndarray, YA: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """State drift (b_x, b_a) under the feedback controls at step n"""
        b_x = self.baseline[n] + self.a_nodes - self.price[n] / self.params.gamma - self.upsilon * YX
        b_a = -YA / self.params.beta
        return b_x, b_a

    def _rate(self, b_x: np.ndarray, b_a: np.ndarray) -> float:
        return 2.0 * float(np.max(np.abs(b_x) / self.dx + np.abs(b_a) / self.da))

    def _stage(self, F: np.ndarray, n: int):
        """Advection matrix, source columns and stability rate at the fields F"""
        YX, YA = F[:, 0], F[:, 1]
        b_x, b_a = self.drift(YX, YA, n)
        advection = (upwind_matrix(b_x.reshape(self.shape), 0, self.dx)
                     + upwind_matrix(b_a.reshape(self.shape), 1, self.da))
        S = self.price[n]
        g, trade, alpha = feedback_controls(YX, YA, S, self.params)
        source = np.column_stack([np.zeros_like(YX), YX, running_cost(g, trade, alpha, S, self.params)])
        return advection, source, self._rate(b_x, b_a)

    def _implicit(self, rhs: np.ndarray, scale: float, transpose: bool = False) -> np.ndarray:
        """Solve (I - scale * D) Y = rhs, or its transpose"""
        if self.diffusion is None:
            return rhs
        if scale not in self._factors:
            size = self.diffusion.shape[0]
            self._factors[scale] = splu((sp.identity(size, format='csc')
                                         - scale * self.diffusion).tocsc())
        return self._factors[scale].solve(np.ascontiguousarray(rhs), trans='T' if transpose else 'N')

    def _check_rate(self, tau: float, rate: float, n: int):
        if tau * rate > 1.0:
            raise GridTooCoarse(
                f"t={self.t[n]:.4g}: stage stability number {tau * rate:.3g} > 1; "
                f"refine the time grid or coarsen x/a")

    def substep(self, F: np.ndarray, n: int, tau: float) -> Tuple[np.ndarray, SubstepOperators]:
        """Fields at t - tau from the fields F at t, inside step n"""
        first, source_1, rate_1 = self._stage(F, n)
        self._check_rate(tau, rate_1, n)
        predictor = self._implicit(F + tau * (first @ F + source_1), tau)
        second, source_2, rate_2 = self._stage(predictor, n)
        self._check_rate(tau, rate_2, n)

        rhs = F + 0.5 * tau * (first @ F + second @ predictor + source_1 + source_2)
        if self.diffusion is not None:
            rhs = rhs + 0.5 * tau * (self.diffusion @ F)
        F_new = self._implicit(rhs, 0.5 * tau)
        if not np.all(np.isfinite(F_new)):
            raise NonConvergence(f"t={self.t[n]:.4g}: non-finite adjoint or value field")
        return F_new, SubstepOperators(tau, first, second)

    def substep_count(self, F: np.ndarray, n: int) -> int:
        b_x, b_a = self.drift(F[:, 0], F[:, 1], n)
        n_sub = max(1, math.ceil(self.dt * self._rate(b_x, b_a) / CFL_SAFETY))
        if n_sub > self.max_substeps:
            raise GridTooCoarse(
                f"t={self.t[n]:.4g}: advection needs {n_sub} substeps (> {self.max_substeps}); "
                f"refine the time grid or coarsen x/a")
        return n_sub

    def step(self, F: np.ndarray, n: int) -> np.ndarray:
        """Fields at t_n from the fields at t_{n+1}"""
        n_sub = self.substep_count(F, n)
        self.substeps.append(n_sub)
        tau = self.dt / n_sub
        for _ in range(n_sub):
            F, _ = self.substep(F, n, tau)
        return F

    def replay(self, F: np.ndarray, n: int, n_sub: int) -> List[SubstepOperators]:
        """Operators of step n rebuilt from the stored fields at t_{n+1}"""
        tau = self.dt / n_sub
        operators = []
        for _ in range(n_sub):
            F, ops = self.substep(F, n, tau)
            operators.append(ops)
        return operators

    def transpose_substep(self, mass: np.ndarray, ops: SubstepOperators) -> np.ndarray:
        """Apply the transpose of one substep's linear map on a source-free field"""
        tau = ops.tau
        w = self._implicit(mass, 0.5 * tau, transpose=True)
        inner = self._implicit(0.5 * tau * (ops.second.T @ w), tau, transpose=True)
        out = w + 0.5 * tau * (ops.first.T @ w) + inner + tau * (ops.first.T @ inner)
        if self.diffusion is not None:
            out = out + 0.5 * tau * (self.diffusion.T @ w)
        return out

    def push_density(self, F_next: np.ndarray, n: int, n_sub: int, mass: np.ndarray) -> np.ndarray:
        """Flattened density at t_{n+1} from the density at t_n"""
        for ops in reversed(self.replay(F_next, n, n_sub)):
            mass = self.transpose_substep(mass, ops)
        return mass


def solve_backward(params: SubPopulationParams, penalty: PenaltySpec, price: PricePath,
                   config: MarketConfig, k: int = 0, max_substeps: int = MAX_SUBSTEPS,
                   verbose: bool = False) -> FeedbackSolution:
    """Backward sweep from V(T, x, a) = C(x), YX = C'(x), YA = 0 to t = 0"""
    if len(price) != config.time_steps + 1:
        raise ValueError(f"price path has {len(price)} entries, expected {config.time_steps + 1}")

    n_t = config.time_steps
    x, a = config.x_grid, config.a_grid
    shape = (n_t + 1, x.size, a.size)
    V = np.empty(shape)
    YX = np.empty(shape)
    YA = np.empty(shape)

    value_T, slope_T, _ = penalty.evaluate(x)
    V[n_t] = np.repeat(value_T[:, np.newaxis], a.size, axis=1)
    YX[n_t] = np.repeat(slope_T[:, np.newaxis], a.size, axis=1)
    YA[n_t] = 0.0

    if verbose:
        print(f"   🔄 Backward sweep for sub-population {k} ({n_t} steps, {x.size}x{a.size} grid)")

    sweep = BackwardSweep(params, price, config.t_grid, x, a, max_substeps=max_substeps)
    F = np.stack([YX[n_t], YA[n_t], V[n_t]], axis=-1).reshape(-1, 3)
    for n in range(n_t - 1, -1, -1):
        F = sweep.step(F, n)
        fields = F.reshape(x.size, a.size, 3)
        YX[n], YA[n], V[n] = fields[..., 0], fields[..., 1], fields[..., 2]

    flags = []
    g, _, alpha = feedback_controls(YX, YA, 0.0, params)
    if np.any(g < -NEGATIVE_CONTROL_TOL):
        flags.append(f"NegativeControl: g < 0 at {int(np.sum(g < -NEGATIVE_CONTROL_TOL))} nodes")
    if np.any(alpha < -NEGATIVE_CONTROL_TOL):
        flags.append(f"NegativeControl: alpha < 0 at {int(np.sum(alpha < -NEGATIVE_CONTROL_TOL))} nodes")

    # substeps[n] belongs to step n -> n+1
    substeps = sweep.substeps[::-1]
    stats = {'max_substeps': max(substeps), 'substeps': substeps}
    if verbose:
        print(f"   ✓ Sub-population {k} done (substeps <= {stats['max_substeps']})")
        for flag in flags:
            print(f"   ⚠️  {flag}")

    return FeedbackSolution(V=V, YX=YX, YA=YA, k=k, price=price, t_grid=config.t_grid,
                            x_grid=x, a_grid=a, params=params, penalty=penalty,
                            flags=flags, stats=stats)

# ============================================================================
# INTERPOLATION
# ============================================================================

def interpolate_feedback(sol: FeedbackSolution, t, x, a, return_clamped: bool = False):
    """Trilinear (YX, YA, V) at arbitrary (t, x, a); queries outside the grid are clamped"""
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    t, x, a = np.broadcast_arrays(t, x, a)
    tc = np.clip(t, sol.t_grid[0], sol.t_grid[-1])
    xc = np.clip(x, sol.x_grid[0], sol.x_grid[-1])
    ac = np.clip(a, sol.a_grid[0], sol.a_grid[-1])
    clamped = (tc != t) | (xc != x) | (ac != a)

    fields = np.stack([sol.YX, sol.YA, sol.V], axis=-1)
    interp = RegularGridInterpolator((sol.t_grid, sol.x_grid, sol.a_grid), fields)
    out = interp(np.column_stack([tc.ravel(), xc.ravel(), ac.ravel()]))
    shape = tc.shape
    result = (out[:, 0].reshape(shape), out[:, 1].reshape(shape), out[:, 2].reshape(shape))
    if return_clamped:
        return result + (clamped,)
    return result
