#!/usr/bin/env python3
"""
LQ Reference Solutions
Closed form for linear contracts and a Riccati/shooting solution for the
single-population quadratic contract, used as ground truth for the grid solver.
"""

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.interpolate import make_interp_spline

from model_core import MarketConfig, StepTooLarge, SubPopulationParams, eta_weights

RK4_TOL = 1e-8
OUTPUT_REFINEMENT = 10

# ============================================================================
# LINEAR CONTRACTS
# ============================================================================

@dataclass(frozen=True)
class LinearContractSolution:
    """Equilibrium under C^k(x) = -lambda_k x for every sub-population"""
    horizon: float
    lambdas: tuple
    betas: tuple
    pis: tuple
    price: float
    YX_const: tuple
    g: tuple
    trade: tuple

    def YA(self, t, k: int):
        return -self.lambdas[k] * (self.horizon - np.asarray(t, dtype=float))

    def alpha(self, t, k: int):
        return self.lambdas[k] * (self.horizon - np.asarray(t, dtype=float)) / self.betas[k]

    def clearing(self) -> float:
        return sum(pi * trade for pi, trade in zip(self.pis, self.trade))

    def roles(self, tol: float = 1e-12) -> List[str]:
        """Constant trading role of each sub-population: buyer, seller or inactive"""
        roles = []
        for trade in self.trade:
            if trade > tol:
                roles.append('buyer')
            elif trade < -tol:
                roles.append('seller')
            else:
                roles.append('inactive')
        return roles

    def to_dict(self) -> Dict:
        return {
            'price': self.price,
            'YX_const': list(self.YX_const),
            'g': list(self.g),
            'Gamma': list(self.trade),
            'alpha_0': [float(self.alpha(0.0, k)) for k in range(len(self.lambdas))],
            'roles': self.roles(),
        }


def linear_contract_solution(config: MarketConfig) -> LinearContractSolution:
    weights = eta_weights(config)
    pops = config.subpopulations
    price = sum(e * p.lambda_weight for e, p in zip(weights.eta_k, pops)) / weights.eta
    return LinearContractSolution(
        horizon=config.horizon,
        lambdas=tuple(p.lambda_weight for p in pops),
        betas=tuple(p.beta for p in pops),
        pis=tuple(p.pi for p in pops),
        price=price,
        YX_const=tuple(-p.lambda_weight for p in pops),
        g=tuple(p.lambda_weight / p.zeta for p in pops),
        trade=tuple((p.lambda_weight - price) / p.gamma for p in pops),
    )

# ============================================================================
# RICCATI ORACLE (K = 1, QUADRATIC PENALTY)
# ============================================================================

COEFFICIENTS = ('p', 'q', 'r', 's', 'u', 'w')


@dataclass
class RiccatiSolution:
    """
    V(t, x, a) = p x^2/2 + q x a + r a^2/2 + s x + u a + w with the
    self-consistent price S(t) = -(p m_x + q m_a + s)
    """
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    s: np.ndarray
    u: np.ndarray
    w: np.ndarray
    S: np.ndarray
    m_x: np.ndarray
    m_a: np.ndarray
    params: SubPopulationParams
    P: float
    R: float
    x_range: tuple = (-1.0, 3.0)
    a_range: tuple = (0.0, 1.0)

    def _at(self, name: str, t):
        return np.interp(t, self.t, getattr(self, name))

    def value(self, t, x, a):
        p, q, r, s, u, w = (self._at(c, t) for c in COEFFICIENTS)
        return 0.5 * p * x ** 2 + q * x * a + 0.5 * r * a ** 2 + s * x + u * a + w

    def yx(self, t, x, a):
        return self._at('p', t) * x + self._at('q', t) * a + self._at('s', t)

    def ya(self, t, x, a):
        return self._at('q', t) * x + self._at('r', t) * a + self._at('u', t)

    def perturbed(self, name: str, delta: float) -> 'RiccatiSolution':
        return replace(self, **{name: getattr(self, name) + delta})

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.t, 'p': self.p, 'q': self.q, 'r': self.r,
                             's': self.s, 'u': self.u, 'w': self.w,
                             'S': self.S, 'mean_X': self.m_x, 'mean_A': self.m_a})

    def save(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / 'riccati.csv'
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def _baseline_fn(params: SubPopulationParams, horizon: float):
    values = np.asarray(params.baseline, dtype=float)
    if values.size == 1:
        return lambda t: values[0]
    n = values.size
    return lambda t: values[min(int(t / horizon * n), n - 1)]


def _pqr_rhs(y: np.ndarray, upsilon: float, beta: float) -> np.ndarray:
    p, q, r = y
    return np.array([
        upsilon * p ** 2 + q ** 2 / beta,
        -p + upsilon * p * q + q * r / beta,
        -2.0 * q + upsilon * q ** 2 + r ** 2 / beta,
    ])


def _integrate_pqr(P: float, horizon: float, n_steps: int, upsilon: float, beta: float) -> np.ndarray:
    """Backward RK4 from (P, 0, 0) at T; returns (n_steps+1, 3) on the forward time grid"""
    dt = horizon / n_steps
    out = np.empty((n_steps + 1, 3))
    y = np.array([P, 0.0, 0.0])
    out[n_steps] = y
    for n in range(n_steps, 0, -1):
        k1 = _pqr_rhs(y, upsilon, beta)
        k2 = _pqr_rhs(y - 0.5 * dt * k1, upsilon, beta)
        k3 = _pqr_rhs(y - 0.5 * dt * k2, upsilon, beta)
        k4 = _pqr_rhs(y - dt * k3, upsilon, beta)
        y = y - dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[n - 1] = y
    return out


class MeanShooting:
    """Forward RK4 for (s, u, m_x, m_a) given p, q, r on a grid twice as fine"""

    def __init__(self, params: SubPopulationParams, pqr_fine: np.ndarray, horizon: float, n_steps: int,
                 fixed_price: Optional[float] = None):
        self.params = params
        self.fixed_price = fixed_price
        self.pqr = pqr_fine
        self.horizon = horizon
        self.n_steps = n_steps
        self.dt = horizon / n_steps
        self.upsilon = 1.0 / params.gamma + 1.0 / params.zeta
        self.h = _baseline_fn(params, horizon)

    def rhs(self, t: float, y: np.ndarray, fine_index: int) -> np.ndarray:
        prm = self.params
        p, q, r = self.pqr[fine_index]
        s, u, m_x, m_a = y
        h = self.h(t)
        mean_yx = p * m_x + q * m_a + s
        S = self.fixed_price if self.fixed_price is not None else -mean_yx
        return np.array([
            -h * p + self.upsilon * p * s + S * p / prm.gamma + q * u / prm.beta,
            -h * q - s + self.upsilon * q * s + S * q / prm.gamma + r * u / prm.beta,
            h - self.upsilon * mean_yx - S / prm.gamma + m_a,
            -(q * m_x + r * m_a + u) / prm.beta,
        ])

    def run(self, y0: np.ndarray) -> np.ndarray:
        """Trajectory (n_steps+1, 4, ...) from y0 at t = 0"""
        y = np.array(y0, dtype=float)
        out = np.empty((self.n_steps + 1,) + y.shape)
        out[0] = y
        dt = self.dt
        for n in range(self.n_steps):
            t = n * dt
            k1 = self.rhs(t, y, 2 * n)
            k2 = self.rhs(t + 0.5 * dt, y + 0.5 * dt * k1, 2 * n + 1)
            k3 = self.rhs(t + 0.5 * dt, y + 0.5 * dt * k2, 2 * n + 1)
            k4 = self.rhs(t + dt, y + dt * k3, 2 * n + 2)
            y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            out[n + 1] = y
        return out

    def solve(self, mean_x0: float, s_T: float, u_T: float) -> np.ndarray:
        """Affine shooting on the unknown (s(0), u(0))"""
        starts = np.array([
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [mean_x0, mean_x0, mean_x0],
            [0.0, 0.0, 0.0],
        ])
        ends = self.run(starts)[-1]
        base = ends[:2, 0]
        jac = np.column_stack([ends[:2, 1] - base, ends[:2, 2] - base])
        s0, u0 = np.linalg.solve(jac, np.array([s_T, u_T]) - base)
        return self.run(np.array([s0, u0, mean_x0, 0.0]))


def riccati_solve(params: SubPopulationParams, P: float, R: float, horizon: float,
                  steps: int, mean_x0: Optional[float] = None,
                  fixed_price: Optional[float] = None) -> RiccatiSolution:
    """
    K = 1 quadratic contract C(x) = P/2 (x - R)^2 on `steps` output intervals.
    p, q, r run backward at a quarter of the output step (checked by step
    doubling), the coupled (s, u, m_x, m_a) forward at half the output step,
    and w backward at the output step. `fixed_price` replaces the
    self-consistent price by a constant.
    """
    upsilon = 1.0 / params.gamma + 1.0 / params.zeta
    mean_x0 = params.initial_inventory.mean if mean_x0 is None else mean_x0

    pqr_fine = _integrate_pqr(P, horizon, 4 * steps, upsilon, params.beta)
    pqr_coarse = _integrate_pqr(P, horizon, 2 * steps, upsilon, params.beta)
    error = float(np.max(np.abs(pqr_coarse - pqr_fine[::2]))) / 15.0
    if error > RK4_TOL:
        raise StepTooLarge(f"RK4 step-doubling error {error:.3g} exceeds {RK4_TOL:g}; increase steps")

    shooting = MeanShooting(params, pqr_fine, horizon, 2 * steps, fixed_price)
    traj = shooting.solve(mean_x0, -P * R, 0.0)
    s_half, u_half, mx_half, ma_half = traj.T
    pqr_half = pqr_fine[::2]
    if fixed_price is None:
        S_half = -(pqr_half[:, 0] * mx_half + pqr_half[:, 1] * ma_half + s_half)
    else:
        S_half = np.full_like(s_half, fixed_price)

    h = _baseline_fn(params, horizon)
    half_t = np.linspace(0.0, horizon, 2 * steps + 1)
    F = np.array([
        -h(t) * s + 0.5 * upsilon * s ** 2 + S * s / params.gamma + S ** 2 / (2 * params.gamma)
        + u ** 2 / (2 * params.beta) - 0.5 * params.sigma ** 2 * p
        for t, s, u, S, p in zip(half_t, s_half, u_half, S_half, pqr_half[:, 0])
    ])
    dt = horizon / steps
    w = np.empty(steps + 1)
    w[steps] = 0.5 * P * R ** 2
    for n in range(steps, 0, -1):
        w[n - 1] = w[n] - dt / 6.0 * (F[2 * n] + 4.0 * F[2 * n - 1] + F[2 * n - 2])

    out = pqr_fine[::4]
    return RiccatiSolution(
        t=np.linspace(0.0, horizon, steps + 1),
        p=out[:, 0].copy(), q=out[:, 1].copy(), r=out[:, 2].copy(),
        s=s_half[::2].copy(), u=u_half[::2].copy(), w=w,
        S=S_half[::2].copy(), m_x=mx_half[::2].copy(), m_a=ma_half[::2].copy(),
        params=params, P=P, R=R,
    )


def riccati_for_config(config: MarketConfig, P: float, R: float) -> RiccatiSolution:
    """Oracle on OUTPUT_REFINEMENT times the solver's time grid, sized to the config's x/a box"""
    sol = riccati_solve(config.subpopulations[0], P, R, config.horizon,
                        OUTPUT_REFINEMENT * config.time_steps)
    sol.x_range = (config.x_min, config.x_max)
    sol.a_range = (config.a_min, config.a_max)
    return sol

# ============================================================================
# RESIDUAL CHECK
# ============================================================================

@dataclass
class ResidualCheck:
    max_residual: float
    n_points: int
    empty_sample: bool = False


def hjb_residual_check(sol: RiccatiSolution, n_points: int = 200, seed: int = 0) -> ResidualCheck:
    """Analytic HJB residual of the ansatz at random interior (t, x, a)"""
    if n_points <= 0:
        return ResidualCheck(0.0, 0, empty_sample=True)

    prm = sol.params
    upsilon = 1.0 / prm.gamma + 1.0 / prm.zeta
    rng = np.random.default_rng(seed)
    horizon = sol.t[-1]
    dt = sol.t[1] - sol.t[0]
    t = rng.uniform(dt, horizon - dt, n_points)
    x = rng.uniform(sol.x_range[0], sol.x_range[1], n_points)
    a = rng.uniform(sol.a_range[0], sol.a_range[1], n_points)

    splines = {name: make_interp_spline(sol.t, getattr(sol, name), k=5)
               for name in COEFFICIENTS + ('S',)}
    c = {name: splines[name](t) for name in splines}
    d = {name: splines[name].derivative()(t) for name in COEFFICIENTS}
    h = np.array([_baseline_fn(prm, horizon)(ti) for ti in t])

    dV_dt = (0.5 * d['p'] * x ** 2 + d['q'] * x * a + 0.5 * d['r'] * a ** 2
             + d['s'] * x + d['u'] * a + d['w'])
    Vx = c['p'] * x + c['q'] * a + c['s']
    Va = c['q'] * x + c['r'] * a + c['u']
    S = c['S']
    hamiltonian = ((h + a) * Vx - 0.5 * upsilon * Vx ** 2 - S * Vx / prm.gamma
                   - S ** 2 / (2 * prm.gamma) - Va ** 2 / (2 * prm.beta)
                   + 0.5 * prm.sigma ** 2 * c['p'])
    residual = np.abs(dV_dt + hamiltonian)
    return ResidualCheck(float(residual.max()), n_points)
