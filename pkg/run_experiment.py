#!/usr/bin/env python3
"""
REC Market Experiment Runner
Command-line entry point: reads a JSON experiment config, runs one pipeline
stage (equilibrium, finite population, oracle check, contract evaluation,
FOC verification, contract search) and writes CSV/JSON results plus a
reproducibility manifest.

Usage:
    python run_experiment.py solve-mfg -c configs/reference_k2.json --out runs/k2
    python run_experiment.py simulate -c configs/reference_k2.json -N 400 --seed 7
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from hjb_solver import MAX_SUBSTEPS
from lq_oracle import hjb_residual_check, linear_contract_solution, riccati_for_config
from mfg_equilibrium import (
    DEFAULT_DAMPING,
    DEFAULT_FORWARD,
    DEFAULT_MAX_OUTER,
    DEFAULT_TOL,
    FORWARD_METHODS,
    MfgEquilibrium,
    adjoint_drift_check,
    solve_equilibrium,
)
from model_core import (
    BudgetExhausted,
    ConfigError,
    InitialInventory,
    MarketConfig,
    MaxIterations,
    PenaltySpec,
    RecMarketError,
    SubPopulationParams,
    UtilitySpec,
    validate_config,
    validate_penalty,
)
from population_sim import empirical_measures, nash_deviation_gain, simulate_population
from principal import (
    ContractFamily,
    EvaluationSettings,
    adjoint_closed_form,
    agent_value_v0,
    foc_residual,
    optimize_contract,
    principal_objective,
    reservation_shift,
    shift_equilibrium,
)

VERSION = '1.0.0'
DEFAULT_MC_PATHS = 20000
DEFAULT_BUDGET = 60
FOC_TOL = 1e-8
SUBCOMMANDS = ('solve-mfg', 'simulate', 'oracle-check', 'evaluate-contract',
               'verify-focs', 'optimize-contract')
MISSING = object()

# ============================================================================
# DATA STRUCTURES
# ============================================================================

@dataclass
class ExperimentSpec:
    """Everything parsed out of one experiment config file"""
    config: MarketConfig
    penalties: List[PenaltySpec]
    utility: UtilitySpec
    solver: Dict
    family: Optional[ContractFamily] = None
    budget: int = DEFAULT_BUDGET
    defaults_applied: List[str] = field(default_factory=list)
    config_hash: str = ''


@dataclass
class RunManifest:
    config_hash: str
    subcommand: str
    seed: int
    version: str
    wall_time: float
    outputs: List[Dict]
    defaults_applied: List[str]
    started_at: str
    status: str = 'ok'

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / 'manifest.json'
        with open(path, 'w') as f:
            json.dump(self.__dict__, f, indent=2)
        return path

# ============================================================================
# CONFIG PARSING
# ============================================================================

class ConfigLoader:
    """Builds the domain objects from raw JSON, collecting every error with its JSON path"""

    def __init__(self, raw):
        self.raw = raw
        self.errors: List[str] = []
        self.defaults_applied: List[str] = []

    def _get(self, node: Dict, key: str, path: str, default=MISSING):
        if not isinstance(node, dict) or key not in node:
            if default is MISSING:
                self.errors.append(f"{path}: required")
                return None
            self.defaults_applied.append(f"{path} = {default}")
            return default
        return node[key]

    def _number(self, node: Dict, key: str, path: str, default=MISSING, integer: bool = False):
        value = self._get(node, key, path, default)
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.errors.append(f"{path}: must be a number")
            return None
        if integer:
            if int(value) != value:
                self.errors.append(f"{path}: must be an integer")
                return None
            return int(value)
        return float(value)

    def _grid(self, key: str):
        node = self._get(self.raw, key, key)
        if node is None:
            return None, None, None
        return (self._number(node, 'min', f"{key}.min"),
                self._number(node, 'max', f"{key}.max"),
                self._number(node, 'points', f"{key}.points", integer=True))

    def _inventory(self, node: Dict, path: str) -> InitialInventory:
        inv = self._get(node, 'initial_inventory', path, default={'kind': 'point', 'value': 0.0})
        kind = self._get(inv, 'kind', f"{path}.kind")
        if kind == 'normal':
            mean = self._number(inv, 'mean', f"{path}.mean")
            sd = self._number(inv, 'sd', f"{path}.sd")
            return InitialInventory('normal', mean or 0.0, sd if sd is not None else 0.0)
        if kind == 'point':
            value = self._number(inv, 'value', f"{path}.value")
            return InitialInventory.point(value or 0.0)
        if kind is not None:
            self.errors.append(f"{path}.kind: must be 'normal' or 'point'")
        return InitialInventory.point(0.0)

    def _penalty(self, node: Dict, path: str, lambda_weight: Optional[float]) -> Optional[PenaltySpec]:
        spec = self._get(node, 'penalty', path,
                         default={'kind': 'linear', 'slope': lambda_weight or 0.0})
        kind = self._get(spec, 'kind', f"{path}.kind")
        intercept = self._number(spec, 'intercept', f"{path}.intercept", default=0.0)
        if kind == 'linear':
            slope = self._number(spec, 'slope', f"{path}.slope", default=lambda_weight or 0.0)
            penalty = PenaltySpec.linear(slope or 0.0, intercept or 0.0)
        elif kind == 'quadratic':
            P = self._number(spec, 'P', f"{path}.P")
            R = self._number(spec, 'R', f"{path}.R")
            penalty = PenaltySpec.quadratic(P or 0.0, R or 0.0, intercept or 0.0)
        elif kind == 'softplus_hockey':
            P = self._number(spec, 'P', f"{path}.P")
            R = self._number(spec, 'R', f"{path}.R")
            eps = self._number(spec, 'epsilon', f"{path}.epsilon")
            penalty = PenaltySpec.softplus_hockey(P or 0.0, R or 0.0, eps or 0.0, intercept or 0.0)
        else:
            if kind is not None:
                self.errors.append(f"{path}.kind: must be one of linear, quadratic, softplus_hockey")
            return None
        self.errors.extend(str(v) for v in validate_penalty(penalty, path))
        return penalty

    def _subpopulation(self, node: Dict, k: int):
        path = f"subpopulations[{k}]"
        values = {name: self._number(node, name, f"{path}.{name}")
                  for name in ('zeta', 'gamma', 'beta', 'sigma', 'pi', 'lambda_weight')}
        baseline = self._get(node, 'baseline', f"{path}.baseline")
        if isinstance(baseline, (int, float)) and not isinstance(baseline, bool):
            baseline = (float(baseline),)
        elif isinstance(baseline, list) and baseline and all(
                isinstance(b, (int, float)) and not isinstance(b, bool) for b in baseline):
            baseline = tuple(float(b) for b in baseline)
        else:
            if baseline is not None:
                self.errors.append(f"{path}.baseline: must be a number or a list of numbers")
            baseline = (0.0,)
        inventory = self._inventory(node, f"{path}.initial_inventory")
        penalty = self._penalty(node, f"{path}.penalty", values['lambda_weight'])
        if any(v is None for v in values.values()):
            return None, penalty
        params = SubPopulationParams(baseline=baseline, initial_inventory=inventory, **values)
        return params, penalty

    def _utility(self) -> UtilitySpec:
        node = self._get(self.raw, 'utility', 'utility', default={'kind': 'identity'})
        kind = self._get(node, 'kind', 'utility.kind')
        if kind == 'convex_hinge':
            kappa = self._number(node, 'kappa', 'utility.kappa')
            if kappa is not None and kappa < 0:
                self.errors.append("utility.kappa: must be >= 0")
            return UtilitySpec.convex_hinge(kappa or 0.0)
        if kind not in (None, 'identity'):
            self.errors.append("utility.kind: must be 'identity' or 'convex_hinge'")
        return UtilitySpec.identity()

    def _solver(self) -> Dict:
        node = self.raw.get('solver', {})
        if not isinstance(node, dict):
            self.errors.append("solver: must be an object")
            node = {}
        forward = self._get(node, 'forward', 'solver.forward', default=DEFAULT_FORWARD)
        if forward not in FORWARD_METHODS:
            self.errors.append(f"solver.forward: must be one of {', '.join(FORWARD_METHODS)}")
        return {
            'forward': forward,
            'damping': self._number(node, 'damping', 'solver.damping', default=DEFAULT_DAMPING),
            'tol': self._number(node, 'tol', 'solver.tol', default=DEFAULT_TOL),
            'max_outer': self._number(node, 'max_outer', 'solver.max_outer',
                                      default=DEFAULT_MAX_OUTER, integer=True),
            'max_substeps': self._number(node, 'max_substeps', 'solver.max_substeps',
                                         default=MAX_SUBSTEPS, integer=True),
        }

    def _family(self, n_subpops: int) -> Optional[ContractFamily]:
        node = self.raw.get('family')
        if node is None:
            return None
        if not isinstance(node, dict):
            self.errors.append("family: must be an object")
            return None
        try:
            return ContractFamily(kind=node.get('kind'), n_subpops=n_subpops,
                                  bounds=tuple(tuple(float(v) for v in b) for b in node.get('bounds', [])),
                                  initial=tuple(float(v) for v in node.get('initial', [])))
        except (TypeError, ValueError) as e:
            self.errors.append(f"family: {e}")
            return None

    def load(self) -> ExperimentSpec:
        if not isinstance(self.raw, dict):
            raise ConfigError(3, ["<root>: must be a JSON object"])

        horizon = self._number(self.raw, 'horizon', 'horizon')
        time_steps = self._number(self.raw, 'time_steps', 'time_steps', integer=True)
        x_min, x_max, x_points = self._grid('x_grid')
        a_min, a_max, a_points = self._grid('a_grid')
        reservation = self._number(self.raw, 'reservation_cost', 'reservation_cost', default=0.0)
        mc_paths = self._number(self.raw, 'mc_paths', 'mc_paths', default=DEFAULT_MC_PATHS, integer=True)
        seed = self._number(self.raw, 'rng_seed', 'rng_seed', default=0, integer=True)

        pops_raw = self._get(self.raw, 'subpopulations', 'subpopulations')
        subpops, penalties = [], []
        if pops_raw is not None and not isinstance(pops_raw, list):
            self.errors.append("subpopulations: must be a list")
            pops_raw = []
        for k, node in enumerate(pops_raw or []):
            params, penalty = self._subpopulation(node, k)
            subpops.append(params)
            penalties.append(penalty)

        utility = self._utility()
        solver = self._solver()
        budget = self._number(self.raw, 'budget', 'budget', default=DEFAULT_BUDGET, integer=True)
        family = self._family(len(subpops))

        if self.errors or any(p is None for p in subpops):
            raise ConfigError(3, self.errors)

        config = MarketConfig(horizon=horizon, time_steps=time_steps, x_min=x_min, x_max=x_max,
                              x_points=x_points, a_min=a_min, a_max=a_max, a_points=a_points,
                              subpopulations=tuple(subpops), reservation_cost=reservation,
                              mc_paths=mc_paths, rng_seed=seed)
        report = validate_config(config)
        if not report.passed:
            raise ConfigError(3, report.messages())
        return ExperimentSpec(config=config, penalties=penalties, utility=utility, solver=solver,
                              family=family, budget=budget, defaults_applied=self.defaults_applied)


def parse_config(path) -> ExperimentSpec:
    """Parse and validate; ConfigError carries exit code 2 (unreadable) or 3 (invalid)"""
    try:
        with open(path, 'rb') as f:
            content = f.read()
        raw = json.loads(content.decode('utf-8'))
    except OSError as e:
        raise ConfigError(2, [f"{path}: cannot read ({e.strerror})"])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(2, [f"{path}: invalid JSON ({e})"])
    spec = ConfigLoader(raw).load()
    spec.config_hash = hashlib.sha256(content).hexdigest()
    return spec

# ============================================================================
# OUTPUT HELPERS
# ============================================================================

def print_header(text):
    """Print formatted header"""
    print("\n" + "=" * 60)
    print(f"  {text}")
    print("=" * 60 + "\n")


def write_json(path: Path, payload) -> Path:
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2)
    return path


def write_csv(path: Path, frame: pd.DataFrame) -> Path:
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

# ============================================================================
# SUBCOMMANDS
# ============================================================================

class ExperimentRunner:
    """Runs one subcommand and records the files it writes"""

    def __init__(self, spec: ExperimentSpec, out_dir: Path, seed: int, threads: int,
                 verbose: bool = False):
        self.spec = spec
        self.config = spec.config
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.threads = threads
        self.verbose = verbose
        self.outputs: List[Path] = []

    def _settings(self) -> EvaluationSettings:
        s = self.spec.solver
        return EvaluationSettings(damping=s['damping'], tol=s['tol'], max_outer=s['max_outer'],
                                  seed=self.seed, threads=self.threads,
                                  max_substeps=s['max_substeps'], forward=s['forward'])

    def _equilibrium(self, penalties: Sequence[PenaltySpec]) -> MfgEquilibrium:
        s = self.spec.solver
        print("🔄 Solving mean-field equilibrium...")
        eq = solve_equilibrium(self.config, penalties, damping=s['damping'], tol=s['tol'],
                               max_outer=s['max_outer'], seed=self.seed, threads=self.threads,
                               max_substeps=s['max_substeps'], forward=s['forward'],
                               verbose=self.verbose)
        print(f"✓ Converged in {eq.iterations} iterations "
              f"(S_0 = {eq.price.values[0]:.6f}, max clearing residual {eq.clearing.max_abs:.2e})")
        for flag in eq.flags:
            print(f"⚠️  {flag}")
        return eq

    def _write_price(self, eq: MfgEquilibrium):
        self.outputs.append(write_csv(self.out_dir / 'price.csv',
                                      pd.DataFrame({'t': self.config.t_grid, 'S': eq.price.values})))

    def solve_mfg(self):
        eq = self._equilibrium(self.spec.penalties)
        self._write_price(eq)
        self.outputs.extend(eq.save(self.out_dir))
        checks = [adjoint_drift_check(eq, k, seed=self.seed, threads=self.threads)
                  for k in range(self.config.n_subpops)]
        self.outputs.append(write_csv(self.out_dir / 'drift_check.csv',
                                      pd.concat([c.to_frame() for c in checks], ignore_index=True)))
        for check in checks:
            fractions = check.pass_fractions()
            print(f"✓ Sub-population {check.k}: adjoint drift within 3 SE at "
                  f"{fractions['YX']:.0%} (YX) / {fractions['YA']:.0%} (YA) of steps")

    def simulate(self, N: int, dump_paths: bool = False, multinomial: bool = False):
        eq = self._equilibrium(self.spec.penalties)
        print(f"🔄 Simulating {N} agents...")
        run = simulate_population(eq, N, seed=self.seed, multinomial=multinomial,
                                  threads=self.threads, verbose=self.verbose)
        summary = run.summary()
        self.outputs.extend(run.save(self.out_dir))
        self.outputs.append(write_csv(self.out_dir / 'clearing.csv',
                                      pd.DataFrame({'t': run.t_grid, 'clearing_residual': run.clearing})))

        measures = {
            't0': empirical_measures(eq, run, 0.0, threads=self.threads),
            'T': empirical_measures(eq, run, self.config.horizon, threads=self.threads),
        }
        self.outputs.append(write_json(self.out_dir / 'measures.json', measures))

        deviations = []
        first_agent = np.searchsorted(run.k_of_agent, np.arange(self.config.n_subpops))
        for k, agent in enumerate(first_agent):
            if agent >= run.N or run.k_of_agent[agent] != k:
                continue
            for delta in ((0.1, 0.0, 0.0), (-0.1, 0.0, 0.0), (0.0, 0.1, 0.0), (0.0, 0.0, 0.1)):
                deviations.append(nash_deviation_gain(eq, run, int(agent), delta).to_dict())
        self.outputs.append(write_json(self.out_dir / 'deviations.json', deviations))
        worst = max((d['gain'] - 2 * d['gain_se'] for d in deviations), default=0.0)
        print(f"✓ Max clearing residual {summary['max_clearing_residual']:.3e}; "
              f"largest deviation gain lower bound {worst:.3e}")

        if dump_paths:
            try:
                self.outputs.append(run.save_paths(self.out_dir))
            except ValueError as e:
                print(f"⚠️  Path dump skipped: {e}")

    def oracle_check(self):
        penalty = self.spec.penalties[0]
        if self.config.n_subpops != 1 or penalty.kind != 'quadratic':
            raise ConfigError(3, ["oracle-check: needs exactly one sub-population with a quadratic penalty"])
        print("🔄 Integrating Riccati oracle...")
        oracle = riccati_for_config(self.config, penalty.P, penalty.R)
        residual = hjb_residual_check(oracle, seed=self.seed)
        eq = self._equilibrium(self.spec.penalties)

        sol = eq.feedbacks[0]
        x = self.config.x_grid
        interior = (x > x[0] + 0.1 * (x[-1] - x[0])) & (x < x[-1] - 0.1 * (x[-1] - x[0]))
        yx_solver = sol.YX[0, interior, 0]
        yx_oracle = oracle.yx(0.0, x[interior], 0.0)
        # relative to the sup norm; YX crosses zero inside the box
        rel = np.abs(yx_solver - yx_oracle) / max(float(np.max(np.abs(yx_oracle))), 1e-12)
        self.outputs.append(write_csv(self.out_dir / 'oracle_check.csv', pd.DataFrame({
            'x': x[interior], 'YX_solver': yx_solver, 'YX_oracle': yx_oracle, 'rel_err': rel})))
        self.outputs.append(oracle.save(self.out_dir))
        mean_x0 = self.config.subpopulations[0].initial_inventory.mean
        at_mean = float(np.interp(mean_x0, x, sol.YX[0, :, 0]))
        summary = {
            'max_rel_err_interior': float(rel.max()),
            'max_abs_err_interior': float(np.abs(yx_solver - yx_oracle).max()),
            'YX_at_mean_solver': at_mean,
            'YX_at_mean_oracle': float(oracle.yx(0.0, mean_x0, 0.0)),
            'price_solver': eq.price.values.tolist(),
            'price_oracle_S0': float(oracle.S[0]),
            'hjb_residual_max': residual.max_residual,
        }
        self.outputs.append(write_json(self.out_dir / 'oracle_check.json', summary))
        print(f"✓ Max relative YX gap on the interior: {rel.max():.3e}")

    def _principal_state(self):
        eq = self._equilibrium(self.spec.penalties)
        shifted, deltas = reservation_shift(self.spec.penalties, eq, self.config.reservation_cost)
        return shift_equilibrium(eq, deltas), shifted

    def _foc_frame(self, eq, adjoint, foc) -> pd.DataFrame:
        frames = []
        for k in range(self.config.n_subpops):
            frames.append(pd.DataFrame({
                't': self.config.t_grid, 'k': k,
                'residual_X': foc.residual_X[k], 'residual_A': foc.residual_A[k],
                'Kx': adjoint.K_X[k], 'Kv': adjoint.K_V[k], 'Ka': adjoint.K_A[k],
                'YX': eq.flows.mean_YX[k], 'YA': eq.flows.mean_YA[k], 'M': adjoint.M_mean,
            }))
        return pd.concat(frames, ignore_index=True)

    def evaluate_contract(self):
        eq, contracts = self._principal_state()
        J, se = principal_objective(eq, contracts, self.spec.utility, seed=self.seed, threads=self.threads)
        adjoint = adjoint_closed_form(eq, contracts, self.spec.utility, seed=self.seed, threads=self.threads)
        foc = foc_residual(eq, contracts, self.spec.utility, adjoint)
        payload = {
            'JP': J, 'JP_se': se,
            'contracts': [c.to_dict() for c in contracts],
            'E_V0': agent_value_v0(eq),
            'R_0': self.config.reservation_cost,
            'price_level': float(eq.price.values.mean()),
            'foc_max_abs': foc.max_abs,
            'linear_reference': linear_contract_solution(self.config).to_dict(),
        }
        self.outputs.append(write_json(self.out_dir / 'principal_report.json', payload))
        self.outputs.append(write_csv(self.out_dir / 'foc_residuals.csv', self._foc_frame(eq, adjoint, foc)))
        print(f"✓ JP = {J:.6f} ± {se:.2e}")

    def verify_focs(self) -> bool:
        """Writes the residuals; False when the analytic residual exceeds FOC_TOL"""
        eq, contracts = self._principal_state()
        adjoint = adjoint_closed_form(eq, contracts, self.spec.utility, seed=self.seed, threads=self.threads)
        foc = foc_residual(eq, contracts, self.spec.utility, adjoint)
        mc = foc_residual(eq, contracts, self.spec.utility, adjoint, method='monte_carlo')
        self.outputs.append(write_csv(self.out_dir / 'foc_residuals.csv', self._foc_frame(eq, adjoint, foc)))
        ratio_X = np.abs(mc.residual_X) / np.maximum(mc.se_X, 1e-300)
        summary = {
            'max_abs_residual': foc.max_abs,
            'tolerance': FOC_TOL,
            'passed': foc.max_abs <= FOC_TOL,
            'max_abs_residual_monte_carlo': mc.max_abs,
            'within_3se_fraction_X': float(np.mean((np.abs(mc.residual_X) <= 3 * mc.se_X) | (mc.residual_X == 0))),
            'max_se_ratio_X': float(ratio_X[np.isfinite(ratio_X)].max()) if np.isfinite(ratio_X).any() else 0.0,
            'L_is_zero': adjoint.L_is_zero,
        }
        self.outputs.append(write_json(self.out_dir / 'foc_summary.json', summary))
        if foc.max_abs > FOC_TOL:
            print(f"❌ Max |FOC residual| = {foc.max_abs:.3e} exceeds {FOC_TOL:g}")
            return False
        print(f"✓ Max |FOC residual| = {foc.max_abs:.3e}")
        return True

    def optimize_contract(self):
        if self.spec.family is None:
            raise ConfigError(3, ["family: required for optimize-contract"])
        print(f"🔄 Searching {self.spec.family.kind} contracts (budget {self.spec.budget} solves)...")
        try:
            report = optimize_contract(self.spec.family, self.config, self.spec.utility,
                                       self.spec.budget, self._settings(), verbose=self.verbose)
        except BudgetExhausted as e:
            print(f"⚠️  {e}; reporting the best member found")
            report = e.report
        self.outputs.extend(report.save(self.out_dir))
        print(f"✓ Best JP = {report.J:.6f} ± {report.J_se:.2e} at {report.params}")

# ============================================================================
# MAIN EXECUTION
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='run_experiment.py',
                                     description='REC market mean-field experiments')
    sub = parser.add_subparsers(dest='subcommand', required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument('-c', '--config', required=True, help='experiment JSON file')
        p.add_argument('--out', help='output directory (default: $REC_MFG_OUT_DIR or runs/latest)')
        p.add_argument('--threads', type=int, help='worker cap (default: $REC_MFG_THREADS or 1)')
        p.add_argument('--seed', type=int, help='overrides rng_seed from the config')
        p.add_argument('--verbose', action='store_true')
        if name == 'simulate':
            p.add_argument('-N', type=int, default=400, help='number of agents')
            p.add_argument('--dump-paths', action='store_true', help='write paths.csv')
            p.add_argument('--multinomial', action='store_true',
                           help='draw sub-population sizes from a multinomial instead of rounding N*pi')
    return parser


def _persist_failure(out_dir: Path, error: Exception) -> Path:
    payload = {'error': type(error).__name__, 'message': str(error)}
    if isinstance(error, MaxIterations):
        payload['residual_history'] = error.history
    return write_json(out_dir / 'failure.json', payload)


def run_subcommand(argv: Optional[Sequence[str]] = None) -> int:
    """Execute one subcommand and return its exit code"""
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0

    started = time.time()
    started_at = time.strftime('%Y-%m-%dT%H:%M:%S', time.localtime(started))
    out_dir = Path(args.out or os.getenv('REC_MFG_OUT_DIR', 'runs/latest'))
    threads = args.threads or int(os.getenv('REC_MFG_THREADS', '1'))
    verbose = args.verbose or os.getenv('REC_MFG_VERBOSE', 'false').lower() == 'true'

    print_header(f"REC MARKET: {args.subcommand}")
    try:
        spec = parse_config(args.config)
    except ConfigError as e:
        print(f"❌ Config {args.config} rejected:")
        for message in e.messages:
            print(f"   {message}")
        return e.code

    seed = args.seed if args.seed is not None else spec.config.rng_seed
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = ExperimentRunner(spec, out_dir, seed, threads, verbose)
    status, code = 'ok', 0
    try:
        if args.subcommand == 'solve-mfg':
            runner.solve_mfg()
        elif args.subcommand == 'simulate':
            runner.simulate(args.N, args.dump_paths, args.multinomial)
        elif args.subcommand == 'oracle-check':
            runner.oracle_check()
        elif args.subcommand == 'evaluate-contract':
            runner.evaluate_contract()
        elif args.subcommand == 'verify-focs':
            if not runner.verify_focs():
                status, code = 'foc_threshold_exceeded', 1
        else:
            runner.optimize_contract()
    except ConfigError as e:
        for message in e.messages:
            print(f"❌ {message}")
        return e.code
    except RecMarketError as e:
        print(f"❌ {type(e).__name__}: {e}")
        runner.outputs.append(_persist_failure(out_dir, e))
        status, code = 'numerical_failure', 1

    manifest = RunManifest(
        config_hash=spec.config_hash, subcommand=args.subcommand, seed=seed, version=VERSION,
        wall_time=round(time.time() - started, 3),
        outputs=[{'file': p.name, 'sha256': file_sha256(p)} for p in runner.outputs],
        defaults_applied=spec.defaults_applied, started_at=started_at, status=status)
    manifest.write(out_dir)
    if code == 0:
        print(f"\n✅ Done. Results in {out_dir}/")
    return code


def main():
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
