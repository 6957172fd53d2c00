"""Closed-loop NMPC simulation under a modelled computational budget."""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from . import models
from .diagnostics import kkt_residual, tracking_error
from .problem import BlockNLP, PrimalDual, eval_aug_lagrangian, eval_constraints
from .solver import SolverConfig, full_solve, new_curvature, track_step

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BudgetModel:
    power: float  # sweeps per second

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError("power must be positive")


def compute_budget(b: BudgetModel, dt: float, D: int = 1):
    """Sweeps available in one period and their split over D homotopy stages."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if D < 1:
        raise ValueError("D must be >= 1")
    # guard against 2000 * 0.018 landing a hair under 36
    M = int(math.floor(b.power * dt + 1e-9))
    if M == 0:
        warnings.warn("budget exhausted: no primal sweep fits in one period", RuntimeWarning)
    per = M // D
    stages = [per] * D
    stages[-1] += M - per * D
    return M, stages


def integrate_plant(rhs: Callable, x0, u, dt: float, rtol=1e-8, atol=1e-8) -> np.ndarray:
    """State after dt under a held input (Dormand-Prince 5(4), adaptive)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x0 = np.asarray(x0, dtype=float)
    sol = solve_ivp(lambda t, x: rhs(x, u), (0.0, dt), x0, method="RK45", rtol=rtol, atol=atol)
    if sol.status != 0:
        raise IntegrationError(f"plant integration failed: {sol.message}")
    return sol.y[:, -1]


# ------------------------------------------------------------- experiments

class Experiment:
    """What the harness needs from a model: NLP, parameter packing, plant."""

    name: str
    nlp: BlockNLP
    dt: float
    x_init: np.ndarray

    def parameter(self, x, t: float) -> np.ndarray:
        raise NotImplementedError

    def first_input(self, z) -> np.ndarray:
        raise NotImplementedError

    def plant_rhs(self, x, u) -> np.ndarray:
        raise NotImplementedError

    def initial_guess(self, s) -> np.ndarray:
        raise NotImplementedError

    def output(self, x) -> float:
        raise NotImplementedError


class DcMotorExperiment(Experiment):
    def __init__(self, dt=0.018, N=30, params=models.DcMotorParams(), limits=models.DcMotorLimits(),
                 weights=(10.0, 0.01), x0_speed=0.0):
        self.name = "dc-motor"
        self.dt = dt
        self.params = params
        self.nlp = models.build_dc_motor_nlp(params, limits, N, dt, weights)
        self.x_init, self.u_eq = models.dc_motor_equilibrium(x0_speed, params)

    def parameter(self, x, t):
        return models.dc_motor_parameter(x, models.dc_reference(t))

    def first_input(self, z):
        return self.nlp.layout.first_input(z)

    def plant_rhs(self, x, u):
        return models.dc_motor_rhs(x, u, self.params)

    def initial_guess(self, s):
        lo, up = self.nlp.blocks[0].box.lower, self.nlp.blocks[0].box.upper
        return np.clip(models.dc_motor_rollout(self.nlp, s, self.u_eq, self.params), lo, up)

    def output(self, x):
        return float(x[1])


class UnicycleExperiment(Experiment):
    def __init__(self, spec: models.UnicycleFormationSpec = models.UnicycleFormationSpec()):
        self.name = "unicycles"
        self.spec = spec
        self.dt = spec.dt
        self.nlp = models.build_unicycle_nlp(spec)
        lead = spec.path(0.0)
        self.x_init = np.concatenate([lead, lead - np.asarray(spec.d12), lead - np.asarray(spec.d13)])

    def parameter(self, x, t):
        return models.unicycle_parameter(np.reshape(x, (3, 3)), models.unicycle_reference_window(self.spec, t))

    def first_input(self, z):
        lay = self.nlp.layout
        return np.concatenate([lay.split_agent(z[self.nlp.slices[a]], a)[1][0] for a in range(3)])

    def plant_rhs(self, x, u):
        x = np.reshape(x, (3, 3))
        u = np.reshape(u, (3, 2))
        return np.concatenate([models.unicycle_rhs(x[a], u[a]) for a in range(3)])

    def initial_guess(self, s):
        return models.unicycle_rollout(self.nlp, s)

    def output(self, x):
        return models.formation_error(x[0:3], x[3:6], self.spec.d12)


class ToyQPExperiment(Experiment):
    """Parameter ramp s(t) = slope * t fed to the toy QP (no physical plant)."""

    def __init__(self, dt=0.1, slope=0.1):
        self.name = "toy-qp"
        self.dt = dt
        self.slope = slope
        self.nlp = models.build_toy_qp()
        self.x_init = np.array([0.0])

    def parameter(self, x, t):
        return np.array([float(x[0])])

    def first_input(self, z):
        return np.array(z[:1])

    def plant_rhs(self, x, u):
        return np.array([self.slope])

    def initial_guess(self, s):
        return np.full(2, s[0] / 2)

    def output(self, x):
        return float(x[0])


# ------------------------------------------------------------------ traces

@dataclass
class ClosedLoopTrace:
    model: str
    dt: float
    rho: float
    M: int
    D: int
    seed: Optional[int]
    k: list = field(default_factory=list)
    t: list = field(default_factory=list)
    s: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u: list = field(default_factory=list)
    omega: list = field(default_factory=list)
    feas: list = field(default_factory=list)
    auglag: list = field(default_factory=list)
    M_used: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    sweep_reports: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    failure: Optional[str] = None

    def append(self, k, t, s, x, u, omega, feas, auglag, m_used, wall):
        self.k.append(k)
        self.t.append(t)
        self.s.append(np.array(s, dtype=float))
        self.x.append(np.array(x, dtype=float))
        self.u.append(np.array(u, dtype=float))
        self.omega.append(float(omega))
        self.feas.append(float(feas))
        self.auglag.append(float(auglag))
        self.M_used.append(int(m_used))
        self.wall.append(float(wall))

    def __len__(self):
        return len(self.k)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.t)

    @property
    def states(self) -> np.ndarray:
        return np.asarray(self.x)

    def window(self, t0: float, t1: float) -> np.ndarray:
        t = self.times
        return (t >= t0 - 1e-9) & (t <= t1 + 1e-9)

    def header(self):
        cols = ["k", "t"]
        cols += [f"s_{j}" for j in range(len(self.s[0]))] if self.s else []
        cols += [f"x_plant_{j}" for j in range(len(self.x[0]))] if self.x else []
        cols += [f"u_applied_{j}" for j in range(len(self.u[0]))] if self.u else []
        return cols + ["omega", "feasG", "auglag", "M_used", "D", "rho", "dt", "seed"]

    def rows(self):
        g = "{:.17g}".format
        for i in range(len(self)):
            yield ([str(self.k[i]), g(self.t[i])]
                   + [g(v) for v in self.s[i]] + [g(v) for v in self.x[i]] + [g(v) for v in self.u[i]]
                   + [g(self.omega[i]), g(self.feas[i]), g(self.auglag[i]), str(self.M_used[i]),
                      str(self.D), g(self.rho), g(self.dt), "" if self.seed is None else str(self.seed)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            w.writerows(self.rows())


def output_error(exp: Experiment, trace: ClosedLoopTrace, reference: ClosedLoopTrace,
                 t0: float = 2.0, t1: float = 4.0) -> float:
    """Tracking error E between two traces of the same experiment over [t0, t1]."""
    n = min(len(trace), len(reference))
    tt = trace.times[:n]
    if not np.allclose(tt, reference.times[:n]):
        raise ValueError("traces are sampled on different grids")
    mask = (tt >= t0 - 1e-9) & (tt <= t1 + 1e-9)
    y_bar = [exp.output(x) for x in trace.states[:n][mask]]
    y_star = [exp.output(x) for x in reference.states[:n][mask]]
    return tracking_error(y_star, y_bar)


# ----------------------------------------------------------------- drivers

def initial_solution(exp: Experiment, rho: float, tol: float = 1e-7) -> PrimalDual:
    s0 = exp.parameter(exp.x_init, 0.0)
    w = PrimalDual(exp.initial_guess(s0), np.zeros(exp.nlp.n_g))
    return full_solve(exp.nlp, w, s0, rho, tol)


def perturb(nlp: BlockNLP, w: PrimalDual, magnitude: float, seed) -> PrimalDual:
    rng = np.random.default_rng(seed)
    z = nlp.project(w.z + rng.uniform(-magnitude, magnitude, w.z.size))
    mu = w.mu + rng.uniform(-magnitude, magnitude, w.mu.size)
    return PrimalDual(z, mu)


def run_closed_loop(exp: Experiment, cfg: SolverConfig, budget: BudgetModel, duration: float,
                    seed: int = 0, perturbation: float = 0.05, w_star0: Optional[PrimalDual] = None,
                    keep_reports: bool = False, keep_iterates: bool = False,
                    step: Callable = track_step) -> ClosedLoopTrace:
    """Suboptimal NMPC loop: one tracking step per sampling period.

    ``cfg.M`` is overridden by the budget.  ``step`` has the signature of
    ``track_step``; passing another tracking routine lets two code paths be
    compared on the same loop.  Solver failures are logged with the step
    index and re-raised.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    nlp = exp.nlp
    M, _ = compute_budget(budget, exp.dt, cfg.D)
    cfg = SolverConfig(**{**cfg.__dict__, "M": M})
    trace = ClosedLoopTrace(exp.name, exp.dt, cfg.rho, M, cfg.D, seed)
    if w_star0 is None:
        w_star0 = initial_solution(exp, cfg.rho)
    w = perturb(nlp, w_star0, perturbation, seed)
    curvature = new_curvature(nlp, cfg)
    x = np.array(exp.x_init, dtype=float)
    s_prev = exp.parameter(x, 0.0)
    n_steps = int(round(duration / exp.dt))
    for k in range(n_steps):
        t = k * exp.dt
        s = exp.parameter(x, t)
        tic = time.perf_counter()
        try:
            res = step(nlp, w, s, cfg, s_prev=s_prev, curvature=curvature)
        except Exception as err:  # keep the trace up to the failure
            trace.failure = f"step {k}: {err}"
            log.error("closed loop stopped: %s", trace.failure)
            raise
        wall = time.perf_counter() - tic
        w = res.w_out
        u = exp.first_input(w.z)
        trace.append(k, t, s, x, u, res.omega, res.feas, res.auglag, res.sweeps, wall)
        if keep_reports:
            trace.sweep_reports.append(res.reports)
        if keep_iterates:
            trace.iterates.append(w.copy())
        x = integrate_plant(exp.plant_rhs, x, u, exp.dt)
        s_prev = s
    return trace


def run_reference_loop(exp: Experiment, rho: float, duration: float, tol: float = 1e-7,
                       w_star0: Optional[PrimalDual] = None) -> ClosedLoopTrace:
    """Same loop with every NLP solved to tolerance (the full-accuracy baseline)."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    nlp = exp.nlp
    trace = ClosedLoopTrace(exp.name, exp.dt, rho, 0, 1, None)
    w = initial_solution(exp, rho, tol) if w_star0 is None else w_star0.copy()
    x = np.array(exp.x_init, dtype=float)
    n_steps = int(round(duration / exp.dt))
    for k in range(n_steps):
        t = k * exp.dt
        s = exp.parameter(x, t)
        tic = time.perf_counter()
        w = full_solve(nlp, w, s, rho, tol)
        wall = time.perf_counter() - tic
        u = exp.first_input(w.z)
        omega = kkt_residual(nlp, w.z, w.mu, s, rho)
        feas = float(np.linalg.norm(eval_constraints(nlp, w.z, s)))
        trace.append(k, t, s, x, u, omega, feas, eval_aug_lagrangian(nlp, w.z, w.mu, s, rho), 0, wall)
        x = integrate_plant(exp.plant_rhs, x, u, exp.dt)
    return trace
