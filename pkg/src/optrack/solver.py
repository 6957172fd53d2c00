"""Optimality-tracking splitting solver.

One tracking step runs a fixed number of proximal alternating sweeps on the
augmented Lagrangian (Gauss-Seidel over groups, parallel inside a group)
followed by a single first-order multiplier update.  The homotopy variant
splits the parameter jump into D sub-steps, each with its own sweeps and
multiplier update.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .diagnostics import kkt_residual
from .problem import (
    BlockNLP,
    PrimalDual,
    _as_param,
    eval_aug_lagrangian,
    eval_constraints,
)

log = logging.getLogger(__name__)

# predicted changes of L below this fraction of |L| are judged by gradients
_RESOLVE = 1e-8


class CurvatureOverflowError(RuntimeError):
    pass


class NoConvergenceError(RuntimeError):
    def __init__(self, msg, omega=np.nan, feas=np.nan):
        super().__init__(msg)
        self.omega = omega
        self.feas = feas


@dataclass
class SolverConfig:
    rho: float = 100.0
    M: int = 36
    alpha: Sequence[float] | float = 1e-6
    beta: float = 2.0
    c_init: float = 1.0
    c_max: float = 1e12
    c_min: float = 1e-8
    D: int = 1
    reset_curvature: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.M < 0:
            raise ValueError("M must be non-negative")
        if not self.beta > 1:
            raise ValueError("beta must be > 1")
        if not self.c_init > 0 or not self.c_max > self.c_init:
            raise ValueError("need 0 < c_init < c_max")
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if np.any(np.asarray(self.alpha, dtype=float) <= 0):
            raise ValueError("alpha must be positive")

    def alpha_of(self, group: int) -> float:
        a = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        return float(a[0] if a.size == 1 else a[group])

    @property
    def alpha_min(self) -> float:
        return float(np.min(self.alpha))

    def stage_budget(self, D: Optional[int] = None) -> list[int]:
        """Sweeps per homotopy stage; the remainder goes to the last stage."""
        D = self.D if D is None else D
        per = self.M // D
        out = [per] * D
        out[-1] += self.M - per * D
        return out


@dataclass
class SweepReport:
    value_before: float
    value_after: float
    step_norm: float
    curvature: np.ndarray
    backtracks: np.ndarray
    snapshot_grad: np.ndarray = field(repr=False, default=None)

    @property
    def decrease(self) -> float:
        return self.value_before - self.value_after


@dataclass
class TrackStepResult:
    w_out: PrimalDual
    reports: list  # one list of SweepReport per stage
    stage_params: list
    omega: float  # criticality at the final primal iterate, before the last dual update
    feas: float
    auglag: float
    sweeps: int
    prox_calls: int


def new_curvature(nlp: BlockNLP, cfg: SolverConfig) -> np.ndarray:
    return np.full(nlp.n_blocks, float(cfg.c_init))


def bck_min(nlp: BlockNLP, i: int, z, mu, s, cfg: SolverConfig, c: float, *,
            alpha=None, grad=None, value=None, y=None):
    """Backtracking projected-gradient step on block i.

    Returns ``(z_i_new, c_accepted, n_rejections)``.  ``grad``, ``value`` and
    ``y`` (= mu + rho G at z) may be passed to avoid recomputation.
    """
    s = _as_param(s)
    rho = cfg.rho
    sl = nlp.slices[i]
    box = nlp.blocks[i].box
    if alpha is None:
        alpha = cfg.alpha_of(nlp.blocks[i].group)
    if y is None:
        y = mu + rho * eval_constraints(nlp, z, s)
    if grad is None:
        grad = nlp.block_grad(z, i, y)
    if value is None:
        value = eval_aug_lagrangian(nlp, z, mu, s, rho)
    zi = z[sl]
    trial = z.copy()
    rejected = 0
    tiny = _RESOLVE * max(1.0, abs(value))
    while True:
        cand = np.minimum(np.maximum(zi - grad / c, box.lower), box.upper)
        d = cand - zi
        dd = float(d @ d)
        gd = float(grad @ d)
        trial[sl] = cand
        if abs(gd) + c * dd > tiny:
            ok = eval_aug_lagrangian(nlp, trial, mu, s, rho) + 0.5 * alpha * dd <= value + gd + 0.5 * c * dd
        else:
            # L(cand) - L(z) is below the resolution of L itself; test the
            # same curvature condition through the gradient change instead
            # (exact for quadratics, third-order accurate otherwise)
            g_cand = nlp.block_grad(trial, i, mu + rho * eval_constraints(nlp, trial, s))
            ok = 0.5 * float((g_cand - grad) @ d) + 0.5 * alpha * dd <= 0.5 * c * dd
        if ok:
            return cand, c, rejected
        c *= cfg.beta
        rejected += 1
        if c > cfg.c_max:
            raise CurvatureOverflowError(
                f"block {nlp.blocks[i].name!r}: curvature exceeded c_max={cfg.c_max:g}; "
                "callback may be non-smooth or badly scaled"
            )


def primal_sweeps(nlp: BlockNLP, z0, mu, s, cfg: SolverConfig, M: Optional[int] = None,
                  curvature: Optional[np.ndarray] = None, record_residual: bool = False):
    """M Gauss-Seidel sweeps of parallel backtracking steps.

    ``curvature`` (one entry per block) is updated in place.  Returns the
    final iterate and one SweepReport per sweep.
    """
    s = _as_param(s)
    M = cfg.M if M is None else M
    if curvature is None:
        curvature = new_curvature(nlp, cfg)
    z = np.array(z0, dtype=float)
    rho = cfg.rho
    reports = []
    if M == 0:
        return z, reports
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        G = eval_constraints(nlp, z, s)
        value = nlp.cost(z) + float((mu + 0.5 * rho * G) @ G)
        for _ in range(M):
            if cfg.reset_curvature:
                curvature[:] = cfg.c_init
            else:
                np.maximum(curvature / cfg.beta, cfg.c_min, out=curvature)
            z_prev = z.copy()
            v_before = value
            backtracks = np.zeros(nlp.n_blocks, dtype=int)
            snap_grads = {}
            for gid, members in enumerate(nlp.groups):
                snapshot = z.copy()
                y = mu + rho * G
                alpha = cfg.alpha_of(gid)

                def step(i, snapshot=snapshot, y=y, value=value, alpha=alpha):
                    g = nlp.block_grad(snapshot, i, y)
                    zi, c, nb = bck_min(nlp, i, snapshot, mu, s, cfg, curvature[i],
                                        alpha=alpha, grad=g, value=value, y=y)
                    return i, zi, c, nb, g

                results = pool.map(step, members) if pool is not None and len(members) > 1 else map(step, members)
                for i, zi, c, nb, g in results:
                    z[nlp.slices[i]] = zi
                    curvature[i] = c
                    backtracks[i] = nb
                    snap_grads[i] = g
                G = eval_constraints(nlp, z, s)
                value = nlp.cost(z) + float((mu + 0.5 * rho * G) @ G)
            rep = SweepReport(
                value_before=v_before,
                value_after=value,
                step_norm=float(np.linalg.norm(z - z_prev)),
                curvature=curvature.copy(),
                backtracks=backtracks,
            )
            if record_residual:
                # grad at the snapshot each block used, for the relative-error certificate
                rep.snapshot_grad = np.concatenate([snap_grads[i] for i in range(nlp.n_blocks)])
            reports.append(rep)
    finally:
        if pool is not None:
            pool.shutdown()
    return z, reports


def dual_update(nlp: BlockNLP, z, mu, s, rho: float) -> np.ndarray:
    """mu + rho G(z, s)."""
    return np.asarray(mu, dtype=float) + rho * eval_constraints(nlp, z, s)


def _stage_param(s_prev, s_next, j, D):
    return (1.0 - j / D) * s_prev + (j / D) * s_next


def track_direct(nlp: BlockNLP, w_in: PrimalDual, s_next, cfg: SolverConfig,
                 curvature: Optional[np.ndarray] = None) -> TrackStepResult:
    """Fixed-budget sweeps at s_next warm-started at w_in.z, then one dual update."""
    s_next = _as_param(s_next)
    if curvature is None:
        curvature = new_curvature(nlp, cfg)
    mu = w_in.mu
    z, reports = primal_sweeps(nlp, w_in.z, mu, s_next, cfg, cfg.M, curvature)
    omega = kkt_residual(nlp, z, mu, s_next, cfg.rho)
    auglag = eval_aug_lagrangian(nlp, z, mu, s_next, cfg.rho)
    G = eval_constraints(nlp, z, s_next)
    mu_out = mu + cfg.rho * G
    return TrackStepResult(
        w_out=PrimalDual(z, mu_out),
        reports=[reports],
        stage_params=[s_next.copy()],
        omega=omega,
        feas=float(np.linalg.norm(G)),
        auglag=auglag,
        sweeps=cfg.M,
        prox_calls=cfg.M * nlp.P,
    )


def track_homotopy(nlp: BlockNLP, w_in: PrimalDual, s_prev, s_next, cfg: SolverConfig,
                   D: Optional[int] = None, curvature: Optional[np.ndarray] = None) -> TrackStepResult:
    """Continuation from s_prev to s_next in D stages, each with sweeps and a dual update."""
    s_prev = _as_param(s_prev)
    s_next = _as_param(s_next)
    D = cfg.D if D is None else D
    if curvature is None:
        curvature = new_curvature(nlp, cfg)
    budget = cfg.stage_budget(D)
    z = w_in.z
    mu = w_in.mu
    reports, params = [], []
    omega = feas = auglag = np.nan
    for j in range(1, D + 1):
        s = _stage_param(s_prev, s_next, j, D)
        z, rep = primal_sweeps(nlp, z, mu, s, cfg, budget[j - 1], curvature)
        if j == D:
            omega = kkt_residual(nlp, z, mu, s, cfg.rho)
            auglag = eval_aug_lagrangian(nlp, z, mu, s, cfg.rho)
        G = eval_constraints(nlp, z, s)
        mu = mu + cfg.rho * G
        feas = float(np.linalg.norm(G))
        reports.append(rep)
        params.append(s)
    return TrackStepResult(
        w_out=PrimalDual(np.array(z, dtype=float), mu),
        reports=reports,
        stage_params=params,
        omega=omega,
        feas=feas,
        auglag=auglag,
        sweeps=sum(budget),
        prox_calls=sum(budget) * nlp.P,
    )


def track_step(nlp: BlockNLP, w_in: PrimalDual, s_next, cfg: SolverConfig, s_prev=None,
               curvature: Optional[np.ndarray] = None) -> TrackStepResult:
    """One tracking step; dispatches on cfg.D (s_prev is required when D >= 2)."""
    if cfg.D == 1:
        return track_direct(nlp, w_in, s_next, cfg, curvature)
    if s_prev is None:
        raise ValueError("homotopy tracking (D >= 2) needs the previous parameter")
    return track_homotopy(nlp, w_in, s_prev, s_next, cfg, cfg.D, curvature)


@dataclass
class SolveInfo:
    outer: int
    omega: float
    feas: float
    rho_final: float
    inner_iterations: int


def _inner_minimise(nlp, z, mu, s, rho, tol, maxiter):
    def fun(x):
        G = eval_constraints(nlp, x, s)
        y = mu + rho * G
        val = nlp.cost(x) + float((mu + 0.5 * rho * G) @ G)
        return val, nlp.cost_grad(x) + nlp.constraints_vjp(x, y)

    bounds = list(zip(nlp.lower, nlp.upper))
    res = minimize(
        fun, z, jac=True, method="L-BFGS-B", bounds=bounds,
        options=dict(maxiter=maxiter, maxcor=30, ftol=1e-300, gtol=tol / np.sqrt(nlp.n_z)),
    )
    return np.clip(res.x, nlp.lower, nlp.upper), int(res.nit)


def _jacobian(nlp, z):
    rows = np.empty((nlp.n_g, nlp.n_z))
    e = np.zeros(nlp.n_g)
    for r in range(nlp.n_g):
        e[r] = 1.0
        rows[r] = nlp.constraints_vjp(z, e)
        e[r] = 0.0
    return rows


def _lagrangian_grad(nlp, z, mu):
    return nlp.cost_grad(z) + nlp.constraints_vjp(z, mu)


def _newton_polish(nlp, z, mu, s, tol, rho, max_iter=8):
    """Active-set Newton iterations on the KKT system of the NLP.

    The Hessian of the Lagrangian is built by central differences of its
    gradient.  Returns the best (z, mu) found and whether tol was reached.
    """
    def merit(z, mu):
        return max(kkt_residual(nlp, z, mu, s, rho), float(np.linalg.norm(eval_constraints(nlp, z, s))))

    best = (z, mu, merit(z, mu))
    lo, up = nlp.lower, nlp.upper
    for _ in range(max_iter):
        g = _lagrangian_grad(nlp, z, mu)
        trial = z - g
        free = (trial > lo) & (trial < up)
        z = np.where(trial <= lo, lo, np.where(trial >= up, up, z))
        g = _lagrangian_grad(nlp, z, mu)
        G = eval_constraints(nlp, z, s)
        F = np.flatnonzero(free)
        h = 1e-6 * (1.0 + np.max(np.abs(z)))
        H = np.empty((F.size, F.size))
        for k, j in enumerate(F):
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            H[:, k] = (_lagrangian_grad(nlp, zp, mu)[F] - _lagrangian_grad(nlp, zm, mu)[F]) / (2 * h)
        H = 0.5 * (H + H.T)
        Jf = _jacobian(nlp, z)[:, F]
        K = np.block([[H, Jf.T], [Jf, np.zeros((nlp.n_g, nlp.n_g))]])
        rhs = -np.concatenate([g[F], G])
        try:
            step = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(K, rhs, rcond=None)[0]
        z = z.copy()
        z[F] = np.clip(z[F] + step[: F.size], lo[F], up[F])
        mu = mu + step[F.size :]
        m = merit(z, mu)
        if m < best[2]:
            best = (z, mu, m)
        if m <= tol:
            break
    return best[0], best[1], best[2] <= tol


def full_solve(nlp: BlockNLP, w_init: PrimalDual, s, rho: float, tol: float = 1e-7,
               max_outer: int = 500, inner_maxiter: int = 20_000, rho_max: float = 1e6,
               polish_below: float = 1e-2, return_info: bool = False):
    """Solve the NLP at s to tolerance with a method of multipliers.

    Bound-constrained subproblems are minimised with L-BFGS-B; once the
    iterate is close to a KKT point an active-set Newton polish is tried.
    Converged when the criticality measure (at the caller's rho) and ||G||
    are both <= tol.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    s = _as_param(s)
    z = nlp.project(w_init.z)
    mu = np.array(w_init.mu, dtype=float)
    rho_k = float(rho)

    def residuals(z, mu):
        return kkt_residual(nlp, z, mu, s, rho), float(np.linalg.norm(eval_constraints(nlp, z, s)))

    omega, feas = residuals(z, mu)
    total_inner = 0
    outer = 0
    if not (omega <= tol and feas <= tol):
        if max(omega, feas) <= polish_below:
            zp, mp, ok = _newton_polish(nlp, z, mu, s, tol, rho)
            if ok:
                z, mu = zp, mp
        omega, feas = residuals(z, mu)
    if not (omega <= tol and feas <= tol):
        inner_tol = max(0.1 * feas, 0.1 * tol)
        for outer in range(1, max_outer + 1):
            z, nit = _inner_minimise(nlp, z, mu, s, rho_k, inner_tol, inner_maxiter)
            total_inner += nit
            G = eval_constraints(nlp, z, s)
            feas_new = float(np.linalg.norm(G))
            mu = mu + rho_k * G
            omega, feas_chk = residuals(z, mu)
            if omega <= tol and feas_chk <= tol:
                feas = feas_chk
                break
            if max(omega, feas_chk) <= polish_below:
                zp, mp, ok = _newton_polish(nlp, z, mu, s, tol, rho)
                if ok:
                    z, mu = zp, mp
                    omega, feas = residuals(z, mu)
                    break
            if feas_new > 0.5 * feas and rho_k < rho_max:
                rho_k = min(10.0 * rho_k, rho_max)
            feas = feas_new
            inner_tol = max(min(0.1 * feas, inner_tol), 0.01 * tol)
        else:
            raise NoConvergenceError(
                f"full_solve: no convergence in {max_outer} outer rounds "
                f"(omega={omega:.3e}, |G|={feas:.3e})", omega, feas)
    log.debug("full_solve: %d outer rounds, omega=%.2e |G|=%.2e", outer, omega, feas)
    w = PrimalDual(z, mu)
    if return_info:
        return w, SolveInfo(outer, omega, feas, rho_k, total_inner)
    return w
