"""Experiment problems built as BlockNLP instances.

* bilinear DC motor, explicit Euler transcription, one block (P = 1);
* three-unicycle formation, RK4 transcription, leader block then the two
  followers updated in parallel (P = 2);
* a two-variable parametric QP with a closed-form KKT point.

Every model pins the quantities that change online (initial state,
reference) through extra variables so that the constraints are affine in s.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .problem import BlockNLP, BlockSpec, BoxSet

WIDE = 50.0  # half-width of the box on pinned copies of parameters


# ---------------------------------------------------------------- DC motor

@dataclass(frozen=True)
class DcMotorParams:
    L_a: float = 0.307
    R_a: float = 12.548
    k_m: float = 0.22567
    J: float = 0.00385
    B: float = 0.00783
    tau_l: float = 1.47
    u_a: float = 60.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"DC motor parameter {f.name} must be positive")


@dataclass(frozen=True)
class DcMotorLimits:
    x_lower: tuple = (-2.0, -8.0)
    x_upper: tuple = (5.0, 1.5)
    u_lower: float = 1.27
    u_upper: float = 1.4

    def __post_init__(self):
        if np.any(np.asarray(self.x_lower) >= np.asarray(self.x_upper)) or self.u_lower >= self.u_upper:
            raise ValueError("limits need lower < upper")


def dc_motor_matrices(p: DcMotorParams = DcMotorParams()):
    """(A, B, c) of xdot = A x + (B x) u + c."""
    A = np.array([[-p.R_a / p.L_a, 0.0], [0.0, -p.B / p.J]])
    B = np.array([[0.0, -p.k_m / p.L_a], [p.k_m / p.J, 0.0]])
    c = np.array([p.u_a / p.L_a, -p.tau_l / p.J])
    return A, B, c


def dc_motor_rhs(x, u, p: DcMotorParams = DcMotorParams()) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = float(np.asarray(u).reshape(-1)[0])
    return np.array([
        -(p.R_a / p.L_a) * x[0] - (p.k_m / p.L_a) * x[1] * u + p.u_a / p.L_a,
        -(p.B / p.J) * x[1] + (p.k_m / p.J) * x[0] * u - p.tau_l / p.J,
    ])


def dc_motor_equilibrium(speed: float = 0.0, p: DcMotorParams = DcMotorParams()):
    """Steady state (x, u) with angular speed ``speed``."""
    # x1 = (u_a - k_m x2 u)/R_a and B x2 = k_m x1 u - tau_l  ->  quadratic in u
    a = -(p.k_m**2) * speed / p.R_a
    b = p.k_m * p.u_a / p.R_a
    c = -(p.B * speed + p.tau_l)
    if a == 0.0:
        u = -c / b
    else:
        disc = np.sqrt(b * b - 4 * a * c)
        roots = [(-b + disc) / (2 * a), (-b - disc) / (2 * a)]
        u = min((r for r in roots if r > 0), key=lambda r: abs(r - 1.35))
    x1 = (p.u_a - p.k_m * speed * u) / p.R_a
    return np.array([x1, speed]), float(u)


@dataclass(frozen=True)
class DcMotorLayout:
    N: int

    @property
    def n_states(self):
        return 2 * (self.N + 1)

    @property
    def n_z(self):
        return self.n_states + self.N + 1

    def split(self, z):
        N = self.N
        X = z[: self.n_states].reshape(N + 1, 2)
        U = z[self.n_states : self.n_states + N]
        return X, U, z[-1]

    def pack(self, X, U, r):
        return np.concatenate([np.asarray(X, float).ravel(), np.asarray(U, float).ravel(), [float(r)]])

    def first_input(self, z):
        return np.array([z[self.n_states]])

    def output(self, z):
        return self.split(z)[0][:, 1]


def dc_motor_parameter(x0, ref) -> np.ndarray:
    """s = (measured state, current speed reference)."""
    return np.array([float(x0[0]), float(x0[1]), float(ref)])


def build_dc_motor_nlp(params: DcMotorParams = DcMotorParams(), limits: DcMotorLimits = DcMotorLimits(),
                       N: int = 30, dt: float = 0.018, weights=(10.0, 0.01)) -> BlockNLP:
    """Euler-discretised tracking NMPC for the DC motor.

    z = (x_0, x_1, ..., x_N, u_0, ..., u_{N-1}, r) where x_0 and r are pinned
    to the parameter s = (x_init, ref).  Constraints are ordered
    (x_0 pin, N Euler defects, r pin).
    """
    if N < 1:
        raise ValueError("horizon N must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    q_y, r_u = map(float, weights)
    lay = DcMotorLayout(N)
    A, Bm, c = dc_motor_matrices(params)
    a11, a22 = A[0, 0], A[1, 1]
    b12, b21 = Bm[0, 1], Bm[1, 0]

    def cost(z):
        X, U, r = lay.split(z)
        e = X[1:, 1] - r
        return q_y * float(e @ e) + r_u * float(U @ U)

    def cost_grad(z):
        X, U, r = lay.split(z)
        e = X[1:, 1] - r
        gX = np.zeros((N + 1, 2))
        gX[1:, 1] = 2 * q_y * e
        return lay.pack(gX, 2 * r_u * U, -2 * q_y * e.sum())

    def constraint(z):
        X, U, r = lay.split(z)
        x, xn = X[:-1], X[1:]
        f = np.column_stack([a11 * x[:, 0] + b12 * x[:, 1] * U + c[0],
                             a22 * x[:, 1] + b21 * x[:, 0] * U + c[1]])
        return np.concatenate([X[0], (xn - x - dt * f).ravel(), [r]])

    def constraint_vjp(z, v):
        X, U, r = lay.split(z)
        x = X[:-1]
        w = v[2 : 2 + 2 * N].reshape(N, 2)
        gX = np.zeros((N + 1, 2))
        gX[0] += v[:2]
        gX[1:] += w
        gX[:-1, 0] -= w[:, 0] + dt * (a11 * w[:, 0] + b21 * U * w[:, 1])
        gX[:-1, 1] -= w[:, 1] + dt * (b12 * U * w[:, 0] + a22 * w[:, 1])
        gU = -dt * (b12 * x[:, 1] * w[:, 0] + b21 * x[:, 0] * w[:, 1])
        return lay.pack(gX, gU, v[-1])

    T = np.zeros((2 * N + 3, 3))
    T[0, 0] = T[1, 1] = -1.0
    T[-1, 2] = -1.0
    xl, xu = np.asarray(limits.x_lower, float), np.asarray(limits.x_upper, float)
    lower = lay.pack(np.vstack([[-WIDE, -WIDE], np.tile(xl, (N, 1))]), np.full(N, limits.u_lower), -10.0)
    upper = lay.pack(np.vstack([[WIDE, WIDE], np.tile(xu, (N, 1))]), np.full(N, limits.u_upper), 10.0)
    block = BlockSpec("motor", BoxSet(lower, upper), 0, cost, cost_grad, constraint, constraint_vjp, T)
    nlp = BlockNLP([block], param_dim=3, degree_hint=4, name="dc-motor")
    nlp.layout = lay
    nlp.dt = dt
    return nlp


def dc_motor_rollout(nlp: BlockNLP, s, U, params: DcMotorParams = DcMotorParams()) -> np.ndarray:
    """Exact Euler rollout from s[:2] under inputs U, reference pinned to s[2]."""
    lay = nlp.layout
    X = np.empty((lay.N + 1, 2))
    X[0] = s[:2]
    U = np.broadcast_to(np.asarray(U, float), (lay.N,))
    for t in range(lay.N):
        X[t + 1] = X[t] + nlp.dt * dc_motor_rhs(X[t], U[t], params)
    return lay.pack(X, U, s[2])


def dc_reference(t: float, switches=(2.0, 4.0), level: float = 2.0) -> float:
    """Speed reference +level on [0, 2), -level on [2, 4), +level afterwards."""
    n = sum(t >= ts - 1e-12 for ts in switches)
    return level if n % 2 == 0 else -level


# --------------------------------------------------------------- unicycles

def unicycle_rhs(x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    return np.array([u[0] * np.cos(x[2]), u[0] * np.sin(x[2]), u[1]])


def _f(x, u):
    # vectorised over rows
    return np.column_stack([u[:, 0] * np.cos(x[:, 2]), u[:, 0] * np.sin(x[:, 2]), u[:, 1]])


def rk4_step(x, u, h):
    """One RK4 step of the unicycle dynamics, vectorised over rows of x, u."""
    k1 = _f(x, u)
    k2 = _f(x + 0.5 * h * k1, u)
    k3 = _f(x + 0.5 * h * k2, u)
    k4 = _f(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_step_vjp(x, u, h, lam):
    """Reverse-mode derivative of rk4_step: returns (d/dx, d/du) of lam . x_next."""
    k1 = _f(x, u)
    a2 = x + 0.5 * h * k1
    k2 = _f(a2, u)
    a3 = x + 0.5 * h * k2
    k3 = _f(a3, u)
    a4 = x + h * k3

    def fx_t(a, l):
        out = np.zeros_like(l)
        out[:, 2] = u[:, 0] * (-np.sin(a[:, 2]) * l[:, 0] + np.cos(a[:, 2]) * l[:, 1])
        return out

    def fu_t(a, l):
        return np.column_stack([np.cos(a[:, 2]) * l[:, 0] + np.sin(a[:, 2]) * l[:, 1], l[:, 2]])

    lx = lam.copy()
    lk4 = (h / 6.0) * lam
    lk3 = (h / 3.0) * lam
    lk2 = (h / 3.0) * lam
    lk1 = (h / 6.0) * lam
    la4 = fx_t(a4, lk4)
    lu = fu_t(a4, lk4)
    lx += la4
    lk3 = lk3 + h * la4
    la3 = fx_t(a3, lk3)
    lu += fu_t(a3, lk3)
    lx += la3
    lk2 = lk2 + 0.5 * h * la3
    la2 = fx_t(a2, lk2)
    lu += fu_t(a2, lk2)
    lx += la2
    lk1 = lk1 + 0.5 * h * la2
    lx += fx_t(x, lk1)
    lu += fu_t(x, lk1)
    return lx, lu


@dataclass(frozen=True)
class WaypointPath:
    """Constant-speed piecewise-linear path; heading follows the active segment."""

    waypoints: tuple = ((0.0, 0.0), (4.0, 0.0), (4.0, 4.0))
    speed: float = 0.3

    def __post_init__(self):
        if len(self.waypoints) < 2 or not self.speed > 0:
            raise ValueError("need >= 2 waypoints and positive speed")

    @property
    def _segments(self):
        P = np.asarray(self.waypoints, dtype=float)
        d = np.diff(P, axis=0)
        lengths = np.linalg.norm(d, axis=1)
        return P, d, lengths

    def switch_times(self) -> np.ndarray:
        """Times at which the reference switches to the next waypoint.

        Only interior waypoints count; the path simply stops at the last one.
        """
        _, _, lengths = self._segments
        return np.cumsum(lengths)[:-1] / self.speed

    def __call__(self, t: float) -> np.ndarray:
        P, d, lengths = self._segments
        s = max(t, 0.0) * self.speed
        cum = np.concatenate([[0.0], np.cumsum(lengths)])
        j = int(np.searchsorted(cum, s, side="right") - 1)
        j = min(j, len(lengths) - 1)
        frac = min((s - cum[j]) / lengths[j], 1.0)
        pos = P[j] + frac * d[j]
        return np.array([pos[0], pos[1], np.arctan2(d[j, 1], d[j, 0])])


@dataclass(frozen=True)
class UnicycleFormationSpec:
    N: int = 20
    dt: float = 0.35
    Q1: tuple = (10.0, 10.0, 1.0)
    Q12: tuple = (5.0, 5.0, 0.0)
    Q13: tuple = (5.0, 5.0, 0.0)
    R1: tuple = (0.1, 0.1)
    R2: tuple = (0.1, 0.1)
    R3: tuple = (0.1, 0.1)
    d12: tuple = (-0.5, 0.5, 0.0)
    d13: tuple = (-0.5, -0.5, 0.0)
    path: WaypointPath = field(default_factory=WaypointPath)
    u1_bounds: tuple = (0.0, 0.5)
    u2_bounds: tuple = (-np.pi / 2, np.pi / 2)
    # stage costs are h * cost_scale * (weighted squares); the scale sets the
    # cost against the penalty rho and so governs how fast sweeps make progress
    cost_scale: float = 100.0

    def __post_init__(self):
        if self.N < 1 or not self.dt > 0:
            raise ValueError("need N >= 1 and dt > 0")
        if not self.cost_scale > 0:
            raise ValueError("cost_scale must be positive")
        for name in ("Q1", "R1", "R2", "R3"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be positive definite")
        for name in ("Q12", "Q13"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(f"{name} must be positive semi-definite")


@dataclass(frozen=True)
class UnicycleLayout:
    N: int

    def agent_dim(self, a: int) -> int:
        return 3 * (self.N + 1) + 2 * self.N + (3 * self.N if a == 0 else 0)

    def split_agent(self, za, a: int):
        N = self.N
        X = za[: 3 * (N + 1)].reshape(N + 1, 3)
        U = za[3 * (N + 1) : 3 * (N + 1) + 2 * N].reshape(N, 2)
        R = za[3 * (N + 1) + 2 * N :].reshape(N, 3) if a == 0 else None
        return X, U, R

    def pack_agent(self, X, U, R=None):
        parts = [np.asarray(X, float).ravel(), np.asarray(U, float).ravel()]
        if R is not None:
            parts.append(np.asarray(R, float).ravel())
        return np.concatenate(parts)

    @property
    def param_dim(self):
        return 9 + 3 * self.N


def unicycle_parameter(x0s, ref_window) -> np.ndarray:
    """s = (x0 of agent 1, 2, 3, reference points r_1..r_N)."""
    return np.concatenate([np.asarray(x, float).ravel() for x in x0s] + [np.asarray(ref_window, float).ravel()])


def unicycle_reference_window(spec: UnicycleFormationSpec, t: float) -> np.ndarray:
    return np.array([spec.path(t + j * spec.dt) for j in range(1, spec.N + 1)])


def build_unicycle_nlp(spec: UnicycleFormationSpec = UnicycleFormationSpec()) -> BlockNLP:
    """Distributed formation NMPC: leader in group 0, followers in group 1."""
    N, h = spec.N, spec.dt
    wc = h * spec.cost_scale
    lay = UnicycleLayout(N)
    p = lay.param_dim
    Q1 = np.asarray(spec.Q1, float)
    Qc = [np.asarray(spec.Q12, float), np.asarray(spec.Q13, float)]
    Rs = [np.asarray(r, float) for r in (spec.R1, spec.R2, spec.R3)]
    offs = [np.asarray(spec.d12, float), np.asarray(spec.d13, float)]

    def make_cost(a):
        R = Rs[a]

        def cost(za):
            X, U, Rf = lay.split_agent(za, a)
            val = wc * float(np.sum(U * U * R))
            if a == 0:
                e = X[1:] - Rf
                val += wc * float(np.sum(e * e * Q1))
            return val

        def grad(za):
            X, U, Rf = lay.split_agent(za, a)
            gX = np.zeros_like(X)
            gU = 2 * wc * U * R
            gR = None
            if a == 0:
                e = X[1:] - Rf
                gX[1:] = 2 * wc * e * Q1
                gR = -2 * wc * e * Q1
            return lay.pack_agent(gX, gU, gR)

        return cost, grad

    def make_constraint(a):
        def g(za):
            X, U, Rf = lay.split_agent(za, a)
            parts = [X[0], (X[1:] - rk4_step(X[:-1], U, h)).ravel()]
            if a == 0:
                parts.append(Rf.ravel())
            return np.concatenate(parts)

        def vjp(za, v):
            X, U, Rf = lay.split_agent(za, a)
            w = v[3 : 3 + 3 * N].reshape(N, 3)
            lx, lu = rk4_step_vjp(X[:-1], U, h, w)
            gX = np.zeros_like(X)
            gX[0] += v[:3]
            gX[1:] += w
            gX[:-1] -= lx
            gR = v[3 + 3 * N :].reshape(N, 3) if a == 0 else None
            return lay.pack_agent(gX, -lu, gR)

        q = 3 + 3 * N + (3 * N if a == 0 else 0)
        T = np.zeros((q, p))
        T[:3, 3 * a : 3 * a + 3] = -np.eye(3)
        if a == 0:
            T[3 + 3 * N :, 9:] = -np.eye(3 * N)
        return g, vjp, T

    sizes = [lay.agent_dim(a) for a in range(3)]
    starts = np.cumsum([0] + sizes)
    sl = [slice(int(starts[a]), int(starts[a + 1])) for a in range(3)]

    def states(z, a):
        return z[sl[a]][: 3 * (N + 1)].reshape(N + 1, 3)

    def coupling_cost(z):
        X1 = states(z, 0)
        val = 0.0
        for k, a in enumerate((1, 2)):
            e = X1[1:] - states(z, a)[1:] - offs[k]
            val += wc * float(np.sum(e * e * Qc[k]))
        return val

    def coupling_grad(z):
        out = np.zeros(int(starts[-1]))
        X1 = states(z, 0)
        g1 = np.zeros((N + 1, 3))
        for k, a in enumerate((1, 2)):
            e = X1[1:] - states(z, a)[1:] - offs[k]
            ge = 2 * wc * e * Qc[k]
            g1[1:] += ge
            ga = np.zeros((N + 1, 3))
            ga[1:] = -ge
            out[sl[a]][: 3 * (N + 1)] = ga.ravel()
        out[sl[0]][: 3 * (N + 1)] = g1.ravel()
        return out

    box_u = (np.array([spec.u1_bounds[0], spec.u2_bounds[0]]), np.array([spec.u1_bounds[1], spec.u2_bounds[1]]))
    blocks = []
    for a in range(3):
        cost, grad = make_cost(a)
        g, vjp, T = make_constraint(a)
        lower = lay.pack_agent(np.full((N + 1, 3), -WIDE), np.tile(box_u[0], (N, 1)),
                               np.full((N, 3), -WIDE) if a == 0 else None)
        upper = lay.pack_agent(np.full((N + 1, 3), WIDE), np.tile(box_u[1], (N, 1)),
                               np.full((N, 3), WIDE) if a == 0 else None)
        blocks.append(BlockSpec(f"agent{a + 1}", BoxSet(lower, upper), 0 if a == 0 else 1,
                                cost, grad, g, vjp, T))
    nlp = BlockNLP(blocks, param_dim=p, coupling_cost=coupling_cost, coupling_cost_grad=coupling_grad,
                   degree_hint=2, name="unicycles")
    expected = 3 * (3 * N + 3) + 3 * N
    assert nlp.n_g == expected, (nlp.n_g, expected)
    nlp.layout = lay
    nlp.spec = spec
    nlp.dt = h
    return nlp


def unicycle_rollout(nlp: BlockNLP, s, U=None) -> np.ndarray:
    """Feasible point: every agent integrated by RK4 from its initial state in s."""
    lay, h, N = nlp.layout, nlp.dt, nlp.layout.N
    parts = []
    for a in range(3):
        Ua = np.zeros((N, 2)) if U is None else np.asarray(U[a], float).reshape(N, 2)
        X = np.empty((N + 1, 3))
        X[0] = s[3 * a : 3 * a + 3]
        for t in range(N):
            X[t + 1] = rk4_step(X[t : t + 1], Ua[t : t + 1], h)[0]
        parts.append(lay.pack_agent(X, Ua, s[9:].reshape(N, 3) if a == 0 else None))
    return np.concatenate(parts)


def formation_error(x_leader, x_follower, d) -> float:
    return float(np.linalg.norm(np.asarray(x_leader)[:2] - np.asarray(x_follower)[:2] - np.asarray(d)[:2]))


# ------------------------------------------------------------------ toy QP

def build_toy_qp(box: float = 10.0) -> BlockNLP:
    """min ||z||^2  s.t.  z_1 + z_2 = s,  z in [-box, box]^2."""
    block = BlockSpec(
        "toy",
        BoxSet([-box, -box], [box, box]),
        0,
        cost=lambda z: float(z @ z),
        cost_grad=lambda z: 2.0 * z,
        constraint=lambda z: np.array([z[0] + z[1]]),
        constraint_vjp=lambda z, v: np.array([v[0], v[0]]),
        T=np.array([[-1.0]]),
    )
    return BlockNLP([block], param_dim=1, degree_hint=2, name="toy-qp")


def toy_qp_kkt(s: float):
    """Closed-form KKT point (z*, mu*) of the toy QP for |s| <= 2 box."""
    z = np.array([s / 2.0, s / 2.0])
    return z, np.array([-s])


# ------------------------------------------------------------- config file

def read_config(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment.

    Values are floats, ints, comma-separated tuples of floats, or
    semicolon-separated lists of such tuples (waypoints).  Anything else
    stays a string.
    """
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        out[key] = _parse_value(val)
    return out


def _parse_value(val: str):
    def num(tok):
        tok = tok.strip()
        try:
            return int(tok)
        except ValueError:
            return float(tok)

    try:
        if ";" in val:
            return tuple(tuple(num(t) for t in item.split(",")) for item in val.split(";") if item.strip())
        if "," in val:
            return tuple(num(t) for t in val.split(",") if t.strip())
        return num(val)
    except ValueError:
        return val


DC_MOTOR_KEYS = {f.name for f in fields(DcMotorParams)} | {f.name for f in fields(DcMotorLimits)} | {
    "N", "q_y", "r_u", "x0_speed"}
UNICYCLE_KEYS = {f.name for f in fields(UnicycleFormationSpec)} - {"path"} | {"waypoints", "speed"}


def dc_motor_from_config(cfg: dict):
    unknown = set(cfg) - DC_MOTOR_KEYS - {"dt"}
    if unknown:
        raise ValueError(f"unknown dc-motor config keys: {sorted(unknown)}")
    params = DcMotorParams(**{k: float(cfg[k]) for k in cfg if k in {f.name for f in fields(DcMotorParams)}})
    limits = DcMotorLimits(**{k: cfg[k] for k in cfg if k in {f.name for f in fields(DcMotorLimits)}})
    return params, limits, int(cfg.get("N", 30)), (float(cfg.get("q_y", 10.0)), float(cfg.get("r_u", 0.01)))


def unicycle_spec_from_config(cfg: dict, base: UnicycleFormationSpec = UnicycleFormationSpec()):
    unknown = set(cfg) - UNICYCLE_KEYS
    if unknown:
        raise ValueError(f"unknown unicycle config keys: {sorted(unknown)}")
    kw = {k: v for k, v in cfg.items() if k in {f.name for f in fields(UnicycleFormationSpec)}}
    if "N" in kw:
        kw["N"] = int(kw["N"])
    path = base.path
    if "waypoints" in cfg or "speed" in cfg:
        path = WaypointPath(tuple(cfg.get("waypoints", path.waypoints)), float(cfg.get("speed", path.speed)))
    return replace(base, path=path, **kw)
