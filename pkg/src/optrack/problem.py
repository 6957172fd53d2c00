"""Block-structured parametric NLP and the augmented Lagrangian.

The program solved at every sampling instant is

    minimise    J(z)
    subject to  Q_c(z) = 0,  g_i(z_i) + T_i s = 0,  z_i in Z_i  (boxes)

with ``J(z) = sum_i J_i(z_i) + J_c(z)``.  Functions are supplied as
callbacks; constraint Jacobians only need to be available through their
transpose action ``v -> dg(z)^T v``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class BoxSet:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        up = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != up.shape or lo.ndim != 1:
            raise DimensionError(f"box bounds have shapes {lo.shape} and {up.shape}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(up))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > up):
            raise ValueError("box has lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def size(self) -> int:
        return self.lower.size

    def contains(self, x, atol=0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))


def project_box(x, box: BoxSet) -> np.ndarray:
    """Euclidean projection onto a box (componentwise median of bounds and x)."""
    x = np.asarray(x, dtype=float)
    if x.shape != box.lower.shape:
        raise DimensionError(f"vector of shape {x.shape} projected on box of size {box.size}")
    return np.minimum(np.maximum(x, box.lower), box.upper)


def _zero_cost(x):
    return 0.0


@dataclass(frozen=True)
class BlockSpec:
    """One block of variables z_i with its private cost and constraints.

    ``constraint`` maps z_i to g_i(z_i) (length q_i) and ``constraint_vjp``
    maps (z_i, v) to dg_i(z_i)^T v.  ``T`` is the q_i x p parameter map.
    """

    name: str
    box: BoxSet
    group: int
    cost: Callable[[np.ndarray], float] = _zero_cost
    cost_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constraint: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constraint_vjp: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    T: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.box.size


@dataclass(frozen=True)
class Parameter:
    s: np.ndarray
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "s", np.atleast_1d(np.asarray(self.s, dtype=float)))


@dataclass
class PrimalDual:
    z: np.ndarray
    mu: np.ndarray

    def copy(self) -> "PrimalDual":
        return PrimalDual(self.z.copy(), self.mu.copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.z, self.mu])


def _as_param(s) -> np.ndarray:
    if isinstance(s, Parameter):
        return s.s
    return np.atleast_1d(np.asarray(s, dtype=float))


class BlockNLP:
    """Parametric NLP with block-separable structure.

    Parameters
    ----------
    blocks : sequence of BlockSpec
        Blocks in storage order; ``z`` is their concatenation.
    param_dim : int
        Length p of the parameter vector s.
    coupling_cost, coupling_cost_grad : callables of the full z, optional
        Smooth cost coupling several blocks; the gradient returns a full-length
        vector.
    coupling_constraint, coupling_vjp : callables, optional
        Q_c(z) (length ``n_coupling``) and (z, v) -> dQ_c(z)^T v.
    degree_hint : int
        Polynomial degree d_L of the augmented Lagrangian, used only by the
        rate diagnostics.
    """

    def __init__(
        self,
        blocks: Sequence[BlockSpec],
        param_dim: int,
        coupling_cost=None,
        coupling_cost_grad=None,
        coupling_constraint=None,
        coupling_vjp=None,
        n_coupling: int = 0,
        degree_hint: int = 2,
        name: str = "nlp",
    ):
        if not blocks:
            raise DimensionError("at least one block is required")
        if (coupling_cost is None) != (coupling_cost_grad is None):
            raise ValueError("coupling cost and its gradient must be given together")
        if n_coupling and (coupling_constraint is None or coupling_vjp is None):
            raise ValueError("coupling constraints need a value and a vjp callback")
        if degree_hint < 2:
            raise ValueError("degree_hint must be >= 2")
        self.blocks = tuple(blocks)
        self.param_dim = int(param_dim)
        self.coupling_cost = coupling_cost
        self.coupling_cost_grad = coupling_cost_grad
        self.coupling_constraint = coupling_constraint
        self.coupling_vjp = coupling_vjp
        self.n_coupling = int(n_coupling)
        self.degree_hint = int(degree_hint)
        self.name = name

        offsets = np.cumsum([0] + [b.dim for b in self.blocks])
        self.slices = tuple(slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:]))
        self.n_z = int(offsets[-1])

        row = self.n_coupling
        rows = []
        for b in self.blocks:
            if b.constraint is None:
                q = 0
            else:
                if b.constraint_vjp is None or b.T is None:
                    raise ValueError(f"block {b.name!r}: constraint needs vjp and T")
                T = np.atleast_2d(np.asarray(b.T, dtype=float))
                if T.shape[1] != self.param_dim:
                    raise DimensionError(f"block {b.name!r}: T has {T.shape[1]} columns, p={self.param_dim}")
                q = T.shape[0]
            rows.append(slice(row, row + q))
            row += q
        self.row_slices = tuple(rows)
        self.n_g = row
        self._T = tuple(
            None if b.constraint is None else np.atleast_2d(np.asarray(b.T, dtype=float)) for b in self.blocks
        )

        group_ids = sorted({b.group for b in self.blocks})
        self.groups = tuple(tuple(i for i, b in enumerate(self.blocks) if b.group == g) for g in group_ids)
        self.lower = np.concatenate([b.box.lower for b in self.blocks])
        self.upper = np.concatenate([b.box.upper for b in self.blocks])
        self.box = BoxSet(self.lower, self.upper)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def P(self) -> int:
        return len(self.groups)

    def T(self, i: int) -> Optional[np.ndarray]:
        return self._T[i]

    def project(self, z) -> np.ndarray:
        return project_box(z, self.box)

    def block_of(self, z, i: int) -> np.ndarray:
        return z[self.slices[i]]

    def _check_z(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_z,):
            raise DimensionError(f"z has shape {z.shape}, expected ({self.n_z},)")
        return z

    def _check_s(self, s):
        s = _as_param(s)
        if s.shape != (self.param_dim,):
            raise DimensionError(f"parameter has shape {s.shape}, expected ({self.param_dim},)")
        return s

    def _check_mu(self, mu):
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n_g,):
            raise DimensionError(f"mu has shape {mu.shape}, expected ({self.n_g},)")
        return mu

    def cost(self, z) -> float:
        z = self._check_z(z)
        val = sum(float(b.cost(z[sl])) for b, sl in zip(self.blocks, self.slices))
        if self.coupling_cost is not None:
            val += float(self.coupling_cost(z))
        return val

    def cost_grad(self, z) -> np.ndarray:
        z = self._check_z(z)
        g = np.zeros(self.n_z)
        for b, sl in zip(self.blocks, self.slices):
            if b.cost_grad is not None:
                g[sl] = b.cost_grad(z[sl])
        if self.coupling_cost_grad is not None:
            g += self.coupling_cost_grad(z)
        return g

    def constraints_vjp(self, z, v) -> np.ndarray:
        """Full-length dG(z)^T v."""
        z = self._check_z(z)
        out = np.zeros(self.n_z)
        if self.n_coupling:
            out += self.coupling_vjp(z, v[: self.n_coupling])
        for b, sl, rs in zip(self.blocks, self.slices, self.row_slices):
            if b.constraint is not None:
                out[sl] += b.constraint_vjp(z[sl], v[rs])
        return out

    def block_grad(self, z, i: int, y) -> np.ndarray:
        """Block-i part of grad J + dG^T y, touching only what block i needs."""
        b, sl = self.blocks[i], self.slices[i]
        zi = z[sl]
        g = np.zeros(b.dim) if b.cost_grad is None else np.array(b.cost_grad(zi), dtype=float)
        if self.coupling_cost_grad is not None:
            g = g + self.coupling_cost_grad(z)[sl]
        if self.n_coupling:
            g = g + self.coupling_vjp(z, y[: self.n_coupling])[sl]
        if b.constraint is not None:
            g = g + b.constraint_vjp(zi, y[self.row_slices[i]])
        return g


def eval_constraints(nlp: BlockNLP, z, s) -> np.ndarray:
    """Stacked G(z, s) = (Q_c(z); g_1(z_1) + T_1 s; ...)."""
    z = nlp._check_z(z)
    s = nlp._check_s(s)
    out = np.empty(nlp.n_g)
    if nlp.n_coupling:
        out[: nlp.n_coupling] = nlp.coupling_constraint(z)
    for i, (b, sl, rs) in enumerate(zip(nlp.blocks, nlp.slices, nlp.row_slices)):
        if b.constraint is not None:
            out[rs] = np.asarray(b.constraint(z[sl]), dtype=float) + nlp._T[i] @ s
    return out


def eval_aug_lagrangian(nlp: BlockNLP, z, mu, s, rho: float) -> float:
    """L_rho(z, mu, s) = J(z) + (mu + rho/2 G)^T G."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    mu = nlp._check_mu(mu)
    J = nlp.cost(z)
    if not np.isfinite(J):
        raise EvaluationError(f"cost is not finite ({J})")
    G = eval_constraints(nlp, z, s)
    if not np.all(np.isfinite(G)):
        bad = np.flatnonzero(~np.isfinite(G))
        raise EvaluationError(f"constraint rows {bad.tolist()} are not finite")
    return J + float((mu + 0.5 * rho * G) @ G)


def grad_aug_lagrangian(nlp: BlockNLP, z, mu, s, rho: float) -> np.ndarray:
    mu = nlp._check_mu(mu)
    G = eval_constraints(nlp, z, s)
    return nlp.cost_grad(z) + nlp.constraints_vjp(z, mu + rho * G)


def grad_block_aug_lagrangian(nlp: BlockNLP, i: int, z, mu, s, rho: float) -> np.ndarray:
    """Gradient of L_rho with respect to block i at the full point z."""
    if not 0 <= i < nlp.n_blocks:
        raise IndexError(f"block index {i} out of range")
    mu = nlp._check_mu(mu)
    G = eval_constraints(nlp, z, s)
    return nlp.block_grad(np.asarray(z, dtype=float), i, mu + rho * G)


def finite_difference_grad(f, x, h=None) -> np.ndarray:
    """Central differences of a scalar function, step 1e-6 (1 + |x|_inf) by default."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-6 * (1.0 + np.max(np.abs(x)))
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g
