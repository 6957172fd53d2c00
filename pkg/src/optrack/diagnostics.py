"""Residuals, rate exponents and contraction coefficients."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .problem import BlockNLP, eval_constraints, grad_aug_lagrangian, project_box


def kkt_residual(nlp: BlockNLP, z, mu, s, rho: float) -> float:
    """Projected-gradient criticality measure ||pi_Z(z - grad L_rho) - z||_2."""
    z = np.asarray(z, dtype=float)
    g = grad_aug_lagrangian(nlp, z, mu, s, rho)
    return float(np.linalg.norm(project_box(z - g, nlp.box) - z))


def feasibility_norm(nlp: BlockNLP, z, s) -> float:
    return float(np.linalg.norm(eval_constraints(nlp, z, s)))


def _check_degree(d, n):
    if int(d) != d or int(n) != n:
        raise ValueError("d and n must be integers")
    if d < 2 or n < 2:
        raise ValueError(f"need d >= 2 and n >= 2, got d={d}, n={n}")


def _lojasiewicz_denominator(d: int, n: int) -> float:
    # exact integer arithmetic until the final division
    return float(d * (3 * d - 3) ** (n - 1))


def lojasiewicz_theta(d: int, n: int) -> float:
    """Lojasiewicz exponent bound 1 - 1/(d (3d-3)^(n-1)) for degree-d polynomials in n variables."""
    _check_degree(d, n)
    return 1.0 - 1.0 / _lojasiewicz_denominator(d, n)


def rate_psi(d: int, n: int) -> float:
    """Sub-linear rate exponent 1/(d (3d-3)^(n-1) - 2) of the primal loop."""
    _check_degree(d, n)
    return 1.0 / (_lojasiewicz_denominator(d, n) - 2.0)


def spectral_norm(A, tol=1e-10, maxiter=10_000, seed=0) -> float:
    """Largest singular value by power iteration on A^T A."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.any(A):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(maxiter):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new = np.sqrt(nw)
        if abs(new - sigma) <= tol * max(new, 1.0):
            return float(new)
        sigma = new
    return float(sigma)


def lambda_F(nlp: BlockNLP) -> float:
    """Parameter-Lipschitz constant P * max_i ||T_i||_2."""
    norms = [spectral_norm(nlp.T(i)) for i in range(nlp.n_blocks) if nlp.T(i) is not None]
    if not norms:
        raise ValueError("problem has no parameter maps")
    val = nlp.P * max(norms)
    if val == 0.0:
        warnings.warn("all parameter maps are zero; lambda_F = 0 is degenerate", RuntimeWarning)
    return val


def lambda_H(lam_F: float) -> float:
    if lam_F < 0:
        raise ValueError("lambda_F must be non-negative")
    return float(np.sqrt(max(lam_F**2, 1.0) + lam_F))


@dataclass(frozen=True)
class ContractionConstants:
    """Theoretical constants entering the contraction coefficients.

    lambda_A, lambda_B, lambda_G and C cannot be computed from data here;
    the defaults are unit placeholders for illustration only.
    """

    lambda_A: float = 1.0
    lambda_B: float = 1.0
    lambda_G: float = 1.0
    C: float = 1.0
    lambda_F: float = 1.0
    lambda_H: float = 1.0
    d_L: int = 2
    n_z: int = 2
    illustrative: bool = True
    lambda_G_source: str = "user"

    def __post_init__(self):
        for name in ("lambda_A", "lambda_B", "lambda_G", "C", "lambda_F", "lambda_H"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        _check_degree(self.d_L, self.n_z)


def beta_coeffs(k: ContractionConstants, rho: float, M: int) -> tuple[float, float]:
    """Weak-contraction coefficients (beta_w, beta_s) for penalty rho and M sweeps."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    if M < 1:
        raise ValueError("M must be >= 1")
    decay = float(M) ** (-rate_psi(k.d_L, k.n_z))
    lbh = k.lambda_B * k.lambda_H
    front = k.C * (1.0 + rho * k.lambda_G)
    beta_w = front * (1.0 + lbh / rho) * decay + lbh / rho
    beta_s = front * lbh * decay + lbh * k.lambda_A * k.lambda_F / rho
    return beta_w, beta_s


def estimate_lambda_G(nlp: BlockNLP, s, n_samples=10_000, seed=0) -> float:
    """Heuristic lower estimate of the Lipschitz constant of G(., s) on Z.

    Takes the largest ratio ||G(x) - G(y)|| / ||x - y|| over random pairs of
    box points.  This underestimates the true constant.
    """
    rng = np.random.default_rng(seed)
    lo, up = nlp.lower, nlp.upper
    best = 0.0
    for _ in range(n_samples):
        x = lo + (up - lo) * rng.random(nlp.n_z)
        y = x + 1e-4 * (up - lo) * rng.standard_normal(nlp.n_z)
        y = np.clip(y, lo, up)
        d = np.linalg.norm(x - y)
        if d == 0.0:
            continue
        best = max(best, np.linalg.norm(eval_constraints(nlp, x, s) - eval_constraints(nlp, y, s)) / d)
    return float(best)


def tracking_error(y_star, y_bar) -> float:
    """Root-mean-square gap between the optimal and the tracked output."""
    y_star = np.asarray(y_star, dtype=float).ravel()
    y_bar = np.asarray(y_bar, dtype=float).ravel()
    if y_star.shape != y_bar.shape:
        raise ValueError(f"sequences differ in length ({y_star.size} vs {y_bar.size})")
    if y_star.size == 0:
        raise ValueError("empty sequences")
    return float(np.sqrt(np.mean((y_star - y_bar) ** 2)))
