import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import quad_nlp, random_box_point, random_unicycle_point, scalar_nlp
from optrack import models
from optrack.diagnostics import kkt_residual
from optrack.problem import (
    BlockNLP,
    BlockSpec,
    BoxSet,
    PrimalDual,
    eval_constraints,
    grad_aug_lagrangian,
    project_box,
)
from optrack.solver import (
    CurvatureOverflowError,
    NoConvergenceError,
    SolverConfig,
    bck_min,
    dual_update,
    full_solve,
    new_curvature,
    primal_sweeps,
    track_direct,
    track_homotopy,
    track_step,
)

NO_MU = np.zeros(0)
S0 = np.zeros(1)


# -- configuration -----------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(rho=0), dict(beta=1.0), dict(alpha=0.0), dict(D=0), dict(M=-1),
                                dict(c_init=2e12)])
def test_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        SolverConfig(**kw)


def test_stage_budget_remainder_to_last():
    assert SolverConfig(M=36, D=3).stage_budget() == [12, 12, 12]
    assert SolverConfig(M=37, D=3).stage_budget() == [12, 12, 13]
    assert SolverConfig(M=2, D=3).stage_budget() == [0, 0, 2]


def test_per_group_alpha():
    cfg = SolverConfig(alpha=(1e-3, 1e-5))
    assert cfg.alpha_of(1) == 1e-5
    assert cfg.alpha_min == 1e-5


# -- backtracking step -------------------------------------------------------

def test_bck_min_stationary_interior_point():
    nlp = scalar_nlp(lambda z: float((z[0] - 0.5) ** 2), lambda z: 2 * (z - 0.5), lower=0.0, upper=1.0)
    for c in (1e-3, 0.5, 7.0, 1e6):
        zi, c_out, _ = bck_min(nlp, 0, np.array([0.5]), NO_MU, S0, SolverConfig(), c)
        assert zi[0] == 0.5


def test_bck_min_accepts_first_candidate():
    nlp = quad_nlp(-1.0, 1.0)
    zi, c, nrej = bck_min(nlp, 0, np.array([1.0]), NO_MU, S0, SolverConfig(alpha=1e-6), 10.0)
    assert zi[0] == 0.8
    assert (c, nrej) == (10.0, 0)


def test_bck_min_backtracking_sequence():
    visited = []

    def cost(z):
        visited.append(float(z[0]))
        return float(z[0] ** 2)

    nlp = scalar_nlp(cost, lambda z: 2 * z, lower=-1.0, upper=1.0)
    zi, c, nrej = bck_min(nlp, 0, np.array([1.0]), NO_MU, S0, SolverConfig(alpha=1e-6, beta=2.0), 0.5)
    # first entry is the reference value at z=1, then one candidate per curvature 0.5, 1, 2, 4
    assert visited == [1.0, -1.0, -1.0, 0.0, 0.5]
    assert zi[0] == 0.5
    assert (c, nrej) == (4.0, 3)


def test_bck_min_curvature_overflow():
    # a kink makes the quadratic model fail for every curvature
    nlp = scalar_nlp(lambda z: float(abs(z[0]) + (z[0] > 0)), lambda z: np.sign(z) - 1.0, lower=-1.0, upper=1.0)
    with pytest.raises(CurvatureOverflowError, match="c_max"):
        bck_min(nlp, 0, np.array([0.0]), NO_MU, S0, SolverConfig(c_max=1e3), 1.0)


@given(st.floats(-1, 1), st.floats(1e-3, 1e3), st.floats(-5, 5))
def test_bck_min_accepts_below_cap_and_decreases(z0, c0, a):
    nlp = scalar_nlp(lambda z: float((z[0] - a) ** 4 + z[0] ** 2), lambda z: 4 * (z - a) ** 3 + 2 * z,
                     lower=-1.0, upper=1.0)
    cfg = SolverConfig(alpha=1e-4)
    z = np.array([z0])
    zi, c, _ = bck_min(nlp, 0, z, NO_MU, S0, cfg, c0)
    assert c <= cfg.c_max
    assert -1.0 <= zi[0] <= 1.0
    assert nlp.cost(zi) + 0.5e-4 * (zi[0] - z0) ** 2 <= nlp.cost(z) + 1e-12


# -- primal sweeps -----------------------------------------------------------

def test_sweeps_zero_budget(dc_nlp):
    z0 = random_box_point(dc_nlp, np.random.default_rng(0))
    z, reps = primal_sweeps(dc_nlp, z0, np.zeros(dc_nlp.n_g), np.zeros(3), SolverConfig(M=0))
    assert np.array_equal(z, z0) and reps == []


def _separable_qp(seed, full_blocks):
    """Three 2-D blocks with private quadratics 0.5 z'Hz + q'z."""
    rng = np.random.default_rng(seed)
    blocks, Hs, qs = [], [], []
    for b in range(3):
        if full_blocks:
            A = rng.normal(size=(2, 2))
            H = A @ A.T + np.eye(2)
        else:
            H = np.diag(rng.uniform(1, 4, 2))
        q = rng.normal(scale=3, size=2)
        Hs.append(H)
        qs.append(q)
        lo, up = (-50.0, 50.0) if full_blocks else (-1.0, 1.0)
        blocks.append(BlockSpec(f"b{b}", BoxSet([lo, lo], [up, up]), b % 2,
                                cost=lambda z, H=H, q=q: float(0.5 * z @ H @ z + q @ z),
                                cost_grad=lambda z, H=H, q=q: H @ z + q))
    nlp = BlockNLP(blocks, param_dim=1)
    H = np.zeros((6, 6))
    for b in range(3):
        H[2 * b : 2 * b + 2, 2 * b : 2 * b + 2] = Hs[b]
    return nlp, H, np.concatenate(qs)


@pytest.mark.parametrize("full_blocks", [False, True])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_sweeps_solve_separable_qp(seed, full_blocks):
    nlp, H, q = _separable_qp(seed, full_blocks)
    z_star = project_box(np.linalg.solve(H, -q), nlp.box)  # exact: diagonal, or box inactive
    if full_blocks:
        assert nlp.box.contains(np.linalg.solve(H, -q), atol=-1.0)
    z, _ = primal_sweeps(nlp, np.zeros(6), NO_MU, S0, SolverConfig(M=200))
    assert kkt_residual(nlp, z, NO_MU, S0, 1.0) <= 1e-8
    assert np.allclose(z, z_star, atol=1e-8)


def test_sufficient_decrease_chain_dc(dc_nlp):
    rng = np.random.default_rng(7)
    cfg = SolverConfig(rho=100.0, alpha=1e-3)
    for _ in range(3):
        z0 = random_box_point(dc_nlp, rng)
        mu = rng.normal(scale=10, size=dc_nlp.n_g)
        s = np.array([rng.uniform(0, 4), rng.uniform(-4, 1), rng.choice([-2.0, 2.0])])
        _, reps = primal_sweeps(dc_nlp, z0, mu, s, cfg, M=60)
        for r in reps:
            assert r.value_after <= r.value_before + 1e-10
            assert r.decrease >= 0.5 * cfg.alpha_min * r.step_norm**2 - 1e-10


def test_relative_error_certificate(uni_nlp):
    rng = np.random.default_rng(2)
    z, s = random_unicycle_point(uni_nlp, rng)
    mu = rng.normal(size=uni_nlp.n_g)
    cfg = SolverConfig(rho=20.0)
    curv = new_curvature(uni_nlp, cfg)
    for _ in range(15):
        z_new, (rep,) = primal_sweeps(uni_nlp, z, mu, s, cfg, M=1, curvature=curv, record_residual=True)
        c = np.concatenate([np.full(b.dim, rep.curvature[i]) for i, b in enumerate(uni_nlp.blocks)])
        g_new = grad_aug_lagrangian(uni_nlp, z_new, mu, s, cfg.rho)
        r = c * (z - z_new) + g_new - rep.snapshot_grad
        for t in (1e-6, 1e-4):
            fixed = project_box(z_new - t * (g_new - r), uni_nlp.box)
            assert np.max(np.abs(fixed - z_new)) <= 1e-8
        z = z_new


def test_parallel_group_matches_sequential(uni_nlp):
    rng = np.random.default_rng(4)
    z0, s = random_unicycle_point(uni_nlp, rng)
    mu = rng.normal(size=uni_nlp.n_g)
    a, _ = primal_sweeps(uni_nlp, z0, mu, s, SolverConfig(rho=50.0, M=10))
    b, _ = primal_sweeps(uni_nlp, z0, mu, s, SolverConfig(rho=50.0, M=10, workers=2))
    assert np.array_equal(a, b)


def test_sweeps_deterministic(dc_nlp):
    z0 = random_box_point(dc_nlp, np.random.default_rng(9))
    mu, s = np.ones(dc_nlp.n_g), np.array([1.0, -1.0, 2.0])
    runs = [primal_sweeps(dc_nlp, z0, mu, s, SolverConfig(M=25))[0] for _ in range(2)]
    assert np.array_equal(*runs)


# -- dual update -------------------------------------------------------------

def test_dual_update_examples():
    nlp = scalar_nlp(g=lambda z: z, vjp=lambda z, v: v, T=-1.0)
    assert dual_update(nlp, np.array([0.3]), np.array([1.5]), np.array([0.3]), 10.0)[0] == 1.5
    assert dual_update(nlp, np.array([0.1]), np.array([1.0]), S0, 10.0)[0] == pytest.approx(2.0, abs=1e-15)
    mu1 = dual_update(nlp, np.array([0.1]), np.array([1.0]), S0, 10.0)
    mu2 = dual_update(nlp, np.array([0.1]), mu1, S0, 10.0)
    assert mu2[0] - 1.0 == pytest.approx(2 * 10.0 * 0.1, abs=1e-14)


# -- tracking steps ----------------------------------------------------------

def test_fixed_point_toy_qp(toy_nlp):
    z, mu = models.toy_qp_kkt(1.0)
    w = PrimalDual(z, mu)
    cfg = SolverConfig(rho=10.0, M=20)
    for _ in range(50):
        w_next = track_step(toy_nlp, w, np.array([1.0]), cfg).w_out
        assert np.array_equal(w_next.z, z) and np.array_equal(w_next.mu, mu)
        w = w_next


def test_homotopy_requires_previous_parameter(toy_nlp):
    with pytest.raises(ValueError, match="previous"):
        track_step(toy_nlp, PrimalDual(np.zeros(2), np.zeros(1)), np.ones(1), SolverConfig(D=2))


def test_homotopy_stage_parameters(toy_nlp):
    res = track_homotopy(toy_nlp, PrimalDual(np.zeros(2), np.zeros(1)), np.array([0.0]), np.array([0.9]),
                         SolverConfig(M=7, D=3))
    assert [p[0] for p in res.stage_params] == pytest.approx([0.3, 0.6, 0.9], abs=1e-15)
    assert [len(r) for r in res.reports] == [2, 2, 3]
    assert res.sweeps == 7


def test_single_stage_homotopy_is_direct(dc_nlp):
    rng = np.random.default_rng(1)
    w = PrimalDual(random_box_point(dc_nlp, rng), rng.normal(size=dc_nlp.n_g))
    s_prev, s_next = np.array([4.7, 0.0, 2.0]), np.array([4.6, 0.1, 2.0])
    cfg = SolverConfig(M=36)
    a = track_direct(dc_nlp, w, s_next, cfg)
    b = track_homotopy(dc_nlp, w, s_prev, s_next, cfg, D=1)
    assert np.array_equal(a.w_out.z, b.w_out.z) and np.array_equal(a.w_out.mu, b.w_out.mu)
    assert (a.omega, a.feas, a.auglag) == (b.omega, b.feas, b.auglag)


def test_toy_qp_tracking_error_bounded(toy_nlp):
    cfg = SolverConfig(rho=10.0, M=5)
    w = PrimalDual(np.array([0.3, -0.2]), np.array([0.4]))
    z0, mu0 = models.toy_qp_kkt(0.0)
    e0 = np.linalg.norm(np.concatenate([w.z - z0, w.mu - mu0]))
    curv = new_curvature(toy_nlp, cfg)
    for k in range(1, 201):
        w = track_step(toy_nlp, w, np.array([0.01 * k]), cfg, curvature=curv).w_out
        zs, ms = models.toy_qp_kkt(0.01 * k)
        assert np.linalg.norm(np.concatenate([w.z - zs, w.mu - ms])) <= 2 * e0


def test_feasibility_decreases_under_repeated_dual_updates(toy_nlp):
    cfg = SolverConfig(rho=1.0, M=20)
    w, s = PrimalDual(np.zeros(2), np.zeros(1)), np.array([1.0])
    feas = [np.linalg.norm(eval_constraints(toy_nlp, w.z, s))]
    while feas[-1] > 1e-10 and len(feas) < 200:
        w = track_step(toy_nlp, w, s, cfg).w_out
        feas.append(np.linalg.norm(eval_constraints(toy_nlp, w.z, s)))
    assert feas[-1] <= 1e-10
    ratios = np.array(feas[1:]) / np.array(feas[:-1])
    assert np.all(ratios < 0.9)


# -- oracle ------------------------------------------------------------------

def test_full_solve_toy_qp(toy_nlp):
    w, info = full_solve(toy_nlp, PrimalDual(np.zeros(2), np.zeros(1)), np.array([1.0]), 10.0,
                         tol=1e-9, return_info=True)
    assert np.allclose(w.z, [0.5, 0.5], atol=1e-7, rtol=0)
    assert w.mu[0] == pytest.approx(-1.0, abs=1e-7)
    assert info.omega <= 1e-9 and info.feas <= 1e-9


def test_full_solve_already_converged(toy_nlp):
    z, mu = models.toy_qp_kkt(1.0)
    w, info = full_solve(toy_nlp, PrimalDual(z, mu), np.array([1.0]), 10.0, return_info=True)
    assert info.outer == 0 and info.inner_iterations == 0
    assert np.array_equal(w.z, z)


def test_full_solve_dc_motor(dc_nlp):
    x0, _ = models.dc_motor_equilibrium()
    s = models.dc_motor_parameter(x0, 2.0)
    w0 = PrimalDual(models.dc_motor_rollout(dc_nlp, s, 1.35), np.zeros(dc_nlp.n_g))
    w, info = full_solve(dc_nlp, w0, s, 100.0, tol=1e-7, return_info=True)
    assert info.omega <= 1e-6 and info.feas <= 1e-6
    # frozen from a converged run: the speed bound is reached, the first input sits on its bound
    X, U, r = dc_nlp.layout.split(w.z)
    assert U[0] == 1.4 and X[-1, 1] == pytest.approx(1.5, abs=1e-9)
    assert U[-1] == pytest.approx(1.38397164, abs=1e-7)
    assert dc_nlp.cost(w.z) == pytest.approx(192.9350796, abs=1e-5)


def test_full_solve_iteration_cap(dc_nlp):
    x0, _ = models.dc_motor_equilibrium()
    s = models.dc_motor_parameter(x0, 2.0)
    with pytest.raises(NoConvergenceError) as exc:
        full_solve(dc_nlp, PrimalDual(dc_nlp.project(np.zeros(dc_nlp.n_z)), np.zeros(dc_nlp.n_g)), s, 100.0,
                   max_outer=1, inner_maxiter=3, polish_below=0.0)
    assert exc.value.feas > 0


def test_full_solve_rejects_nonpositive_tol(toy_nlp):
    with pytest.raises(ValueError):
        full_solve(toy_nlp, PrimalDual(np.zeros(2), np.zeros(1)), np.ones(1), 1.0, tol=0.0)
