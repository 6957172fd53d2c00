import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from optrack import models
from optrack.problem import BlockNLP, BlockSpec, BoxSet

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def scalar_nlp(cost=None, grad=None, g=None, vjp=None, T=None, lower=-10.0, upper=10.0, p=1):
    """One-variable, one-block problem with optional scalar constraint g(z) + T s."""
    kw = {}
    if cost is not None:
        kw.update(cost=cost, cost_grad=grad)
    if g is not None:
        kw.update(constraint=g, constraint_vjp=vjp, T=np.atleast_2d(T))
    block = BlockSpec("x", BoxSet([lower], [upper]), 0, **kw)
    return BlockNLP([block], param_dim=p)


def quad_nlp(lower, upper):
    """L(z) = z^2 on a 1-D box with no constraints."""
    return scalar_nlp(lambda z: float(z[0] ** 2), lambda z: 2 * z, lower=lower, upper=upper)


@pytest.fixture(scope="session")
def dc_nlp():
    return models.build_dc_motor_nlp()


@pytest.fixture(scope="session")
def uni_nlp():
    return models.build_unicycle_nlp()


@pytest.fixture(scope="session")
def toy_nlp():
    return models.build_toy_qp()


def random_box_point(nlp, rng, margin=0.05):
    lo, up = nlp.lower, nlp.upper
    w = up - lo
    return lo + margin * w + (1 - 2 * margin) * w * rng.random(nlp.n_z)


def random_unicycle_point(nlp, rng):
    """Perturbed rollout from random initial states (keeps the angles moderate)."""
    s = models.unicycle_parameter(rng.normal(0, 1, (3, 3)), rng.normal(0, 1, (nlp.layout.N, 3)))
    z = models.unicycle_rollout(nlp, s, rng.uniform([0, -1], [0.5, 1], (3, nlp.layout.N, 2)))
    return nlp.project(z + rng.normal(0, 0.3, nlp.n_z)), s


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
