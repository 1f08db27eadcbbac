import numpy as np
import pytest

from diffgame import (
    AnalyticField,
    ControlGrid,
    GameSpec,
    build_lattice,
    builtin_game,
    policy_iteration_solve,
    strategy_pair_saddle,
)

GRID3 = np.array([[-1.0], [0.0], [1.0]])


def make_spec(
    dim=1,
    noise_dim=None,
    sigma_mat=None,
    sigma_fn=None,
    drift_fn=None,
    cost_fn=None,
    running_fn=None,
    terminal_fn=None,
    factor_fn=None,
    alphas=GRID3,
    betas=GRID3,
    params=np.array([[1.0]]),
    base_param_index=0,
    delta=1.0,
    delta1=1.0,
    k0=10.0,
    name="test",
):
    """Small test-game builder with constant defaults."""
    noise_dim = noise_dim or dim
    if sigma_fn is None:
        mat = np.asarray(
            sigma_mat if sigma_mat is not None else np.sqrt(2.0) * np.eye(dim, noise_dim),
            dtype=float,
        )
        sigma_fn = lambda a, b, p, x: np.broadcast_to(mat, (x.shape[0],) + mat.shape).copy()
    drift_fn = drift_fn or (lambda a, b, p, x: np.zeros((x.shape[0], dim)))
    cost_fn = cost_fn or (lambda a, b, p, x: np.zeros(x.shape[0]))
    running_fn = running_fn or (lambda a, b, p, x: np.zeros(x.shape[0]))
    terminal_fn = terminal_fn or (lambda x: np.zeros(np.atleast_2d(x).shape[0]))
    factor_fn = factor_fn or (lambda a, b, p, x: np.ones(x.shape[0]))
    controls = ControlGrid(alphas=alphas, betas=betas, params=params,
                           base_param_index=base_param_index)
    return GameSpec(
        dim=dim, noise_dim=noise_dim, sigma=sigma_fn, drift_b=drift_fn,
        cost_c=cost_fn, running_f=running_fn, terminal_g=terminal_fn,
        factor_r=factor_fn, delta=delta, delta1=delta1, k0=k0,
        controls=controls, name=name, vectorized_controls=False,
    )


def saddle_drift(scale=1.0):
    """b = scale * (alpha - beta) in the first coordinate."""

    def drift(a, b, p, x):
        out = np.zeros((x.shape[0], x.shape[1]))
        out[:, 0] = scale * (np.asarray(a)[..., 0] - np.asarray(b)[..., 0])
        return out

    return drift


def const_field(value):
    return lambda a, b, p, x: np.full(x.shape[0], float(value))


@pytest.fixture(scope="session")
def bm1d():
    return builtin_game("bm1d")


@pytest.fixture(scope="session")
def bm1d_solved(bm1d):
    """Criterion-scale solve at h = 1/256."""
    lat = build_lattice(bm1d.domain, 1.0 / 256)
    u, rep = policy_iteration_solve(bm1d.spec, lat, bm1d.spec.terminal_g)
    return u, rep


@pytest.fixture(scope="session")
def bm1d_fine(bm1d):
    """Fine solve whose interpolant is admissible for eps = 1e-4 selectors."""
    lat = build_lattice(bm1d.domain, 2.0**-12)
    u, _ = policy_iteration_solve(bm1d.spec, lat, bm1d.spec.terminal_g)
    return u


@pytest.fixture(scope="session")
def bm1d_exact_field(bm1d):
    """Closed-form solution x(1-x)/2 as an analytic field."""
    return AnalyticField(
        value_fn=lambda x: x[:, 0] * (1.0 - x[:, 0]) / 2.0,
        gradient_fn=lambda x: (0.5 - x[:, 0])[:, None],
        hessian_fn=lambda x: np.full((x.shape[0], 1, 1), -1.0),
        outside_fn=lambda x: np.zeros(x.shape[0]),
        dom=bm1d.domain,
    )


@pytest.fixture(scope="session")
def bm1d_saddle(bm1d, bm1d_fine):
    return strategy_pair_saddle(bm1d.spec, bm1d_fine, 1e-4, 32)
