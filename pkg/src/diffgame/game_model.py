"""Game instances: coefficient evaluation, structural checks, builtin games.

A game is described by coefficient functions sigma, b, c, f, g, r over finite
control grids A, B and a finite parameter grid P with a distinguished base
point.  All coefficient callables receive control/parameter *points* (1-D
arrays) and a batch of states ``x`` of shape (n, d); they return arrays with
leading batch dimension: sigma -> (n, d, d1), drift -> (n, d), scalars -> (n,).
Specs built by this module additionally broadcast over per-sample control
arrays (``vectorized_controls``), which the simulator exploits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .domain import Domain
from .errors import UsageError

__all__ = [
    "ControlGrid",
    "GameSpec",
    "GameInstance",
    "eval_diffusion",
    "base_coefficients",
    "check_ellipticity",
    "check_factorization",
    "check_bounds",
    "validate_game",
    "builtin_game",
    "BUILTIN_GAMES",
]


@dataclass(frozen=True)
class ControlGrid:
    """Ordered finite control and parameter grids.

    Order is semantic: selectors resolve ties by least index.
    """

    alphas: np.ndarray  # (n_alpha, a_dim)
    betas: np.ndarray  # (n_beta, b_dim)
    params: np.ndarray  # (n_param, p_dim)
    base_param_index: int = 0

    def __post_init__(self):
        for name in ("alphas", "betas", "params"):
            pts = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            object.__setattr__(self, name, pts)
            if pts.shape[0] == 0:
                raise UsageError(f"{name} grid is empty")
            if len(np.unique(pts, axis=0)) != pts.shape[0]:
                raise UsageError(f"{name} grid contains duplicate points")
        if not 0 <= self.base_param_index < len(self.params):
            raise UsageError(
                f"base_param_index {self.base_param_index} out of range"
            )

    @property
    def n_alpha(self) -> int:
        return self.alphas.shape[0]

    @property
    def n_beta(self) -> int:
        return self.betas.shape[0]

    @property
    def n_param(self) -> int:
        return self.params.shape[0]

    @property
    def base_param(self) -> np.ndarray:
        return self.params[self.base_param_index]


@dataclass(frozen=True)
class GameSpec:
    """Coefficient functions and structural constants of one game."""

    dim: int
    noise_dim: int
    sigma: Callable
    drift_b: Callable
    cost_c: Callable
    running_f: Callable
    terminal_g: Callable
    factor_r: Callable
    delta: float
    delta1: float
    k0: float
    controls: ControlGrid
    name: str = ""
    # True when the coefficient callables broadcast over per-sample control
    # arrays of shape (n, a_dim)/(n, b_dim); the path engine then avoids
    # grouping by control indices.
    vectorized_controls: bool = False

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < self.dim:
            raise UsageError("require dim >= 1 and noise_dim >= dim")
        if not (0.0 < self.delta <= 1.0 and 0.0 < self.delta1 <= 1.0):
            raise UsageError("delta and delta1 must lie in (0, 1]")

    def control_point(self, kind: str, index: int) -> np.ndarray:
        grid = {
            "alpha": self.controls.alphas,
            "beta": self.controls.betas,
            "param": self.controls.params,
        }[kind]
        if not 0 <= index < grid.shape[0]:
            raise UsageError(f"{kind} index {index} out of range [0, {grid.shape[0]})")
        return grid[index]


@dataclass(frozen=True)
class GameInstance:
    """A spec paired with its domain and, when known, the exact value."""

    spec: GameSpec
    domain: Domain
    exact_value: Optional[Callable] = None
    notes: str = ""


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != d:
            raise UsageError(f"point has dimension {x.shape[0]}, expected {d}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != d:
        raise UsageError(f"state batch must have shape (n, {d})")
    return x, False


def eval_diffusion(spec: GameSpec, alpha: int, beta: int, param: int, x):
    """Evaluate (a, b, c, f) at grid indices; a = (1/2) sigma sigma^T.

    ``x`` may be a single point (d,) or a batch (n, d); outputs follow.
    """
    ap = spec.control_point("alpha", alpha)
    bp = spec.control_point("beta", beta)
    pp = spec.control_point("param", param)
    xb, single = _as_batch(x, spec.dim)
    sig = np.asarray(spec.sigma(ap, bp, pp, xb), dtype=float)
    a = 0.5 * np.einsum("nij,nkj->nik", sig, sig)
    b = np.asarray(spec.drift_b(ap, bp, pp, xb), dtype=float)
    c = np.asarray(spec.cost_c(ap, bp, pp, xb), dtype=float)
    f = np.asarray(spec.running_f(ap, bp, pp, xb), dtype=float)
    if single:
        return a[0], b[0], c[0], f[0]
    return a, b, c, f


def base_coefficients(spec: GameSpec, alpha: int, beta: int, x):
    """(a, b, c, f) at the base parameter point."""
    return eval_diffusion(spec, alpha, beta, spec.controls.base_param_index, x)


@dataclass(frozen=True)
class EllipticityReport:
    min_quotient: float
    max_quotient: float
    delta: float
    passed: bool
    worst_point: np.ndarray


def check_ellipticity(spec: GameSpec, sample_points, directions=None) -> EllipticityReport:
    """Rayleigh quotients of a over all sampled (alpha, beta, p, x, direction).

    Passes iff every quotient lies in [delta, 1/delta].
    """
    pts, _ = _as_batch(np.atleast_2d(sample_points), spec.dim)
    if pts.shape[0] == 0:
        raise UsageError("sample_points must be nonempty")
    if directions is None:
        dirs = np.eye(spec.dim)
        if spec.dim > 1:
            extra = np.ones(spec.dim) / np.sqrt(spec.dim)
            dirs = np.vstack([dirs, extra])
    else:
        dirs = np.atleast_2d(np.asarray(directions, dtype=float))
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    qmin, qmax = np.inf, -np.inf
    worst = pts[0]
    g = spec.controls
    for ia in range(g.n_alpha):
        for ib in range(g.n_beta):
            for ip in range(g.n_param):
                a, _, _, _ = eval_diffusion(spec, ia, ib, ip, pts)
                # (n_pts, n_dirs) quotients; directions are unit vectors
                quot = np.einsum("di,nij,dj->nd", dirs, a, dirs)
                lo, hi = float(quot.min()), float(quot.max())
                if lo < qmin:
                    qmin = lo
                    worst = pts[np.unravel_index(np.argmin(quot), quot.shape)[0]]
                qmax = max(qmax, hi)
    passed = (qmin >= spec.delta - 1e-12) and (qmax <= 1.0 / spec.delta + 1e-12)
    return EllipticityReport(qmin, qmax, spec.delta, passed, worst)


@dataclass(frozen=True)
class FactorizationReport:
    max_rel_defect: float
    r_min: float
    r_max: float
    base_r_defect: float
    passed: bool


def check_factorization(spec: GameSpec, sample_points, rtol: float = 1e-12) -> FactorizationReport:
    """Check f = r * f_base on samples, r within [delta1, 1/delta1], r(base) = 1."""
    pts, _ = _as_batch(np.atleast_2d(sample_points), spec.dim)
    if pts.shape[0] == 0:
        raise UsageError("sample_points must be nonempty")
    g = spec.controls
    max_defect = 0.0
    r_min, r_max = np.inf, -np.inf
    base_defect = 0.0
    for ia in range(g.n_alpha):
        ap = g.alphas[ia]
        for ib in range(g.n_beta):
            bp = g.betas[ib]
            f_base = np.asarray(spec.running_f(ap, bp, g.base_param, pts), dtype=float)
            r_base = np.asarray(spec.factor_r(ap, bp, g.base_param, pts), dtype=float)
            base_defect = max(base_defect, float(np.max(np.abs(r_base - 1.0))))
            for ip in range(g.n_param):
                pp = g.params[ip]
                r = np.asarray(spec.factor_r(ap, bp, pp, pts), dtype=float)
                f = np.asarray(spec.running_f(ap, bp, pp, pts), dtype=float)
                r_min = min(r_min, float(r.min()))
                r_max = max(r_max, float(r.max()))
                defect = np.abs(f - r * f_base) / (1.0 + np.abs(f))
                max_defect = max(max_defect, float(defect.max()))
    passed = (
        max_defect <= rtol
        and base_defect == 0.0
        and r_min >= spec.delta1 - 1e-12
        and r_max <= 1.0 / spec.delta1 + 1e-12
    )
    return FactorizationReport(max_defect, r_min, r_max, base_defect, passed)


@dataclass(frozen=True)
class BoundsReport:
    max_sigma_norm: float
    max_drift_norm: float
    min_cost: float
    max_asymmetry: float
    passed: bool


def check_bounds(spec: GameSpec, sample_points) -> BoundsReport:
    """Sampled check of ||sigma|| <= K0, |b| <= K0, c >= 0, a symmetric."""
    pts, _ = _as_batch(np.atleast_2d(sample_points), spec.dim)
    g = spec.controls
    smax, bmax, cmin, asym = 0.0, 0.0, np.inf, 0.0
    for ia in range(g.n_alpha):
        for ib in range(g.n_beta):
            for ip in range(g.n_param):
                ap, bp, pp = g.alphas[ia], g.betas[ib], g.params[ip]
                sig = np.asarray(spec.sigma(ap, bp, pp, pts), dtype=float)
                a = 0.5 * np.einsum("nij,nkj->nik", sig, sig)
                b = np.asarray(spec.drift_b(ap, bp, pp, pts), dtype=float)
                c = np.asarray(spec.cost_c(ap, bp, pp, pts), dtype=float)
                smax = max(smax, float(np.sqrt(np.einsum("nij,nij->n", sig, sig).max())))
                bmax = max(bmax, float(np.linalg.norm(b, axis=1).max()))
                cmin = min(cmin, float(c.min()))
                d = np.abs(a - np.swapaxes(a, 1, 2)) / (1.0 + np.abs(a))
                asym = max(asym, float(d.max()))
    passed = smax <= spec.k0 + 1e-12 and bmax <= spec.k0 + 1e-12 and cmin >= 0.0 and asym <= 1e-14
    return BoundsReport(smax, bmax, cmin, asym, passed)


def validate_game(inst: GameInstance, n_samples: int = 64, seed: int = 0) -> dict:
    """Run all sampled structural checks on points drawn inside the domain."""
    rng = np.random.default_rng(seed)
    pts = inst.domain.sample_interior(n_samples, rng)
    return {
        "ellipticity": check_ellipticity(inst.spec, pts),
        "factorization": check_factorization(inst.spec, pts),
        "bounds": check_bounds(inst.spec, pts),
    }


# ---------------------------------------------------------------------------
# Builtin games
# ---------------------------------------------------------------------------


def _const_sigma(mat):
    mat = np.asarray(mat, dtype=float)

    def sigma(alpha, beta, p, x):
        n = x.shape[0]
        return np.broadcast_to(mat, (n,) + mat.shape).copy()

    return sigma


def _scalar_field(value):
    def fn(alpha, beta, p, x):
        return np.full(x.shape[0], float(value))

    return fn


def make_bm1d(drift_scale: float = 1.0) -> GameInstance:
    """1-D saddle game on (0,1): a=1, b=drift_scale*(alpha-beta), c=0, f=1, g=0.

    The min-max drift cancels, so the value is x(1-x)/2 exactly.
    """
    grid3 = np.array([[-1.0], [0.0], [1.0]])
    controls = ControlGrid(alphas=grid3, betas=grid3, params=np.array([[1.0]]))
    s = float(drift_scale)

    def drift(alpha, beta, p, x):
        b = s * (alpha[..., 0] - beta[..., 0])
        return np.broadcast_to(np.asarray(b)[..., None], (x.shape[0], 1)).copy()

    spec = GameSpec(
        dim=1,
        noise_dim=1,
        sigma=_const_sigma([[np.sqrt(2.0)]]),
        drift_b=drift,
        cost_c=_scalar_field(0.0),
        running_f=_scalar_field(1.0),
        terminal_g=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        factor_r=_scalar_field(1.0),
        delta=1.0,
        delta1=1.0,
        k0=max(2.0 * s, 1.5),
        controls=controls,
        name="bm1d" if s == 1.0 else f"bm1d(drift_scale={s})",
        vectorized_controls=True,
    )
    dom = Domain.interval(0.0, 1.0)

    def exact(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, 0]
        return x * (1.0 - x) / 2.0

    return GameInstance(spec, dom, exact_value=exact)


def make_pursuit1d() -> GameInstance:
    """1-D pursuit game on (0,1) with asymmetric speeds, c = 1, and the
    multiplicative parameter family r = p' over P = {0.5, 1, 2}."""
    controls = ControlGrid(
        alphas=np.array([[-0.4], [0.0], [0.4]]),
        betas=np.array([[-1.0], [0.0], [1.0]]),
        params=np.array([[0.5], [1.0], [2.0]]),
        base_param_index=1,
    )

    def pfac(p):
        return np.asarray(p)[..., 0]

    def sigma(alpha, beta, p, x):
        n = x.shape[0]
        s = np.sqrt(2.0 * pfac(p))
        out = np.zeros((n, 1, 1))
        out[:, 0, 0] = s
        return out

    def drift(alpha, beta, p, x):
        b = pfac(p) * (alpha[..., 0] - beta[..., 0])
        return np.broadcast_to(np.asarray(b)[..., None], (x.shape[0], 1)).copy()

    def cost(alpha, beta, p, x):
        return np.broadcast_to(pfac(p), (x.shape[0],)).astype(float).copy()

    running = cost  # f == c == p' here

    def factor(alpha, beta, p, x):
        return np.broadcast_to(pfac(p), (x.shape[0],)).astype(float).copy()

    spec = GameSpec(
        dim=1,
        noise_dim=1,
        sigma=sigma,
        drift_b=drift,
        cost_c=cost,
        running_f=running,
        terminal_g=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        factor_r=factor,
        delta=0.5,
        delta1=0.5,
        k0=3.0,
        controls=controls,
        name="pursuit1d",
        vectorized_controls=True,
    )
    return GameInstance(spec, Domain.interval(0.0, 1.0))


def make_rot2d(n_angles: int = 8, speed: float = 0.5) -> GameInstance:
    """2-D game on the unit ball: a = I, drift = speed*(dir(alpha) - dir(beta))
    over compass directions.  Identical grids cancel at the saddle, so the
    value is (1 - |x|^2)/4 exactly."""
    angles = np.arange(n_angles) * (2.0 * np.pi / n_angles)
    pts = angles[:, None]
    controls = ControlGrid(alphas=pts, betas=pts, params=np.array([[1.0]]))
    s = float(speed)

    def drift(alpha, beta, p, x):
        ta, tb = np.asarray(alpha)[..., 0], np.asarray(beta)[..., 0]
        b = s * np.stack(
            [np.cos(ta) - np.cos(tb), np.sin(ta) - np.sin(tb)], axis=-1
        )
        if b.ndim == 1:
            b = np.broadcast_to(b, (x.shape[0], 2)).copy()
        return b

    spec = GameSpec(
        dim=2,
        noise_dim=2,
        sigma=_const_sigma(np.sqrt(2.0) * np.eye(2)),
        drift_b=drift,
        cost_c=_scalar_field(0.0),
        running_f=_scalar_field(1.0),
        terminal_g=lambda x: np.zeros(np.atleast_2d(x).shape[0]),
        factor_r=_scalar_field(1.0),
        delta=1.0,
        delta1=1.0,
        k0=2.0 * max(1.0, s),
        controls=controls,
        name="rot2d",
        vectorized_controls=True,
    )
    dom = Domain.ball(np.zeros(2), 1.0)

    def exact(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (1.0 - np.sum(x * x, axis=1)) / 4.0

    return GameInstance(spec, dom, exact_value=exact)


BUILTIN_GAMES = {
    "bm1d": make_bm1d,
    "pursuit1d": make_pursuit1d,
    "rot2d": make_rot2d,
}


def builtin_game(name: str, **options) -> GameInstance:
    try:
        factory = BUILTIN_GAMES[name]
    except KeyError:
        raise UsageError(
            f"unknown builtin game {name!r}; known: {sorted(BUILTIN_GAMES)}"
        ) from None
    return factory(**options)
