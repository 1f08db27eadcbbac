"""Bounded domain geometry: membership, exit detection, shrinkage, barriers.

Signed distance is negative strictly inside, zero on the boundary, positive
outside.  Boundary points count as exited: a path starting on the boundary
has exit time zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import UsageError

__all__ = [
    "Domain",
    "SubdomainFamily",
    "Barrier",
    "contains",
    "boundary_crossing",
    "verify_barrier",
    "quadratic_barrier",
]


@dataclass(frozen=True)
class Domain:
    """Interval, axis-aligned box, or ball."""

    kind: str
    lo: np.ndarray  # box/interval lower corner; ball center
    hi: np.ndarray  # box/interval upper corner; unused for ball
    radius: float = 0.0

    @staticmethod
    def interval(a: float, b: float) -> "Domain":
        if not b > a:
            raise UsageError("interval requires b > a")
        return Domain("interval", np.array([float(a)]), np.array([float(b)]))

    @staticmethod
    def box(lo, hi) -> "Domain":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or not np.all(hi > lo):
            raise UsageError("box requires matching 1-D corners with hi > lo")
        return Domain("box", lo, hi)

    @staticmethod
    def ball(center, radius: float) -> "Domain":
        center = np.asarray(center, dtype=float)
        if radius <= 0:
            raise UsageError("ball requires radius > 0")
        return Domain("ball", center, center, float(radius))

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def diameter(self) -> float:
        if self.kind == "ball":
            return 2.0 * self.radius
        return float(np.linalg.norm(self.hi - self.lo))

    def bounding_box(self):
        if self.kind == "ball":
            return self.lo - self.radius, self.lo + self.radius
        return self.lo.copy(), self.hi.copy()

    def signed_distance(self, x):
        """Vectorized over (n, d); scalar output for a single (d,) point."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "ball":
            s = np.linalg.norm(xb - self.lo, axis=1) - self.radius
        else:
            # max over faces of the per-axis signed distances
            s = np.maximum(
                (self.lo - xb).max(axis=1), (xb - self.hi).max(axis=1)
            )
        return float(s[0]) if np.asarray(x).ndim == 1 else s

    def contains(self, x):
        s = self.signed_distance(x)
        return s < 0.0 if np.isscalar(s) else s < 0.0

    def face_distances(self, x, want_normals=True):
        """Distances to each boundary face with outward unit normals.

        Returns (dists, normals): dists (n, n_faces) positive inside,
        normals (n_faces, n, d), or None when not requested.  Used by the
        within-step exit test.
        """
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = xb.shape
        if self.kind == "ball":
            rel = xb - self.lo
            r = np.linalg.norm(rel, axis=1)
            dist = (self.radius - r)[:, None]
            if not want_normals:
                return dist, None
            with np.errstate(invalid="ignore", divide="ignore"):
                normal = np.where(r[:, None] > 0, rel / np.maximum(r, 1e-300)[:, None], 0.0)
            return dist, normal[None, :, :]
        dists = np.concatenate([xb - self.lo, self.hi - xb], axis=1)
        if not want_normals:
            return dists, None
        normals = np.zeros((2 * d, n, d))
        for k in range(d):
            normals[k, :, k] = -1.0
            normals[d + k, :, k] = 1.0
        return dists, normals

    def project_to_boundary(self, x):
        """Nearest boundary point (vectorized)."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "ball":
            rel = xb - self.lo
            r = np.linalg.norm(rel, axis=1, keepdims=True)
            r = np.maximum(r, 1e-300)
            out = self.lo + rel / r * self.radius
        else:
            out = np.clip(xb, self.lo, self.hi)
            dists = np.concatenate([out - self.lo, self.hi - out], axis=1)
            face = np.argmin(dists, axis=1)
            d = xb.shape[1]
            rows = np.arange(out.shape[0])
            axis = face % d
            out = out.copy()
            out[rows, axis] = np.where(face < d, self.lo[axis], self.hi[axis])
        return out[0] if np.asarray(x).ndim == 1 else out

    def segment_exit(self, x_in: np.ndarray, x_out: np.ndarray):
        """Exact first boundary hit on segments from inside to outside.

        Vectorized closed form per domain kind; returns (points, fractions).
        """
        dx = x_out - x_in
        if self.kind == "ball":
            rel = x_in - self.lo
            a = np.einsum("ni,ni->n", dx, dx)
            b = 2.0 * np.einsum("ni,ni->n", rel, dx)
            c = np.einsum("ni,ni->n", rel, rel) - self.radius**2
            disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                theta = np.where(a > 0, (-b + disc) / (2.0 * a), 0.0)
            theta = np.clip(theta, 0.0, 1.0)
            return x_in + theta[:, None] * dx, theta
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = np.where(dx < 0, (self.lo - x_in) / dx, np.inf)
            t_hi = np.where(dx > 0, (self.hi - x_in) / dx, np.inf)
        theta = np.minimum(t_lo.min(axis=1), t_hi.min(axis=1))
        theta = np.clip(theta, 0.0, 1.0)
        pts = x_in + theta[:, None] * dx
        return np.clip(pts, self.lo, self.hi), theta

    def shrink(self, rho: float) -> "Domain":
        """The subdomain at signed distance < -rho."""
        if rho <= 0:
            raise UsageError("shrink radius must be positive")
        if self.kind == "ball":
            if rho >= self.radius:
                raise UsageError("shrink radius exceeds ball radius")
            return Domain.ball(self.lo, self.radius - rho)
        lo, hi = self.lo + rho, self.hi - rho
        if not np.all(hi > lo):
            raise UsageError("shrink radius exceeds half-width")
        if self.kind == "interval":
            return Domain.interval(lo[0], hi[0])
        return Domain.box(lo, hi)

    def sample_interior(self, n: int, rng) -> np.ndarray:
        lo, hi = self.bounding_box()
        out = np.empty((n, self.dim))
        got = 0
        while got < n:
            cand = rng.uniform(lo, hi, size=(2 * (n - got) + 8, self.dim))
            keep = cand[self.signed_distance(cand) < -1e-12]
            take = min(n - got, keep.shape[0])
            out[got : got + take] = keep[:take]
            got += take
        return out

    def boundary_samples(self, n: int, rng=None) -> np.ndarray:
        rng = rng or np.random.default_rng(0)
        if self.kind == "interval":
            return np.array([[self.lo[0]], [self.hi[0]]])
        if self.kind == "ball":
            v = rng.standard_normal((n, self.dim))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return self.lo + self.radius * v
        pts = rng.uniform(self.lo, self.hi, size=(n, self.dim))
        face = rng.integers(0, 2 * self.dim, size=n)
        axis = face % self.dim
        pts[np.arange(n), axis] = np.where(face < self.dim, self.lo[axis], self.hi[axis])
        return pts


def contains(dom: Domain, x) -> bool:
    return bool(dom.contains(np.asarray(x, dtype=float)))


def boundary_crossing(dom: Domain, x_prev, x_next, rtol: float = 1e-12):
    """Locate the first boundary hit on the segment [x_prev, x_next].

    Returns (crossing point, fraction theta) or None when x_next is still
    inside.  Requires x_prev inside; bisection to rtol of segment length.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    if dom.signed_distance(x_prev) >= 0.0:
        raise UsageError("boundary_crossing requires x_prev strictly inside")
    if dom.signed_distance(x_next) < 0.0:
        return None
    lo, hi = 0.0, 1.0
    # invariant: point at lo inside, point at hi outside or on the boundary
    while hi - lo > rtol:
        mid = 0.5 * (lo + hi)
        if dom.signed_distance(x_prev + mid * (x_next - x_prev)) < 0.0:
            lo = mid
        else:
            hi = mid
    theta = hi
    return x_prev + theta * (x_next - x_prev), theta


@dataclass(frozen=True)
class SubdomainFamily:
    """Nested shrunken subdomains D_n = {signed_distance < -rho_n}."""

    parent: Domain
    shrink_radii: tuple

    def __post_init__(self):
        radii = tuple(float(r) for r in self.shrink_radii)
        object.__setattr__(self, "shrink_radii", radii)
        if not radii or any(r <= 0 for r in radii):
            raise UsageError("shrink radii must be positive")
        if any(b >= a for a, b in zip(radii, radii[1:])) and not all(
            b < a for a, b in zip(radii, radii[1:])
        ):
            raise UsageError("shrink radii must be strictly decreasing")

    def __len__(self) -> int:
        return len(self.shrink_radii)

    def member(self, i: int) -> Domain:
        return self.parent.shrink(self.shrink_radii[i])


@dataclass(frozen=True)
class Barrier:
    """Nonnegative function vanishing on the boundary, with derivatives."""

    value: Callable
    gradient: Callable
    hessian: Optional[Callable] = None

    def check_shape(self, dom: Domain, n_boundary: int = 64, tol: float = 1e-9):
        """Sampled invariant check: >= 0 inside, = 0 on the boundary."""
        rng = np.random.default_rng(1)
        inside = dom.sample_interior(64, rng)
        vals = np.array([float(self.value(x)) for x in inside])
        bpts = dom.boundary_samples(n_boundary, rng)
        bvals = np.array([float(self.value(x)) for x in bpts])
        return bool(vals.min() >= -tol and np.abs(bvals).max() <= tol)


def quadratic_barrier(dom: Domain, scale: float = 1.0) -> Barrier:
    """Closed-form quadratic vanishing on the boundary.

    interval/box: scale * (x1-a1)(b1-x1) on the first axis;
    ball: scale * (R^2 - |x-c|^2) / 2.
    """
    s = float(scale)
    if dom.kind == "ball":
        c, R = dom.lo, dom.radius

        def value(x):
            x = np.asarray(x, dtype=float)
            return s * (R * R - np.sum((x - c) ** 2, axis=-1)) / 2.0

        def gradient(x):
            x = np.asarray(x, dtype=float)
            return -s * (x - c)

        def hessian(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            h = np.broadcast_to(-s * np.eye(dom.dim), (x.shape[0], dom.dim, dom.dim)).copy()
            return h[0] if np.asarray(x).ndim == 1 else h

        return Barrier(value, gradient, hessian)

    a, b = dom.lo[0], dom.hi[0]

    def value(x):
        x = np.asarray(x, dtype=float)
        x1 = x[..., 0]
        return s * (x1 - a) * (b - x1)

    def gradient(x):
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        g[..., 0] = s * (a + b - 2.0 * x[..., 0])
        return g

    def hessian(x):
        x = np.asarray(x, dtype=float)
        d = dom.dim
        if x.ndim == 1:
            h = np.zeros((d, d))
            h[0, 0] = -2.0 * s
            return h
        h = np.zeros((x.shape[0], d, d))
        h[:, 0, 0] = -2.0 * s
        return h

    return Barrier(value, gradient, hessian)


@dataclass(frozen=True)
class BarrierReport:
    max_lg: float
    bound: float
    passed: bool
    worst_point: np.ndarray


def verify_barrier(spec, bar: Barrier, dom: Domain, sample_points, tol: float = 1e-9) -> BarrierReport:
    """Check L G <= -1 over all control triples on interior samples."""
    if bar.hessian is None:
        raise UsageError("barrier lacks a second-derivative evaluator")
    from .game_model import eval_diffusion  # local import; no cycle at module load

    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if np.any(dom.signed_distance(pts) >= 0):
        raise UsageError("barrier samples must lie inside the domain")
    grads = np.asarray([bar.gradient(x) for x in pts])
    hess = np.asarray([bar.hessian(x) for x in pts])
    vals = np.asarray([float(bar.value(x)) for x in pts])
    worst = -np.inf
    worst_pt = pts[0]
    g = spec.controls
    for ia in range(g.n_alpha):
        for ib in range(g.n_beta):
            for ip in range(g.n_param):
                a, b, c, _ = eval_diffusion(spec, ia, ib, ip, pts)
                lg = (
                    np.einsum("nij,nij->n", a, hess)
                    + np.einsum("ni,ni->n", b, grads)
                    - c * vals
                )
                k = int(np.argmax(lg))
                if lg[k] > worst:
                    worst = float(lg[k])
                    worst_pt = pts[k]
    return BarrierReport(worst, -1.0, worst <= -1.0 + tol, worst_pt)
