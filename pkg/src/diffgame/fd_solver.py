"""Monotone finite-difference solver for the Isaacs Dirichlet problem.

The scheme uses central second differences (Shortley-Weller corrected at cut
cells near curved boundaries), first-order upwind drift, and the standard
seven-point positive-coefficient form for cross derivatives.  Off-diagonal
stencil weights stay nonnegative and row sums stay <= -c, so the frozen-policy
systems are M-matrices and policy iteration is exact over the finite control
grids: an outer argmax over alpha, an inner Howard loop over beta with direct
sparse solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import Domain
from .errors import (
    MeshTooCoarse,
    NoConvergence,
    OutsideDomain,
    SingularLinearSystem,
    UsageError,
)
from .game_model import GameSpec
from .isaacs import FieldDerivatives

__all__ = [
    "Lattice",
    "ValueField",
    "AnalyticField",
    "SolveReport",
    "build_lattice",
    "discretize_L",
    "StencilRow",
    "policy_iteration_solve",
    "field_derivatives",
    "holder_quotient",
    "write_field_csv",
]

_CUT_TOL = 1e-12


@dataclass
class Lattice:
    """Rectangular grid over the domain's bounding box with interior nodes
    classified and cut fractions to the boundary precomputed."""

    dom: Domain
    axes: list  # d arrays of node coordinates per axis
    h: np.ndarray  # (d,) spacing per axis
    shape: tuple
    interior_multi: np.ndarray  # (n, d) integer grid coordinates
    nodes: np.ndarray  # (n, d) interior node coordinates
    grid_id: np.ndarray  # full-grid -> interior index, -1 otherwise
    theta_minus: np.ndarray  # (n, d) fraction of h to the minus-side sample
    theta_plus: np.ndarray  # (n, d)
    cols: np.ndarray  # (n, S) interior neighbor index, or n for non-interior
    bpts: np.ndarray  # (n, S, d) boundary sample coordinates (NaN if interior)
    cross_ok: np.ndarray  # (n,) all eight grid neighbors are full grid nodes
    boundary_nodes: np.ndarray  # grid nodes on or outside the boundary, adjacent to interior

    @property
    def n_interior(self) -> int:
        return self.nodes.shape[0]

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def n_slots(self) -> int:
        return self.cols.shape[1]

    def slot_offsets(self):
        """Stencil slot layout as integer offsets (center, axis pairs, diagonals)."""
        d = self.dim
        offs = [tuple([0] * d)]
        for k in range(d):
            m = [0] * d
            m[k] = -1
            offs.append(tuple(m))
            p = [0] * d
            p[k] = 1
            offs.append(tuple(p))
        for k in range(d):
            for l in range(k + 1, d):
                for sk, sl in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                    m = [0] * d
                    m[k], m[l] = sk, sl
                    offs.append(tuple(m))
        return offs


def build_lattice(dom: Domain, h_target: float) -> Lattice:
    """Mesh the bounding box at spacing ~h_target; endpoints land on the
    boundary exactly for interval/box domains."""
    if h_target <= 0:
        raise UsageError("mesh width must be positive")
    lo, hi = dom.bounding_box()
    d = dom.dim
    axes = []
    h = np.empty(d)
    for k in range(d):
        m = max(2, int(round((hi[k] - lo[k]) / h_target)))
        axes.append(np.linspace(lo[k], hi[k], m + 1))
        h[k] = (hi[k] - lo[k]) / m
    shape = tuple(len(ax) for ax in axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh], axis=1)
    sdist = dom.signed_distance(coords)
    inside = sdist < 0.0
    grid_id = np.full(coords.shape[0], -1, dtype=np.int64)
    interior_flat = np.flatnonzero(inside)
    grid_id[interior_flat] = np.arange(interior_flat.size)
    interior_multi = np.stack(np.unravel_index(interior_flat, shape), axis=1)
    nodes = coords[interior_flat]
    n = nodes.shape[0]
    if n == 0:
        raise UsageError("no interior nodes at this mesh width")

    offs = []
    for k in range(d):
        m = [0] * d
        m[k] = -1
        offs.append(m)
        p = [0] * d
        p[k] = 1
        offs.append(p)
    diag_offs = []
    for k in range(d):
        for l in range(k + 1, d):
            for sk, sl in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
                m = [0] * d
                m[k], m[l] = sk, sl
                diag_offs.append(m)
    S = 1 + len(offs) + len(diag_offs)

    cols = np.full((n, S), n, dtype=np.int64)
    bpts = np.full((n, S, d), np.nan)
    theta_minus = np.ones((n, d))
    theta_plus = np.ones((n, d))
    cols[:, 0] = np.arange(n)
    cross_ok = np.ones(n, dtype=bool)
    boundary_set = set()

    def flat_of(multi):
        return np.ravel_multi_index(multi, shape)

    strides = np.array(
        [int(np.prod(shape[k + 1 :], dtype=np.int64)) for k in range(d)], dtype=np.int64
    )

    for s_idx, off in enumerate(offs, start=1):
        off = np.asarray(off)
        nb_multi = interior_multi + off
        ok = np.all((nb_multi >= 0) & (nb_multi < np.asarray(shape)), axis=1)
        if not np.all(ok):
            raise UsageError("interior node adjacent to grid edge; refine the box")
        nb_flat = nb_multi @ strides
        nb_id = grid_id[nb_flat]
        cols[:, s_idx] = np.where(nb_id >= 0, nb_id, n)
        k = int(np.argmax(np.abs(off)))
        sign = int(off[k])
        outside = np.flatnonzero(nb_id < 0)
        for i in outside:
            nb_x = coords[nb_flat[i]]
            sd_nb = dom.signed_distance(nb_x)
            if abs(sd_nb) <= _CUT_TOL * max(1.0, dom.diameter):
                theta, bpt = 1.0, nb_x
            else:
                # cut cell: locate the boundary along the axis segment
                x0 = nodes[i]
                lo_t, hi_t = 0.0, 1.0
                while hi_t - lo_t > 1e-13:
                    mid = 0.5 * (lo_t + hi_t)
                    if dom.signed_distance(x0 + mid * (nb_x - x0)) < 0.0:
                        lo_t = mid
                    else:
                        hi_t = mid
                theta, bpt = hi_t, x0 + hi_t * (nb_x - x0)
                cross_ok[i] = False
            if sign < 0:
                theta_minus[i, k] = theta
            else:
                theta_plus[i, k] = theta
            bpts[i, s_idx] = bpt
            boundary_set.add(int(nb_flat[i]))

    for j, off in enumerate(diag_offs):
        s_idx = 1 + len(offs) + j
        off = np.asarray(off)
        nb_multi = interior_multi + off
        ok = np.all((nb_multi >= 0) & (nb_multi < np.asarray(shape)), axis=1)
        nb_flat = np.where(ok, nb_multi @ strides, 0)
        nb_id = np.where(ok, grid_id[nb_flat], -1)
        cols[:, s_idx] = np.where(nb_id >= 0, nb_id, n)
        miss = np.flatnonzero((nb_id < 0))
        for i in miss:
            if not ok[i]:
                cross_ok[i] = False
                continue
            nb_x = coords[nb_flat[i]]
            if abs(dom.signed_distance(nb_x)) <= _CUT_TOL * max(1.0, dom.diameter):
                bpts[i, s_idx] = nb_x  # exact boundary grid node: usable
                boundary_set.add(int(nb_flat[i]))
            else:
                cross_ok[i] = False

    boundary_nodes = coords[sorted(boundary_set)] if boundary_set else np.empty((0, d))
    return Lattice(
        dom=dom,
        axes=axes,
        h=h,
        shape=shape,
        interior_multi=interior_multi,
        nodes=nodes,
        grid_id=grid_id,
        theta_minus=theta_minus,
        theta_plus=theta_plus,
        cols=cols,
        bpts=bpts,
        cross_ok=cross_ok,
        boundary_nodes=boundary_nodes,
    )


def _pair_weights(spec: GameSpec, lat: Lattice, ia: int, ib: int):
    """Stencil weights (n, S) and source f (n,) for one control pair at the
    base parameter.  Raises MeshTooCoarse when positivity fails."""
    from .game_model import base_coefficients

    n, d = lat.nodes.shape
    S = lat.n_slots
    a, b, c, f = base_coefficients(spec, ia, ib, lat.nodes)
    W = np.zeros((n, S))
    h = lat.h
    tm, tp = lat.theta_minus, lat.theta_plus
    for k in range(d):
        akk = a[:, k, k]
        sm, sp_ = 1 + 2 * k, 2 + 2 * k
        denom = h[k] * h[k]
        wm = 2.0 * akk / (denom * tm[:, k] * (tm[:, k] + tp[:, k]))
        wp = 2.0 * akk / (denom * tp[:, k] * (tm[:, k] + tp[:, k]))
        wc = -2.0 * akk / (denom * tm[:, k] * tp[:, k])
        bk = b[:, k]
        pos = bk > 0
        wp = wp + np.where(pos, bk / (tp[:, k] * h[k]), 0.0)
        wm = wm + np.where(~pos, -bk / (tm[:, k] * h[k]), 0.0)
        wc = wc - np.abs(bk) / (np.where(pos, tp[:, k], tm[:, k]) * h[k])
        W[:, sm] += wm
        W[:, sp_] += wp
        W[:, 0] += wc
    # cross derivatives
    slot = 1 + 2 * d
    for k in range(d):
        for l in range(k + 1, d):
            akl = a[:, k, l]
            active = np.abs(akl) > 1e-14
            if np.any(active):
                bad = active & ~lat.cross_ok
                if np.any(bad):
                    i = int(np.flatnonzero(bad)[0])
                    raise MeshTooCoarse(
                        f"cross-derivative stencil unavailable at node {lat.nodes[i]}"
                    )
                H = h[k] * h[l]
                spos = np.maximum(akl, 0.0)
                sneg = np.maximum(-akl, 0.0)
                W[:, slot] += spos / H  # ++
                W[:, slot + 1] += spos / H  # --
                W[:, slot + 2] += sneg / H  # +-
                W[:, slot + 3] += sneg / H  # -+
                W[:, 0] += 2.0 * (spos + sneg) / H
                for kk in (k, l):
                    W[:, 1 + 2 * kk] -= (spos + sneg) / H
                    W[:, 2 + 2 * kk] -= (spos + sneg) / H
            slot += 4
    if np.any(W[:, 1:] < -1e-10):
        i, s = np.unravel_index(int(np.argmin(W[:, 1:])), W[:, 1:].shape)
        raise MeshTooCoarse(
            f"negative off-diagonal weight {W[i, 1 + s]:.3g} at node {lat.nodes[i]}; "
            "diffusion is not diagonally dominant at this mesh width"
        )
    W[:, 0] -= c
    return W, f


@dataclass(frozen=True)
class StencilRow:
    """One discretized operator row: offsets, weights, boundary source."""

    offsets: tuple
    weights: np.ndarray
    boundary_source: float  # sum of weight * g over non-interior neighbors


def discretize_L(spec: GameSpec, lattice: Lattice, alpha: int, beta: int, node: int,
                 g: Optional[Callable] = None) -> StencilRow:
    """Stencil row of the base-parameter operator at one interior node."""
    if not 0 <= node < lattice.n_interior:
        raise UsageError("node index out of range")
    W, _ = _pair_weights(spec, lattice, alpha, beta)
    row = W[node]
    bsrc = 0.0
    if g is not None:
        for s in range(lattice.n_slots):
            if lattice.cols[node, s] == lattice.n_interior and not np.isnan(
                lattice.bpts[node, s, 0]
            ):
                bsrc += row[s] * float(np.atleast_1d(g(lattice.bpts[node, s]))[0])
    return StencilRow(tuple(lattice.slot_offsets()), row.copy(), bsrc)


@dataclass
class ValueField:
    """Grid function with Dirichlet boundary data baked into the full grid.

    ``grid_values`` covers the whole bounding-box grid; non-interior entries
    carry the boundary trace of g so multilinear interpolation works up to
    the boundary.
    """

    lattice: Lattice
    values: np.ndarray  # (n_interior,)
    boundary_fn: Callable
    grid_values: np.ndarray = field(default=None, repr=False)
    _deriv_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.grid_values is None:
            lat = self.lattice
            full = np.empty(int(np.prod(lat.shape)))
            mesh = np.meshgrid(*lat.axes, indexing="ij")
            coords = np.stack([m.ravel() for m in mesh], axis=1)
            outside = lat.grid_id < 0
            proj = lat.dom.project_to_boundary(coords[outside])
            full[outside] = np.atleast_1d(self.boundary_fn(proj))
            full[~outside] = self.values[lat.grid_id[~outside]]
            self.grid_values = full.reshape(lat.shape)

    # ------------------------------------------------------------------
    def _interp(self, grid: np.ndarray, x: np.ndarray) -> np.ndarray:
        lat = self.lattice
        x = np.atleast_2d(x)
        n, d = x.shape
        idx = np.empty((n, d), dtype=np.int64)
        frac = np.empty((n, d))
        for k in range(d):
            ax = lat.axes[k]
            j = np.clip(np.searchsorted(ax, x[:, k]) - 1, 0, len(ax) - 2)
            idx[:, k] = j
            frac[:, k] = (x[:, k] - ax[j]) / (ax[j + 1] - ax[j])
        out = np.zeros(n)
        for corner in range(1 << d):
            w = np.ones(n)
            pos = idx.copy()
            for k in range(d):
                if corner >> k & 1:
                    w *= frac[:, k]
                    pos[:, k] += 1
                else:
                    w *= 1.0 - frac[:, k]
            out += w * grid[tuple(pos.T)]
        return out

    def value(self, x):
        """Multilinear interpolation inside the closure."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        out = self._interp(self.grid_values, xb)
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def value_or_boundary(self, x):
        """Field value inside, boundary data g outside the domain."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(xb.shape[0])
        inside = self.lattice.dom.signed_distance(xb) < 0.0
        if np.any(inside):
            out[inside] = self._interp(self.grid_values, xb[inside])
        if np.any(~inside):
            out[~inside] = np.atleast_1d(self.boundary_fn(xb[~inside]))
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def _nodal_derivative_grids(self):
        """Central-difference gradient and Hessian grids (one-sided at edges)."""
        if "grad" in self._deriv_cache:
            return self._deriv_cache["grad"], self._deriv_cache["hess"]
        lat = self.lattice
        d = lat.dim
        G = self.grid_values
        grads = [np.gradient(G, lat.axes[k], axis=k, edge_order=2) for k in range(d)]
        hess = [
            [np.gradient(grads[k], lat.axes[l], axis=l, edge_order=2) for l in range(d)]
            for k in range(d)
        ]
        # symmetrize mixed derivatives computed in either order
        for k in range(d):
            for l in range(k + 1, d):
                m = 0.5 * (hess[k][l] + hess[l][k])
                hess[k][l] = m
                hess[l][k] = m
        self._deriv_cache["grad"] = grads
        self._deriv_cache["hess"] = hess
        return grads, hess

    def derivatives_batch(self, x):
        """(values, gradients, hessians) by interpolation of nodal differences."""
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        sd = self.lattice.dom.signed_distance(xb)
        if np.any(sd >= 0.0):
            raise OutsideDomain(f"point outside domain: {xb[np.argmax(sd)]}")
        d = self.lattice.dim
        grads, hess = self._nodal_derivative_grids()
        vals = self._interp(self.grid_values, xb)
        grad = np.stack([self._interp(grads[k], xb) for k in range(d)], axis=1)
        h = np.empty((xb.shape[0], d, d))
        for k in range(d):
            for l in range(k, d):
                h[:, k, l] = self._interp(hess[k][l], xb)
                h[:, l, k] = h[:, k, l]
        return vals, grad, h

    def derivatives_at(self, x) -> FieldDerivatives:
        v, g, h = self.derivatives_batch(np.asarray(x, dtype=float)[None, :])
        return FieldDerivatives(float(v[0]), g[0], h[0])


def field_derivatives(u: ValueField, x) -> FieldDerivatives:
    """Interpolated value/gradient/Hessian of the solved field at x."""
    return u.derivatives_at(x)


@dataclass
class AnalyticField:
    """Closed-form field with the same access protocol as ValueField.

    Useful for feeding exact solutions to strategies and certificate checks.
    ``value_fn`` maps (n, d) -> (n,); gradient (n, d); hessian (n, d, d).
    """

    value_fn: Callable
    gradient_fn: Callable
    hessian_fn: Callable
    outside_fn: Optional[Callable] = None  # boundary/exterior data, defaults to value_fn
    dom: Optional[Domain] = None

    def value(self, x):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.atleast_1d(self.value_fn(xb))
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def value_or_boundary(self, x):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.atleast_1d(np.asarray(self.value_fn(xb), dtype=float)).copy()
        if self.outside_fn is not None and self.dom is not None:
            outside = self.dom.signed_distance(xb) >= 0.0
            if np.any(outside):
                out[outside] = np.atleast_1d(self.outside_fn(xb[outside]))
        return float(out[0]) if np.asarray(x).ndim == 1 else out

    def derivatives_batch(self, x):
        xb = np.atleast_2d(np.asarray(x, dtype=float))
        return (
            np.atleast_1d(self.value_fn(xb)),
            np.atleast_2d(self.gradient_fn(xb)),
            np.atleast_2d(self.hessian_fn(xb)).reshape(xb.shape[0], xb.shape[1], xb.shape[1]),
        )

    def derivatives_at(self, x) -> FieldDerivatives:
        v, g, h = self.derivatives_batch(np.asarray(x, dtype=float)[None, :])
        return FieldDerivatives(float(v[0]), g[0], h[0])


@dataclass
class SolveReport:
    iterations: int
    residual: float
    residual_history: list
    lower_value_residual: float  # inf-sup diagnostic at the solved field
    n_nodes: int
    h: float
    converged: bool

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "residual_history": list(self.residual_history),
            "lower_value_residual": self.lower_value_residual,
            "n_nodes": self.n_nodes,
            "h": self.h,
            "converged": self.converged,
        }


class _Discretization:
    """Per-pair stencil weights, boundary sources and running costs."""

    def __init__(self, spec: GameSpec, lat: Lattice, g: Callable):
        self.lat = lat
        na, nb = spec.controls.n_alpha, spec.controls.n_beta
        n, S = lat.n_interior, lat.n_slots
        self.W = np.empty((na, nb, n, S))
        self.F = np.empty((na, nb, n))
        gb = np.zeros((n, S))
        has_b = lat.cols == n
        for s in range(S):
            rows = np.flatnonzero(has_b[:, s] & ~np.isnan(lat.bpts[:, s, 0]))
            if rows.size:
                gb[rows, s] = np.atleast_1d(g(lat.bpts[rows, s, :]))
        self.BC = np.empty((na, nb, n))
        for ia in range(na):
            for ib in range(nb):
                W, f = _pair_weights(spec, lat, ia, ib)
                self.W[ia, ib] = W
                self.F[ia, ib] = f
                self.BC[ia, ib] = np.einsum("ns,ns->n", W, gb)
        self.cols = lat.cols
        self.n = n

    def residual_tables(self, u: np.ndarray) -> np.ndarray:
        """L_h u + f for every pair: shape (na, nb, n)."""
        upad = np.append(u, 0.0)
        unb = upad[self.cols]  # (n, S)
        return np.einsum("abns,ns->abn", self.W, unb) + self.BC + self.F

    def mixed_system(self, pol_a: np.ndarray, pol_b: np.ndarray):
        n, S = self.n, self.cols.shape[1]
        rows_idx = np.arange(n)
        W = self.W[pol_a, pol_b, rows_idx]  # (n, S)
        bc = self.BC[pol_a, pol_b, rows_idx]
        f = self.F[pol_a, pol_b, rows_idx]
        cols = self.cols
        keep = cols < n
        rows = np.repeat(rows_idx, S).reshape(n, S)[keep]
        M = sp.csr_matrix((W[keep], (rows, cols[keep])), shape=(n, n))
        return M, -(bc + f)


def policy_iteration_solve(
    spec: GameSpec,
    lattice: Lattice,
    g: Callable,
    tol: float = 1e-8,
    max_outer: int = 200,
    inner_cap: int = 100,
):
    """Solve max_alpha min_beta [L_h u + f] = 0 with Dirichlet data g.

    Returns (ValueField, SolveReport).  Raises NoConvergence with the best
    iterate attached, SingularLinearSystem when a frozen-policy solve fails.
    """
    disc = _Discretization(spec, lattice, g)
    n = disc.n
    u = np.zeros(n)
    u_prev = None
    history = []
    best_u, best_res = u.copy(), np.inf
    na, nb = spec.controls.n_alpha, spec.controls.n_beta
    for outer in range(1, max_outer + 1):
        tables = disc.residual_tables(u)  # (na, nb, n)
        inner_min = tables.min(axis=1)  # (na, n)
        residual = float(np.abs(inner_min.max(axis=0)).max())
        history.append(residual)
        if residual < best_res:
            best_res, best_u = residual, u.copy()
        if residual <= tol:
            field_ = ValueField(lattice, u, g)
            lower = float(np.abs(tables.max(axis=0).min(axis=0)).max())
            return field_, SolveReport(
                outer - 1, residual, history, lower, n, float(lattice.h.max()), True
            )
        if u_prev is not None and np.array_equal(u, u_prev):
            # policies repeat: the iteration is at its fixed point but the
            # requested tolerance is below the attainable residual
            raise NoConvergence(outer, best_res, best=ValueField(lattice, best_u, g))
        u_prev = u.copy()
        pol_a = inner_min.argmax(axis=0)  # least index on ties
        pol_b = tables[pol_a, :, np.arange(n)].argmin(axis=1)
        for _ in range(inner_cap):
            M, rhs = disc.mixed_system(pol_a, pol_b)
            try:
                u_new = spla.spsolve(M.tocsc(), rhs)
            except Exception as exc:  # pragma: no cover - scipy raises various types
                raise SingularLinearSystem(str(exc)) from exc
            if not np.all(np.isfinite(u_new)):
                raise SingularLinearSystem("frozen-policy solve returned non-finite values")
            u = u_new
            tables_a = disc.residual_tables(u)[pol_a, :, np.arange(n)]  # (n, nb)
            new_b = tables_a.argmin(axis=1)
            if np.array_equal(new_b, pol_b):
                break
            pol_b = new_b
    raise NoConvergence(max_outer, best_res, best=ValueField(lattice, best_u, g))


def holder_quotient(u: ValueField, theta: float, subdomain: Domain, max_nodes: int = 2000) -> float:
    """max |u(x) - u(y)| / |x - y|^theta over node pairs in the subdomain."""
    if not 0 < theta <= 1:
        raise UsageError("theta must lie in (0, 1]")
    lat = u.lattice
    inside = subdomain.signed_distance(lat.nodes) < 0
    pts = lat.nodes[inside]
    vals = u.values[inside]
    if pts.shape[0] > max_nodes:
        step = pts.shape[0] // max_nodes + 1
        pts, vals = pts[::step], vals[::step]
    m = pts.shape[0]
    if m < 2:
        return 0.0
    best = 0.0
    for i in range(m - 1):
        dx = np.linalg.norm(pts[i + 1 :] - pts[i], axis=1)
        q = np.abs(vals[i + 1 :] - vals[i]) / dx**theta
        best = max(best, float(q.max()))
    return best


def write_field_csv(u: ValueField, path):
    """Emit interior nodes and values: columns x1..xd, u (17 significant digits)."""
    d = u.lattice.dim
    header = ",".join([f"x{k + 1}" for k in range(d)] + ["u"])
    data = np.column_stack([u.lattice.nodes, u.values])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in data:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
