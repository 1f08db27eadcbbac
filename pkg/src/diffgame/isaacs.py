"""Pointwise Isaacs operator and the epsilon-optimal control selectors.

Everything here is an exact finite min-max over the control grids evaluated
at the base parameter point.  Ties resolve to the least grid index, which
makes strategies deterministic and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoAdmissibleIndex, UsageError
from .game_model import GameSpec

__all__ = [
    "FieldDerivatives",
    "bar_L_apply",
    "bar_value_table",
    "isaacs_H",
    "select_beta",
    "select_alpha",
    "beta_index_table",
    "alpha_index_choice",
]


@dataclass(frozen=True)
class FieldDerivatives:
    """Value, gradient and Hessian of a scalar field at one point."""

    value: float
    gradient: np.ndarray
    hessian: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gradient, dtype=float))
        h = np.atleast_2d(np.asarray(self.hessian, dtype=float))
        object.__setattr__(self, "gradient", g)
        object.__setattr__(self, "hessian", h)
        if h.shape != (g.shape[0], g.shape[0]):
            raise UsageError("hessian shape does not match gradient dimension")
        asym = np.abs(h - h.T) / (1.0 + np.abs(h))
        if asym.max() > 1e-12:
            raise UsageError("hessian is not symmetric to 1e-12")


def _base_coeff_arrays(spec: GameSpec, x_batch: np.ndarray):
    """(a, b, c, f) arrays per (alpha, beta) pair at the base parameter.

    Returns arrays of shape (n_alpha, n_beta, n, ...).
    """
    g = spec.controls
    n = x_batch.shape[0]
    d = spec.dim
    a = np.empty((g.n_alpha, g.n_beta, n, d, d))
    b = np.empty((g.n_alpha, g.n_beta, n, d))
    c = np.empty((g.n_alpha, g.n_beta, n))
    f = np.empty((g.n_alpha, g.n_beta, n))
    pp = g.base_param
    for ia in range(g.n_alpha):
        for ib in range(g.n_beta):
            sig = np.asarray(spec.sigma(g.alphas[ia], g.betas[ib], pp, x_batch), dtype=float)
            a[ia, ib] = 0.5 * np.einsum("nij,nkj->nik", sig, sig)
            b[ia, ib] = np.asarray(spec.drift_b(g.alphas[ia], g.betas[ib], pp, x_batch), dtype=float)
            c[ia, ib] = np.asarray(spec.cost_c(g.alphas[ia], g.betas[ib], pp, x_batch), dtype=float)
            f[ia, ib] = np.asarray(spec.running_f(g.alphas[ia], g.betas[ib], pp, x_batch), dtype=float)
    return a, b, c, f


def bar_value_table(spec: GameSpec, x_batch, values, gradients, hessians) -> np.ndarray:
    """L u + f at the base parameter for every control pair.

    x_batch (n, d), values (n,), gradients (n, d), hessians (n, d, d);
    returns (n, n_alpha, n_beta).
    """
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=float))
    a, b, c, f = _base_coeff_arrays(spec, x_batch)
    lin = (
        np.einsum("abnij,nij->abn", a, np.asarray(hessians, dtype=float))
        + np.einsum("abni,ni->abn", b, np.asarray(gradients, dtype=float))
        - c * np.asarray(values, dtype=float)[None, None, :]
        + f
    )
    return np.moveaxis(lin, 2, 0)


def bar_L_apply(spec: GameSpec, alpha: int, beta: int, x, du: FieldDerivatives) -> float:
    """a:D2u + b.Du - c*u at the base parameter point."""
    from .game_model import base_coefficients

    a, b, c, _ = base_coefficients(spec, alpha, beta, np.asarray(x, dtype=float))
    return float(
        np.einsum("ij,ij->", a, du.hessian) + np.dot(b, du.gradient) - c * du.value
    )


def isaacs_H(spec: GameSpec, x, du: FieldDerivatives):
    """sup over alpha of inf over beta of [L u + f], with achieving indices.

    Returns (value, argmax_alpha, saddle_beta); ties break to least index.
    """
    table = bar_value_table(
        spec, np.asarray(x, dtype=float)[None, :], [du.value], du.gradient[None, :], du.hessian[None, :, :]
    )[0]
    inner = table.min(axis=1)
    ia = int(np.argmax(inner))
    ib = int(np.argmin(table[ia]))
    return float(inner[ia]), ia, ib


def beta_index_table(value_table: np.ndarray, eps: float) -> np.ndarray:
    """Least beta index with L u + f <= eps, per (point, alpha); -1 if none.

    value_table has shape (n, n_alpha, n_beta).
    """
    ok = value_table <= eps
    first = np.argmax(ok, axis=2)
    return np.where(ok.any(axis=2), first, -1)


def alpha_index_choice(value_table: np.ndarray, eps: float) -> np.ndarray:
    """Least alpha index with inf over beta of [L u + f] >= -eps; -1 if none."""
    inner = value_table.min(axis=2)
    ok = inner >= -eps
    first = np.argmax(ok, axis=1)
    return np.where(ok.any(axis=1), first, -1)


def _du_table(spec, x, du):
    return bar_value_table(
        spec,
        np.asarray(x, dtype=float)[None, :],
        [du.value],
        du.gradient[None, :],
        du.hessian[None, :, :],
    )[0]


def select_beta(spec: GameSpec, alpha: int, x, du: FieldDerivatives, eps: float, dom=None) -> int:
    """Least beta index i with L u + f <= eps at this alpha.

    Outside the domain the fixed index 0 is returned regardless of the field.
    Raises NoAdmissibleIndex when no grid point qualifies (the field is not an
    eps-supersolution at x for this alpha).
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    spec.control_point("alpha", alpha)
    x = np.asarray(x, dtype=float)
    if dom is not None and not dom.contains(x):
        return 0
    row = _du_table(spec, x, du)[alpha]
    idx = np.flatnonzero(row <= eps)
    if idx.size == 0:
        raise NoAdmissibleIndex("beta", x, eps, float(row.min()))
    return int(idx[0])


def select_alpha(spec: GameSpec, x, du: FieldDerivatives, eps: float, dom=None) -> int:
    """Least alpha index with inf over beta of [L u + f] >= -eps.

    Outside the domain the fixed index 0 is returned.  Raises
    NoAdmissibleIndex when the field is not an eps-subsolution at x.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    x = np.asarray(x, dtype=float)
    if dom is not None and not dom.contains(x):
        return 0
    inner = _du_table(spec, x, du).min(axis=1)
    idx = np.flatnonzero(inner >= -eps)
    if idx.size == 0:
        raise NoAdmissibleIndex("alpha", x, eps, float(inner.max()))
    return int(idx[0])
