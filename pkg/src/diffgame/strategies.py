"""Nonanticipating strategies: constants, feedback, and the piecewise-constant
epsilon-optimal constructions for both players.

The epsilon-optimal objects freeze the path state at mesh times k/n (the
frozen state is captured at the first query on or after each mesh time) and
re-run the selector with the live opponent control between mesh times, so the
output depends on the state only through its mesh-time snapshots while still
reacting instantaneously to the opponent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NoAdmissibleIndex, UsageError
from .game_model import GameSpec
from .isaacs import alpha_index_choice, bar_value_table, beta_index_table

__all__ = [
    "ControlSignal",
    "Strategy",
    "AlphaResponse",
    "beta_step",
    "alpha_step",
    "strategy_pair_saddle",
]


def _mesh_index(t: float, n: int) -> int:
    return int(np.floor(t * n + 1e-9))


@dataclass(frozen=True)
class ControlSignal:
    """Open-loop or feedback control for the maximizing player."""

    kind: str  # constant | piecewise_table | feedback
    index: int = 0
    breakpoints: Optional[np.ndarray] = None  # increasing, starting at 0
    table: Optional[np.ndarray] = None
    feedback_fn: Optional[Callable] = None  # (t, x_batch) -> index array

    @staticmethod
    def constant(index: int) -> "ControlSignal":
        return ControlSignal("constant", index=index)

    @staticmethod
    def piecewise(breakpoints, indices) -> "ControlSignal":
        bp = np.asarray(breakpoints, dtype=float)
        idx = np.asarray(indices, dtype=np.int64)
        if bp.ndim != 1 or bp.shape != idx.shape or bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise UsageError("piecewise table needs increasing breakpoints starting at 0")
        return ControlSignal("piecewise_table", breakpoints=bp, table=idx)

    @staticmethod
    def feedback(fn: Callable) -> "ControlSignal":
        return ControlSignal("feedback", feedback_fn=fn)

    def at(self, t: float, x) -> int:
        return int(self.at_batch(t, np.atleast_2d(np.asarray(x, dtype=float)))[0])

    def at_batch(self, t: float, x_batch: np.ndarray) -> np.ndarray:
        n = x_batch.shape[0]
        if self.kind == "constant":
            return np.full(n, self.index, dtype=np.int64)
        if self.kind == "piecewise_table":
            j = int(np.searchsorted(self.breakpoints, t, side="right") - 1)
            return np.full(n, int(self.table[max(j, 0)]), dtype=np.int64)
        return np.asarray(self.feedback_fn(t, x_batch), dtype=np.int64).reshape(n)


def _selector_tables(spec, u_field, dom, x_batch, eps):
    """(n, n_alpha) least-admissible beta table and (n,) alpha choice at the
    given states; outside-domain states map to index 0 by convention."""
    n = x_batch.shape[0]
    na, nb = spec.controls.n_alpha, spec.controls.n_beta
    beta_tab = np.zeros((n, na), dtype=np.int64)
    alpha_ch = np.zeros(n, dtype=np.int64)
    inside = dom.signed_distance(x_batch) < 0.0 if dom is not None else np.ones(n, bool)
    if np.any(inside):
        vals, grads, hess = u_field.derivatives_batch(x_batch[inside])
        table = bar_value_table(spec, x_batch[inside], vals, grads, hess)
        beta_tab[inside] = beta_index_table(table, eps)
        alpha_ch[inside] = alpha_index_choice(table, eps)
    return beta_tab, alpha_ch


@dataclass
class Strategy:
    """Minimizing player's strategy.

    Kinds: constant, feedback, eps_optimal_beta.  The eps-optimal kind carries
    per-path frozen state; create one instance per path (``fresh()``).
    """

    kind: str
    index: int = 0
    feedback_fn: Optional[Callable] = None  # (t, x, alpha_idx) -> index
    spec: Optional[GameSpec] = None
    dom: Optional[object] = None
    u: Optional[object] = None  # ValueField or AnalyticField
    eps: float = 0.0
    mesh_n: int = 0
    _mesh_k: int = field(default=-1, repr=False)
    _table: Optional[np.ndarray] = field(default=None, repr=False)
    _frozen_x: Optional[np.ndarray] = field(default=None, repr=False)

    @staticmethod
    def constant(index: int) -> "Strategy":
        return Strategy("constant", index=index)

    @staticmethod
    def feedback(fn: Callable) -> "Strategy":
        return Strategy("feedback", feedback_fn=fn)

    @staticmethod
    def eps_optimal_beta(spec, dom, u, eps, mesh_n) -> "Strategy":
        if eps <= 0 or mesh_n < 1:
            raise UsageError("eps must be positive and mesh_n >= 1")
        return Strategy("eps_optimal_beta", spec=spec, dom=dom, u=u, eps=eps, mesh_n=mesh_n)

    def fresh(self) -> "Strategy":
        """New instance with cleared per-path state (same descriptor)."""
        return Strategy(
            self.kind,
            index=self.index,
            feedback_fn=self.feedback_fn,
            spec=self.spec,
            dom=self.dom,
            u=self.u,
            eps=self.eps,
            mesh_n=self.mesh_n,
        )

    def step(self, t: float, x, alpha_idx: int) -> int:
        if self.kind == "constant":
            return self.index
        if self.kind == "feedback":
            return int(self.feedback_fn(t, x, alpha_idx))
        k = _mesh_index(t, self.mesh_n)
        if k > self._mesh_k:
            xf = np.atleast_1d(np.asarray(x, dtype=float))
            tab, _ = _selector_tables(self.spec, self.u, self.dom, xf[None, :], self.eps)
            self._table = tab[0]
            self._frozen_x = xf
            self._mesh_k = k
        b = int(self._table[alpha_idx])
        if b < 0:
            raise NoAdmissibleIndex("beta", self._frozen_x, self.eps, np.nan)
        return b

    # ------------------------------------------------------------------
    def batch_state(self, n_paths: int) -> "_BatchBeta":
        return _BatchBeta(self, n_paths)


@dataclass
class AlphaResponse:
    """Maximizing player's mesh-frozen eps-optimal construction."""

    spec: GameSpec
    dom: object
    u: object
    eps: float
    mesh_n: int
    _mesh_k: int = field(default=-1, repr=False)
    _choice: int = field(default=0, repr=False)
    _frozen_x: Optional[np.ndarray] = field(default=None, repr=False)

    def fresh(self) -> "AlphaResponse":
        return AlphaResponse(self.spec, self.dom, self.u, self.eps, self.mesh_n)

    def step(self, t: float, x) -> int:
        k = _mesh_index(t, self.mesh_n)
        if k > self._mesh_k:
            xf = np.atleast_1d(np.asarray(x, dtype=float))
            _, choice = _selector_tables(self.spec, self.u, self.dom, xf[None, :], self.eps)
            if choice[0] < 0:
                raise NoAdmissibleIndex("alpha", xf, self.eps, np.nan)
            self._choice = int(choice[0])
            self._frozen_x = xf
            self._mesh_k = k
        return self._choice

    def batch_state(self, n_paths: int) -> "_BatchAlpha":
        return _BatchAlpha(self, n_paths)


class _BatchBeta:
    """Vectorized per-path state for a Strategy over a lockstep path batch.

    ``pos`` indexes the currently live subset of the batch layout; the engine
    calls ``compact`` when it drops finished paths from the layout.
    """

    def __init__(self, desc: Strategy, n_paths: int):
        self.desc = desc
        self.mesh_k = -1
        self.table = None  # (n_paths, n_alpha)
        if desc.kind == "eps_optimal_beta":
            self.table = np.zeros((n_paths, desc.spec.controls.n_alpha), dtype=np.int64)

    def select(self, t: float, x_batch: np.ndarray, alpha_idx: np.ndarray, pos=None) -> np.ndarray:
        d = self.desc
        n = x_batch.shape[0]
        if d.kind == "constant":
            return np.full(n, d.index, dtype=np.int64)
        if d.kind == "feedback":
            return np.fromiter(
                (d.feedback_fn(t, x_batch[i], int(alpha_idx[i])) for i in range(n)),
                dtype=np.int64,
                count=n,
            )
        if pos is None:
            pos = np.arange(n)
        k = _mesh_index(t, d.mesh_n)
        if k > self.mesh_k:
            tab, _ = _selector_tables(d.spec, d.u, d.dom, x_batch, d.eps)
            self.table[pos] = tab
            self.mesh_k = k
        b = self.table[pos, alpha_idx]
        if np.any(b < 0):
            i = int(np.argmin(b))
            raise NoAdmissibleIndex("beta", x_batch[i], d.eps, np.nan)
        return b

    def compact(self, keep: np.ndarray):
        if self.table is not None:
            self.table = self.table[keep]


class _BatchAlpha:
    """Vectorized per-path state for an AlphaResponse or ControlSignal."""

    def __init__(self, desc, n_paths: int):
        self.desc = desc
        self.mesh_k = -1
        self.choice = None
        if isinstance(desc, AlphaResponse):
            self.choice = np.zeros(n_paths, dtype=np.int64)

    def select(self, t: float, x_batch: np.ndarray, pos=None) -> np.ndarray:
        d = self.desc
        if isinstance(d, ControlSignal):
            return d.at_batch(t, x_batch)
        if pos is None:
            pos = np.arange(x_batch.shape[0])
        k = _mesh_index(t, d.mesh_n)
        if k > self.mesh_k:
            _, choice = _selector_tables(d.spec, d.u, d.dom, x_batch, d.eps)
            if np.any(choice < 0):
                i = int(np.argmin(choice))
                raise NoAdmissibleIndex("alpha", x_batch[i], d.eps, np.nan)
            self.choice[pos] = choice
            self.mesh_k = k
        return self.choice[pos]

    def compact(self, keep: np.ndarray):
        if self.choice is not None:
            self.choice = self.choice[keep]


def alpha_batch_state(source, n_paths: int):
    """Batch state for either a ControlSignal or an AlphaResponse."""
    if isinstance(source, AlphaResponse):
        return source.batch_state(n_paths)
    if isinstance(source, ControlSignal):
        return _BatchAlpha(source, n_paths)
    raise UsageError("alpha source must be a ControlSignal or AlphaResponse")


def beta_step(strat: Strategy, t: float, x_t, alpha_t: int) -> int:
    """Advance the minimizing player's strategy one query."""
    return strat.step(t, x_t, alpha_t)


def alpha_step(resp: AlphaResponse, t: float, x_t) -> int:
    """Advance the maximizing player's mesh-frozen response one query."""
    return resp.step(t, x_t)


def _field_domain(u, dom=None):
    if dom is not None:
        return dom
    lattice = getattr(u, "lattice", None)
    if lattice is not None:
        return lattice.dom
    d = getattr(u, "dom", None)
    if d is None:
        raise UsageError("cannot infer the domain; pass dom explicitly")
    return d


def strategy_pair_saddle(spec: GameSpec, u, eps: float, mesh_n: int, dom=None):
    """Both players' eps-optimal mesh-n constructions sharing the field u."""
    dom = _field_domain(u, dom)
    return (
        AlphaResponse(spec, dom, u, eps, mesh_n),
        Strategy.eps_optimal_beta(spec, dom, u, eps, mesh_n),
    )
