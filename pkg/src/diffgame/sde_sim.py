"""Euler-Maruyama simulation of the controlled diffusion with discounts,
exit detection, and control-adapted parameter processes.

Noise is counter-based: path ``i`` under master seed ``s`` draws from the
Philox stream keyed by (s, i), in blocks spaced 2^64 counter values apart, so
results are a pure function of (seed, path id) — independent of batch or
thread layout.

Exits: a step whose endpoint lands outside is bisected to the boundary (the
fraction theta refines both exit state and exit time).  Steps that stay
inside can still have crossed in between; by default a Brownian-bridge test
fires with probability exp(-2 d d' / (n'an * 2dt)) per face, which removes
the O(sqrt(dt)) late-detection bias that plain endpoint checks carry.  Set
``bridge_exit=False`` to measure that bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import Domain
from .errors import StepRejected, UsageError
from .game_model import GameSpec
from .strategies import AlphaResponse, ControlSignal, Strategy, alpha_batch_state

__all__ = [
    "ParamProcessRule",
    "StopRule",
    "LambdaRule",
    "PathRecord",
    "SimTasks",
    "SimResult",
    "simulate_path",
    "simulate_batch",
    "apply_param_rule",
    "payoff",
    "dpp_payoff",
    "default_t_cap",
]

NOISE_BLOCK = 512  # steps of noise drawn per (path, block) generator


# ---------------------------------------------------------------------------
# Parameter process rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamProcessRule:
    """Control-adapted parameter process.

    constant_base: p identically the base point (identity transform).
    time_change_rotation: constant (p', p'') with sigma -> sqrt(p') sigma p''
        and (b, c, f) -> p' (b, c, f); a random time change plus a rotation
        of the driving noise.
    state_feedback: sigma -> sqrt(r(x)) sigma Q(x), (b, c, f) -> r(x)(b, c, f).
    """

    kind: str
    p_scale: float = 1.0
    rotation: Optional[np.ndarray] = None
    r_fn: Optional[Callable] = None
    q_fn: Optional[Callable] = None

    @staticmethod
    def constant_base() -> "ParamProcessRule":
        return ParamProcessRule("constant_base")

    @staticmethod
    def time_change_rotation(p_scale: float, rotation=None) -> "ParamProcessRule":
        rot = None if rotation is None else np.asarray(rotation, dtype=float)
        return ParamProcessRule("time_change_rotation", p_scale=float(p_scale), rotation=rot)

    @staticmethod
    def state_feedback(r_fn: Callable, q_fn: Optional[Callable] = None) -> "ParamProcessRule":
        return ParamProcessRule("state_feedback", r_fn=r_fn, q_fn=q_fn)

    def validate(self, spec: GameSpec, sample_x=None) -> None:
        lo, hi = spec.delta1, 1.0 / spec.delta1
        if self.kind == "constant_base":
            return
        if self.kind == "time_change_rotation":
            if not lo - 1e-12 <= self.p_scale <= hi + 1e-12:
                raise UsageError(f"p' = {self.p_scale} outside [{lo}, {hi}]")
            if self.rotation is not None:
                q = self.rotation
                if q.shape != (spec.noise_dim, spec.noise_dim) or (
                    np.abs(q.T @ q - np.eye(spec.noise_dim)).max() > 1e-12
                ):
                    raise UsageError("rotation must be orthogonal of noise dimension")
            return
        if self.kind == "state_feedback":
            if self.r_fn is None:
                raise UsageError("state_feedback requires r_fn")
            if sample_x is not None:
                r = np.atleast_1d(self.r_fn(np.atleast_2d(sample_x)))
                if r.min() < lo - 1e-12 or r.max() > hi + 1e-12:
                    raise UsageError("r(x) leaves [delta1, 1/delta1] on samples")
                if self.q_fn is not None:
                    q = np.asarray(self.q_fn(np.atleast_2d(sample_x)))
                    qtq = np.einsum("nij,nik->njk", q, q)
                    if np.abs(qtq - np.eye(q.shape[-1])).max() > 1e-12:
                        raise UsageError("Q(x) not orthogonal on samples")
            return
        raise UsageError(f"unknown parameter rule kind {self.kind!r}")


def _transform_coeffs(prule: ParamProcessRule, x, sig, b, c, f):
    """Apply the rule's transform to base coefficients (vectorized)."""
    if prule.kind == "constant_base":
        r = np.ones(x.shape[0])
        return sig, b, c, f, r
    if prule.kind == "time_change_rotation":
        p = prule.p_scale
        sig_eff = np.sqrt(p) * sig
        if prule.rotation is not None:
            sig_eff = np.einsum("nij,jk->nik", sig_eff, prule.rotation)
        r = np.full(x.shape[0], p)
        return sig_eff, p * b, p * c, p * f, r
    r = np.atleast_1d(np.asarray(prule.r_fn(x), dtype=float))
    sig_eff = np.sqrt(r)[:, None, None] * sig
    if prule.q_fn is not None:
        q = np.asarray(prule.q_fn(x), dtype=float)
        sig_eff = np.einsum("nij,njk->nik", sig_eff, q)
    return sig_eff, r[:, None] * b, r * c, r * f, r


def apply_param_rule(spec: GameSpec, prule: ParamProcessRule, alpha: int, beta: int, x):
    """Effective (sigma, b, c, f) at grid indices under the parameter rule."""
    from .game_model import _as_batch

    ap = spec.control_point("alpha", alpha)
    bp = spec.control_point("beta", beta)
    pp = spec.controls.base_param
    xb, single = _as_batch(x, spec.dim)
    sig = np.asarray(spec.sigma(ap, bp, pp, xb), dtype=float)
    b = np.asarray(spec.drift_b(ap, bp, pp, xb), dtype=float)
    c = np.asarray(spec.cost_c(ap, bp, pp, xb), dtype=float)
    f = np.asarray(spec.running_f(ap, bp, pp, xb), dtype=float)
    sig, b, c, f, _ = _transform_coeffs(prule, xb, sig, b, c, f)
    if single:
        return sig[0], b[0], c[0], f[0]
    return sig, b, c, f


# ---------------------------------------------------------------------------
# Stopping and randomized-stopping rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StopRule:
    """Stopping time used inside the dynamic programming identity.

    Realized times are grid stopping times capped at the exit time.
    """

    kind: str  # zero | tau | fixed_time | exit_subdomain | phi_threshold
    time: float = 0.0
    subdomain: Optional[Domain] = None
    threshold: float = 0.0

    @staticmethod
    def zero() -> "StopRule":
        return StopRule("zero")

    @staticmethod
    def tau() -> "StopRule":
        return StopRule("tau")

    @staticmethod
    def fixed_time(t: float) -> "StopRule":
        if t < 0:
            raise UsageError("fixed time must be nonnegative")
        return StopRule("fixed_time", time=float(t))

    @staticmethod
    def exit_subdomain(sub: Domain) -> "StopRule":
        return StopRule("exit_subdomain", subdomain=sub)

    @staticmethod
    def phi_threshold(value: float) -> "StopRule":
        return StopRule("phi_threshold", threshold=float(value))


@dataclass(frozen=True)
class LambdaRule:
    """Nonnegative randomized-stopping intensity lambda(t, x)."""

    fn: Callable  # (t, x_batch) -> (n,)
    name: str = ""

    @staticmethod
    def constant(value: float, name: str = "") -> "LambdaRule":
        if value < 0:
            raise UsageError("lambda must be nonnegative")
        v = float(value)
        return LambdaRule(lambda t, x: np.full(x.shape[0], v), name or f"const({v})")

    @staticmethod
    def of_state(fn: Callable, name: str = "state") -> "LambdaRule":
        return LambdaRule(fn, name)

    def rates(self, t: float, x_batch: np.ndarray) -> np.ndarray:
        lam = np.asarray(self.fn(t, x_batch), dtype=float)
        if lam.min(initial=0.0) < 0:
            raise UsageError("lambda rule produced a negative rate")
        return lam


# ---------------------------------------------------------------------------
# Simulation tasks and results
# ---------------------------------------------------------------------------


@dataclass
class KappaTask:
    """Sample u(x_t)e^{-phi} + int f e^{-phi} -/+ slack * int e^{-phi} at checkpoints."""

    u: object
    slack: float
    checkpoints: Sequence[float]
    sign: float = -1.0  # -1: supermartingale certificate; +1: submartingale


@dataclass
class SimTasks:
    payoff: bool = True
    gamma_rule: Optional[StopRule] = None
    v_field: Optional[object] = None
    lambda_rules: tuple = ()
    kappa: Optional[KappaTask] = None
    occupation_h: Optional[Callable] = None  # x_batch -> (n,)
    tail_subdomain: Optional[Domain] = None  # accumulate |f|e^{-phi} after its exit


@dataclass
class SimResult:
    tau: np.ndarray
    exited: np.ndarray
    capped: np.ndarray
    exit_state: np.ndarray
    phi_end: np.ndarray
    pay: Optional[np.ndarray] = None
    dpp: Optional[np.ndarray] = None  # (n_lambda_rules, n_paths)
    gamma_time: Optional[np.ndarray] = None
    kappa_samples: Optional[np.ndarray] = None  # (n_paths, n_checkpoints)
    occupation: Optional[np.ndarray] = None
    tail_abs_f: Optional[np.ndarray] = None
    tail_exit_time: Optional[np.ndarray] = None

    @property
    def cap_fraction(self) -> float:
        return float(np.mean(self.capped))


@dataclass
class PathRecord:
    """One trajectory: states, controls, parameter factor, discounts, exit."""

    times: np.ndarray
    states: np.ndarray
    alpha_idx: np.ndarray
    beta_idx: np.ndarray
    param_r: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    step_f: np.ndarray
    step_dt: np.ndarray
    tau: float
    exit_state: np.ndarray
    exited: bool
    capped: bool
    seed: int
    path_id: int


def default_t_cap(dom: Domain, spec: GameSpec) -> float:
    """Cap so that non-exit probability is negligible: 50 diam^2 / (2 delta)."""
    return 50.0 * dom.diameter**2 / (2.0 * spec.delta)


def _noise_generator(seed: int, path_id: int, block: int):
    key = (int(seed) << 64) | int(path_id)
    return np.random.Generator(np.random.Philox(key=key, counter=int(block) << 64))


class _NoiseSource:
    """Per-path counter-based streams drawn block-wise.

    Reuses one Philox instance via state assignment, which is equivalent to
    constructing Philox(key=(seed << 64) | path, counter=block << 64) afresh
    but avoids per-path entropy and object setup.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bg = np.random.Philox(key=0)
        self._gen = np.random.Generator(self._bg)
        self._template = self._bg.state

    def draw_block(self, path_ids, block, n_steps, d1):
        n = path_ids.shape[0]
        normals = np.empty((n, n_steps, d1))
        uniforms = np.empty((n, n_steps))
        st = self._template
        counter = np.zeros(4, dtype=np.uint64)
        counter[1] = block
        key = np.zeros(2, dtype=np.uint64)
        key[1] = self.seed
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        st["uinteger"] = 0
        gen = self._gen
        bg = self._bg
        for i in range(n):
            key[0] = path_ids[i]
            st["state"]["counter"] = counter
            st["state"]["key"] = key
            bg.state = st
            normals[i] = gen.standard_normal((n_steps, d1))
            uniforms[i] = gen.random(n_steps)
        return normals, uniforms


def _draw_block(seed, path_ids, block, n_steps, d1):
    return _NoiseSource(seed).draw_block(path_ids, block, n_steps, d1)


def _effective_coeffs(spec, prule, a_idx, b_idx, x):
    """Vectorized per-path coefficients under the parameter rule."""
    grid = spec.controls
    pp = grid.base_param
    if spec.vectorized_controls:
        ap = grid.alphas[a_idx]
        bp = grid.betas[b_idx]
        sig = np.asarray(spec.sigma(ap, bp, pp, x), dtype=float)
        b = np.asarray(spec.drift_b(ap, bp, pp, x), dtype=float)
        c = np.asarray(spec.cost_c(ap, bp, pp, x), dtype=float)
        f = np.asarray(spec.running_f(ap, bp, pp, x), dtype=float)
    else:
        n = x.shape[0]
        sig = np.empty((n, spec.dim, spec.noise_dim))
        b = np.empty((n, spec.dim))
        c = np.empty(n)
        f = np.empty(n)
        combos = a_idx * grid.n_beta + b_idx
        for combo in np.unique(combos):
            ia, ib = divmod(int(combo), grid.n_beta)
            m = combos == combo
            sig[m] = spec.sigma(grid.alphas[ia], grid.betas[ib], pp, x[m])
            b[m] = spec.drift_b(grid.alphas[ia], grid.betas[ib], pp, x[m])
            c[m] = spec.cost_c(grid.alphas[ia], grid.betas[ib], pp, x[m])
            f[m] = spec.running_f(grid.alphas[ia], grid.betas[ib], pp, x[m])
    return _transform_coeffs(prule, x, sig, b, c, f)


def _segment_crossing(dom: Domain, x_in: np.ndarray, x_out: np.ndarray):
    """Vectorized bisection of boundary crossings on segments (in -> out)."""
    lo = np.zeros(x_in.shape[0])
    hi = np.ones(x_in.shape[0])
    for _ in range(45):  # 2^-45 of the segment length < 1e-12
        mid = 0.5 * (lo + hi)
        pts = x_in + mid[:, None] * (x_out - x_in)
        inside = dom.signed_distance(pts) < 0.0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return x_in + hi[:, None] * (x_out - x_in), hi


class _Recorder:
    """Trajectory recording for single-path simulation."""

    def __init__(self, x0):
        self.times = [0.0]
        self.states = [np.array(x0, dtype=float)]
        self.alpha = []
        self.beta = []
        self.param_r = []
        self.phi = [0.0]
        self.psi = [0.0]
        self.step_f = []
        self.step_dt = []

    def step(self, t_next, x, a, b, r, phi, psi, f, dt_eff):
        self.times.append(t_next)
        self.states.append(np.array(x, dtype=float))
        self.alpha.append(a)
        self.beta.append(b)
        self.param_r.append(r)
        self.phi.append(phi)
        self.psi.append(psi)
        self.step_f.append(f)
        self.step_dt.append(dt_eff)


def simulate_batch(
    spec: GameSpec,
    dom: Domain,
    x0,
    alpha_source,
    beta_strategy: Strategy,
    prule: Optional[ParamProcessRule] = None,
    lambda_rule: Optional[LambdaRule] = None,
    dt: float = 1e-4,
    t_cap: Optional[float] = None,
    seed: int = 0,
    path_ids=None,
    n_paths: Optional[int] = None,
    tasks: Optional[SimTasks] = None,
    bridge_exit: bool = True,
    recorder: Optional[_Recorder] = None,
) -> SimResult:
    """Run a lockstep batch of paths from x0; see module docstring.

    ``lambda_rule`` feeds the recorded psi of single-path records; the DPP
    task carries its own list of rules.
    """
    if dt <= 0:
        raise UsageError("dt must be positive")
    prule = prule or ParamProcessRule.constant_base()
    prule.validate(spec)
    tasks = tasks or SimTasks()
    if path_ids is None:
        path_ids = np.arange(n_paths if n_paths is not None else 1, dtype=np.int64)
    else:
        path_ids = np.asarray(path_ids, dtype=np.int64)
    n = path_ids.shape[0]
    d, d1 = spec.dim, spec.noise_dim
    x0 = np.asarray(x0, dtype=float)
    if t_cap is None:
        t_cap = default_t_cap(dom, spec)

    lam_rules = list(tasks.lambda_rules)
    if lambda_rule is not None and not lam_rules:
        lam_rules = [lambda_rule]
    L = len(lam_rules)
    want_dpp = tasks.gamma_rule is not None
    if want_dpp and tasks.v_field is None:
        raise UsageError("dpp task requires a value field")
    if want_dpp and L == 0:
        lam_rules = [LambdaRule.constant(0.0)]
        L = 1
    needs_tau = bool(
        tasks.payoff or tasks.kappa or tasks.occupation_h or tasks.tail_subdomain
    )

    # global (per original path) outputs
    tau = np.full(n, t_cap)
    exited = np.zeros(n, dtype=bool)
    capped = np.zeros(n, dtype=bool)
    exit_state = np.tile(x0, (n, 1))
    phi_end = np.zeros(n)
    pay = np.zeros(n) if tasks.payoff else None
    occupation = np.zeros(n) if tasks.occupation_h else None
    tail_abs_f = np.zeros(n) if tasks.tail_subdomain is not None else None
    tail_exit_time = np.full(n, t_cap) if tasks.tail_subdomain is not None else None
    dpp_vals = np.zeros((L, n)) if want_dpp else None
    gamma_time = np.full(n, np.nan) if want_dpp else None
    ckpts = np.asarray(tasks.kappa.checkpoints, dtype=float) if tasks.kappa else None
    kappa_samples = np.full((n, len(ckpts)), np.nan) if tasks.kappa else None

    # active-path working state
    act = np.arange(n)  # indices into the output arrays
    X = np.tile(x0, (n, 1))
    phi = np.zeros(n)
    psi = np.zeros((L, n))
    pay_int = np.zeros(n)
    disc_int = np.zeros(n)  # int e^{-phi} ds, for the kappa slack
    gamma_open = np.ones(n, dtype=bool)
    in_sub = None
    if tasks.tail_subdomain is not None:
        in_sub = np.ones(n, dtype=bool)
    ckpt_next = 0

    alpha_state = alpha_batch_state(alpha_source, n)
    beta_state = beta_strategy.batch_state(n)

    # a start outside the domain exits immediately with tau = 0
    sd0 = dom.signed_distance(np.atleast_2d(x0))[0]
    if sd0 >= 0.0:
        exited[:] = True
        tau[:] = 0.0
        if tasks.payoff:
            pay[:] = np.atleast_1d(spec.terminal_g(np.atleast_2d(x0)))[0]
        if want_dpp:
            gamma_time[:] = 0.0
            v0 = tasks.v_field.value_or_boundary(np.atleast_2d(x0))[0]
            dpp_vals[:, :] = v0
        if tasks.kappa is not None:
            u0 = tasks.kappa.u.value(np.atleast_2d(x0))
            kappa_samples[:, :] = np.atleast_1d(u0)[0]
        return SimResult(
            tau, exited, capped, exit_state, phi_end, pay, dpp_vals, gamma_time,
            kappa_samples, occupation, tail_abs_f, tail_exit_time,
        )

    sqrt_dt = np.sqrt(dt)
    n_steps_cap = int(np.ceil(t_cap / dt))
    normals = uniforms = None
    block = -1
    noise = _NoiseSource(seed)
    g_fn = spec.terminal_g

    def kappa_value(rows, states_rows):
        kt = tasks.kappa
        u_vals = np.atleast_1d(kt.u.value(states_rows))
        return (
            u_vals * np.exp(-phi[rows])
            + pay_int[rows]
            + kt.sign * kt.slack * disc_int[rows]
        )

    # layout: block_rows maps positions in the noise/strategy arrays to
    # output indices; alive marks positions still being simulated.
    block_rows = act
    alive = np.ones(block_rows.size, dtype=bool)

    for k in range(n_steps_cap + 1):
        if not np.any(alive):
            break
        t = k * dt
        pos = np.flatnonzero(alive)
        rows = block_rows[pos]

        # --- checkpoint sampling (loop-top: accumulators exact at t) ---
        if ckpts is not None:
            while ckpt_next < len(ckpts) and t >= ckpts[ckpt_next] - 1e-12:
                kappa_samples[rows, ckpt_next] = kappa_value(rows, X[rows])
                ckpt_next += 1

        # --- gamma triggers at grid times ---
        if want_dpp:
            opened = gamma_open[rows]
            trig = np.zeros(rows.size, dtype=bool)
            gr = tasks.gamma_rule
            if gr.kind == "zero":
                trig[:] = opened
            elif gr.kind == "fixed_time":
                if t >= gr.time - 1e-12:
                    trig[:] = opened
            elif gr.kind == "exit_subdomain":
                trig = opened & (gr.subdomain.signed_distance(X[rows]) >= 0.0)
            elif gr.kind == "phi_threshold":
                trig = opened & (phi[rows] >= gr.threshold)
            if np.any(trig):
                tr = rows[trig]
                v = tasks.v_field.value_or_boundary(X[tr])
                for j in range(L):
                    dpp_vals[j, tr] += v * np.exp(-phi[tr] - psi[j, tr])
                gamma_time[tr] = t
                gamma_open[tr] = False
                if not needs_tau:
                    alive[pos[trig]] = False
                    pos = pos[~trig]
                    rows = block_rows[pos]
                    if rows.size == 0:
                        break

        if t >= t_cap - 1e-12 or k == n_steps_cap:
            capped[rows] = True
            tau[rows] = t
            exit_state[rows] = X[rows]
            phi_end[rows] = phi[rows]
            if want_dpp and np.any(gamma_open[rows]):
                op = rows[gamma_open[rows]]
                v = tasks.v_field.value_or_boundary(X[op])
                for j in range(L):
                    dpp_vals[j, op] += v * np.exp(-phi[op] - psi[j, op])
                gamma_time[op] = t
                gamma_open[op] = False
            if ckpts is not None and ckpt_next < len(ckpts):
                kv = kappa_value(rows, X[rows])
                for j in range(ckpt_next, len(ckpts)):
                    kappa_samples[rows, j] = kv
            break

        # --- noise block (drawn for the paths alive at block start) ---
        jb, js = divmod(k, NOISE_BLOCK)
        if jb != block:
            block = jb
            alpha_state.compact(alive)
            beta_state.compact(alive)
            block_rows = rows
            alive = np.ones(block_rows.size, dtype=bool)
            pos = np.arange(block_rows.size)
            n_draw = min(NOISE_BLOCK, n_steps_cap - jb * NOISE_BLOCK + 1)
            normals, uniforms = noise.draw_block(path_ids[block_rows], jb, n_draw, d1)
        m = rows.size

        # --- controls and coefficients ---
        a_idx = alpha_state.select(t, X[rows], pos)
        b_idx = beta_state.select(t, X[rows], a_idx, pos)
        sig, b, c, f, r_par = _effective_coeffs(spec, prule, a_idx, b_idx, X[rows])
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(sig))):
            raise StepRejected("non-finite drift or diffusion during simulation")

        dw = normals[pos, js, :] * sqrt_dt
        X_next = X[rows] + np.einsum("nij,nj->ni", sig, dw) + b * dt

        # --- exit detection ---
        dist_nxt, _ = dom.face_distances(X_next, want_normals=False)
        cross = dist_nxt.min(axis=1) <= 0.0
        any_cross = bool(cross.any())
        t_exit = np.full(m, np.inf)
        exit_pts = np.zeros((m, d)) if any_cross or bridge_exit else None
        if any_cross:
            pts, theta = dom.segment_exit(X[rows][cross], X_next[cross])
            exit_pts[cross] = pts
            t_exit[cross] = t + theta * dt
        if bridge_exit:
            stay = ~cross
            if np.any(stay):
                dist_now, norm_now = dom.face_distances(X[rows][stay])
                # squared normal diffusion per face: n' sigma sigma' n
                sig_s = sig[stay]
                n_faces = dist_now.shape[1]
                p_hit = np.empty((int(stay.sum()), n_faces))
                for fidx in range(n_faces):
                    nv = norm_now[fidx]
                    sn = np.einsum("ni,nij->nj", nv, sig_s)
                    s2 = np.einsum("nj,nj->n", sn, sn)
                    with np.errstate(divide="ignore", over="ignore"):
                        expo = -2.0 * dist_now[:, fidx] * dist_nxt[stay, fidx] / (s2 * dt)
                    p_hit[:, fidx] = np.where(s2 > 0, np.exp(expo), 0.0)
                p_tot = np.minimum(p_hit.sum(axis=1), 1.0)
                hit = uniforms[pos[stay], js] < p_tot
                if np.any(hit):
                    stay_idx = np.flatnonzero(stay)[hit]
                    face = np.argmax(p_hit[hit], axis=1)
                    mid = 0.5 * (X[rows][stay_idx] + X_next[stay_idx])
                    exit_pts[stay_idx] = _face_projection(dom, mid, face)
                    t_exit[stay_idx] = t + 0.5 * dt
                    cross[stay_idx] = True
                    any_cross = True

        dt_eff = np.where(cross, np.minimum(t_exit - t, dt), dt) if any_cross else dt

        # --- accumulate (left endpoint at time t) ---
        disc = np.exp(-phi[rows])
        pay_int[rows] += f * disc * dt_eff
        disc_int[rows] += disc * dt_eff
        if occupation is not None:
            occupation[rows] += np.abs(np.asarray(tasks.occupation_h(X[rows]))) * dt_eff
        if tail_abs_f is not None:
            sub_now = tasks.tail_subdomain.signed_distance(X[rows]) < 0.0
            newly_out = in_sub[rows] & ~sub_now
            if np.any(newly_out):
                tail_exit_time[rows[newly_out]] = t
                in_sub[rows[newly_out]] = False
            out_rows = ~in_sub[rows]
            if np.any(out_rows):
                tail_abs_f[rows[out_rows]] += (np.abs(f) * disc * dt_eff)[out_rows]
        if L:
            opened = gamma_open[rows] if want_dpp else None
            any_open = want_dpp and bool(np.any(opened))
            vx = (
                tasks.v_field.value_or_boundary(X[rows][opened]) if any_open else None
            )
            for j in range(L):
                lam = lam_rules[j].rates(t, X[rows])
                if any_open:
                    wdpp = np.exp(-phi[rows] - psi[j, rows]) * dt_eff
                    dpp_vals[j, rows[opened]] += (
                        (f[opened] + lam[opened] * vx) * wdpp[opened]
                    )
                psi[j, rows] += lam * dt_eff

        phi[rows] += c * dt_eff

        if recorder is not None:
            de = float(np.asarray(dt_eff).reshape(-1)[0]) if np.ndim(dt_eff) else float(dt_eff)
            xn = exit_pts[0] if (any_cross and cross[0]) else X_next[0]
            recorder.step(
                float(t + de), xn, int(a_idx[0]), int(b_idx[0]),
                float(r_par[0]), float(phi[rows[0]]),
                float(psi[0, rows[0]]) if L else 0.0,
                float(f[0]), de,
            )

        # --- settle exits ---
        if any_cross:
            er = rows[cross]
            exited[er] = True
            tau[er] = t_exit[cross]
            exit_state[er] = exit_pts[cross]
            phi_end[er] = phi[er]
            if want_dpp:
                op = cross & gamma_open[rows]
                if np.any(op):
                    orows = rows[op]
                    v = tasks.v_field.value_or_boundary(exit_state[orows])
                    for j in range(L):
                        dpp_vals[j, orows] += v * np.exp(-phi[orows] - psi[j, orows])
                    gamma_time[orows] = tau[orows]
                    gamma_open[orows] = False
            if ckpts is not None:
                kv = kappa_value(er, exit_state[er])
                for j in range(ckpt_next, len(ckpts)):
                    kappa_samples[er, j] = kv
            alive[pos[cross]] = False
            X[rows[~cross]] = X_next[~cross]
        else:
            X[rows] = X_next

    # finalize payoff with the terminal term
    if tasks.payoff:
        pay[:] = pay_int
        if np.any(exited):
            gx = np.atleast_1d(g_fn(exit_state[exited]))
            pay[exited] += gx * np.exp(-phi_end[exited])
    return SimResult(
        tau, exited, capped, exit_state, phi_end, pay, dpp_vals, gamma_time,
        kappa_samples, occupation, tail_abs_f, tail_exit_time,
    )


def _face_projection(dom: Domain, x: np.ndarray, face: np.ndarray) -> np.ndarray:
    """Project points onto the given face index (layout of face_distances)."""
    if dom.kind == "ball":
        return dom.project_to_boundary(x)
    d = x.shape[1]
    out = np.clip(x, dom.lo, dom.hi)
    axis = face % d
    rows = np.arange(x.shape[0])
    out[rows, axis] = np.where(face < d, dom.lo[axis], dom.hi[axis])
    return out


def simulate_path(
    spec: GameSpec,
    dom: Domain,
    x0,
    alpha_ctrl,
    strat: Strategy,
    prule: Optional[ParamProcessRule] = None,
    lambda_rule: Optional[LambdaRule] = None,
    dt: float = 1e-3,
    t_cap: Optional[float] = None,
    seed: int = 0,
    path_id: int = 0,
) -> PathRecord:
    """Simulate one trajectory and return its full record."""
    x0 = np.asarray(x0, dtype=float)
    if dom.signed_distance(x0) >= 0.0:
        return PathRecord(
            times=np.array([0.0]),
            states=x0[None, :].copy(),
            alpha_idx=np.empty(0, dtype=int),
            beta_idx=np.empty(0, dtype=int),
            param_r=np.empty(0),
            phi=np.array([0.0]),
            psi=np.array([0.0]),
            step_f=np.empty(0),
            step_dt=np.empty(0),
            tau=0.0,
            exit_state=x0.copy(),
            exited=True,
            capped=False,
            seed=seed,
            path_id=path_id,
        )
    rec = _Recorder(x0)
    res = simulate_batch(
        spec,
        dom,
        x0,
        alpha_ctrl,
        strat.fresh() if strat.kind == "eps_optimal_beta" else strat,
        prule=prule,
        lambda_rule=lambda_rule,
        dt=dt,
        t_cap=t_cap,
        seed=seed,
        path_ids=np.array([path_id]),
        tasks=SimTasks(payoff=False),
        recorder=rec,
    )
    return PathRecord(
        times=np.array(rec.times),
        states=np.array(rec.states),
        alpha_idx=np.array(rec.alpha, dtype=int),
        beta_idx=np.array(rec.beta, dtype=int),
        param_r=np.array(rec.param_r),
        phi=np.array(rec.phi),
        psi=np.array(rec.psi),
        step_f=np.array(rec.step_f),
        step_dt=np.array(rec.step_dt),
        tau=float(res.tau[0]),
        exit_state=res.exit_state[0].copy(),
        exited=bool(res.exited[0]),
        capped=bool(res.capped[0]),
        seed=seed,
        path_id=path_id,
    )


def payoff(spec: GameSpec, path: PathRecord) -> float:
    """int_0^tau f e^{-phi} dt + [exited] g(exit) e^{-phi_tau}."""
    disc = np.exp(-path.phi[:-1])
    total = float(np.sum(path.step_f * disc * path.step_dt))
    if path.exited:
        g = float(np.atleast_1d(spec.terminal_g(path.exit_state[None, :]))[0])
        total += g * np.exp(-path.phi[-1])
    return total


def _gamma_index(path: PathRecord, rule: StopRule) -> int:
    """Index into path.times of the realized stopping time (capped at exit)."""
    last = len(path.times) - 1
    if rule.kind == "zero":
        return 0
    if rule.kind == "tau":
        return last
    if rule.kind == "fixed_time":
        hits = np.flatnonzero(path.times >= rule.time - 1e-12)
        return int(hits[0]) if hits.size else last
    if rule.kind == "exit_subdomain":
        outside = np.flatnonzero(rule.subdomain.signed_distance(path.states) >= 0.0)
        return int(outside[0]) if outside.size else last
    if rule.kind == "phi_threshold":
        hits = np.flatnonzero(path.phi >= rule.threshold)
        return int(hits[0]) if hits.size else last
    raise UsageError(f"unknown stop rule {rule.kind!r}")


def dpp_payoff(spec: GameSpec, path: PathRecord, gamma_rule: StopRule,
               lambda_rule: Optional[LambdaRule], v) -> float:
    """v(x_gamma) e^{-phi-psi} + int_0^gamma [f + lambda v] e^{-phi-psi} dt.

    The realized gamma is the rule's grid stopping time capped at the exit
    time; v is read by interpolation with v = g outside the domain.
    """
    gi = _gamma_index(path, gamma_rule)
    lam_rule = lambda_rule or LambdaRule.constant(0.0)
    total = 0.0
    psi = 0.0
    for j in range(gi):
        t = path.times[j]
        x = path.states[j]
        lam = float(lam_rule.rates(t, x[None, :])[0])
        vx = float(v.value_or_boundary(x[None, :])[0])
        w = np.exp(-path.phi[j] - psi)
        total += (path.step_f[j] + lam * vx) * w * path.step_dt[j]
        psi += lam * path.step_dt[j]
    x_g = path.states[gi]
    total += float(v.value_or_boundary(x_g[None, :])[0]) * np.exp(-path.phi[gi] - psi)
    return float(total)
