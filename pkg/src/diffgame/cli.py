"""Command-line front end: config ingestion and the solve / verify / simulate
pipelines.

Exit codes: 0 success, 1 numerical failure (solver or failed checks),
2 configuration or usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import game_model
from .domain import Domain, SubdomainFamily
from .errors import DiffGameError, NoConvergence, UsageError
from .fd_solver import build_lattice, policy_iteration_solve, write_field_csv
from .game_model import ControlGrid, GameInstance, GameSpec, builtin_game
from .sde_sim import LambdaRule, ParamProcessRule, StopRule, simulate_path
from .strategies import strategy_pair_saddle
from . import verify as V

__all__ = ["RunConfig", "cmd_solve", "cmd_verify", "cmd_simulate", "main"]

DEFAULT_CHECKS = [
    "value",
    "dpp:gamma=zero",
    "dpp:gamma=tau",
    "dpp:gamma=subdomain",
    "dpp:gamma=fixed",
    "supermartingale",
    "submartingale",
    "moments",
    "localization",
    "p_invariance",
]

EXTRA_CHECKS = [
    "ellipticity",
    "factorization",
    "bounds",
    "occupation",
    "exhaustion",
    "deviations",
]


def _schema(name: str) -> dict:
    with resources.files("diffgame.schemas").joinpath(name).open() as fh:
        return json.load(fh)


@dataclass
class RunConfig:
    game: GameInstance
    game_raw: object
    x0: np.ndarray
    h: float = 1.0 / 256
    dt: float = 1e-4
    n_paths: int = 10000
    n_dump_paths: int = 10
    seed: int = 0
    eps: float = 1e-4
    mesh_n: int = 32
    t_cap: Optional[float] = None
    threads: int = 1
    out_dir: Path = Path(".")
    bridge_exit: bool = True
    checks: list = field(default_factory=lambda: list(DEFAULT_CHECKS))
    solver_tol: float = 1e-8
    solver_max_outer: int = 200
    cap_allowance: Optional[float] = None
    dt_bias_allowance: Optional[float] = None
    exhaustion_tol: float = 5e-3


def _domain_from_json(doc: dict) -> Domain:
    kind = doc.get("kind")
    if kind == "interval":
        return Domain.interval(doc["a"], doc["b"])
    if kind == "box":
        return Domain.box(doc["lo"], doc["hi"])
    if kind == "ball":
        return Domain.ball(doc["center"], doc["radius"])
    raise UsageError(f"unknown domain kind {kind!r}")


def _coeff_from_json(doc: dict, dim: int, noise_dim: int, role: str):
    """Pointwise coefficient catalogue for inline JSON games."""
    kind = doc.get("kind", "zero") if doc else "zero"
    if role == "sigma":
        if kind == "constant":
            return game_model._const_sigma(np.asarray(doc["matrix"], dtype=float))
        if kind == "isotropic":
            return game_model._const_sigma(float(doc["value"]) * np.eye(dim, noise_dim))
        raise UsageError(f"unknown sigma kind {kind!r}")
    if role == "drift":
        if kind == "zero":
            return lambda a, b, p, x: np.zeros((x.shape[0], dim))
        if kind == "constant":
            vec = np.asarray(doc["vector"], dtype=float)
            return lambda a, b, p, x: np.broadcast_to(vec, (x.shape[0], dim)).copy()
        if kind == "control_difference":
            s = float(doc.get("scale", 1.0))

            def drift(a, b, p, x):
                diff = s * (np.asarray(a)[..., 0] - np.asarray(b)[..., 0])
                out = np.zeros((x.shape[0], dim))
                out[:, 0] = diff
                return out

            return drift
        raise UsageError(f"unknown drift kind {kind!r}")
    # scalar roles: cost / running / terminal
    if kind == "zero":
        return game_model._scalar_field(0.0)
    if kind == "constant":
        return game_model._scalar_field(float(doc["value"]))
    raise UsageError(f"unknown {role} kind {kind!r}")


def _game_from_json(doc: dict) -> GameInstance:
    dom = _domain_from_json(doc["domain"])
    dim = int(doc["dim"])
    noise_dim = int(doc["noise_dim"])
    controls = ControlGrid(
        alphas=np.asarray(doc["alphas"], dtype=float),
        betas=np.asarray(doc["betas"], dtype=float),
        params=np.asarray(doc.get("params", [[1.0]]), dtype=float),
        base_param_index=int(doc.get("base_param_index", 0)),
    )
    sigma = _coeff_from_json(doc.get("sigma", {"kind": "isotropic", "value": 1.0}),
                             dim, noise_dim, "sigma")
    drift = _coeff_from_json(doc.get("drift", {"kind": "zero"}), dim, noise_dim, "drift")
    cost = _coeff_from_json(doc.get("cost", {"kind": "zero"}), dim, noise_dim, "cost")
    running = _coeff_from_json(doc.get("running", {"kind": "zero"}), dim, noise_dim, "running")
    terminal_doc = doc.get("terminal", {"kind": "zero"})
    tval = float(terminal_doc.get("value", 0.0))
    factor = game_model._scalar_field(1.0)
    if doc.get("param_scaling"):
        base = controls.base_param[0]
        if base != 1.0:
            raise UsageError("param_scaling requires the base parameter p' = 1")

        def pfac(p):
            return np.asarray(p)[..., 0]

        sigma_base, drift_base, cost_base, running_base = sigma, drift, cost, running
        sigma = lambda a, b, p, x: np.sqrt(pfac(p)) * sigma_base(a, b, p, x)
        drift = lambda a, b, p, x: np.atleast_1d(pfac(p))[..., None] * drift_base(a, b, p, x)
        cost = lambda a, b, p, x: pfac(p) * cost_base(a, b, p, x)
        running = lambda a, b, p, x: pfac(p) * running_base(a, b, p, x)
        factor = lambda a, b, p, x: np.broadcast_to(pfac(p), (x.shape[0],)).astype(float).copy()
    spec = GameSpec(
        dim=dim,
        noise_dim=noise_dim,
        sigma=sigma,
        drift_b=drift,
        cost_c=cost,
        running_f=running,
        terminal_g=lambda x: np.full(np.atleast_2d(x).shape[0], tval),
        factor_r=factor,
        delta=float(doc.get("delta", 0.5)),
        delta1=float(doc.get("delta1", 0.5)),
        k0=float(doc.get("k0", 10.0)),
        controls=controls,
        name=str(doc.get("name", "inline")),
        vectorized_controls=True,
    )
    return GameInstance(spec, dom)


def load_config(path, overrides=None) -> RunConfig:
    """Parse and validate a JSON run configuration."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(
            f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    try:
        jsonschema.validate(doc, _schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        raise UsageError(f"config does not match schema: {exc.message}") from exc
    for key, val in (overrides or {}).items():
        if val is not None:
            doc[key] = val
    game_doc = doc["game"]
    if isinstance(game_doc, str):
        inst = builtin_game(game_doc)
    elif "builtin" in game_doc:
        inst = builtin_game(game_doc["builtin"], **game_doc.get("options", {}))
    else:
        inst = _game_from_json(game_doc)
    lo, hi = inst.domain.bounding_box()
    x0 = np.asarray(doc.get("x0", 0.5 * (lo + hi)), dtype=float)
    sol = doc.get("solver", {})
    tol = doc.get("tolerances", {})
    return RunConfig(
        game=inst,
        game_raw=game_doc,
        x0=x0,
        h=float(doc.get("h", 1.0 / 256)),
        dt=float(doc.get("dt", 1e-4)),
        n_paths=int(doc.get("n_paths", 10000)),
        n_dump_paths=int(doc.get("n_dump_paths", 10)),
        seed=int(doc.get("seed", 0)),
        eps=float(doc.get("eps", 1e-4)),
        mesh_n=int(doc.get("mesh_n", 32)),
        t_cap=doc.get("t_cap"),
        threads=int(doc.get("threads", 1)),
        out_dir=Path(doc.get("out_dir", ".")),
        bridge_exit=bool(doc.get("bridge_exit", True)),
        checks=list(doc.get("checks", DEFAULT_CHECKS)),
        solver_tol=float(sol.get("tol", 1e-8)),
        solver_max_outer=int(sol.get("max_outer", 200)),
        cap_allowance=tol.get("cap_allowance"),
        dt_bias_allowance=tol.get("dt_bias_allowance"),
        exhaustion_tol=float(tol.get("exhaustion_tol", 5e-3)),
    )


def _write_json(path: Path, doc: dict, schema_name: Optional[str] = None):
    if schema_name:
        jsonschema.validate(doc, _schema(schema_name))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_solve(cfg: RunConfig) -> int:
    """Solve the Isaacs problem; write value_field.csv and solve_report.json."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    inst = cfg.game
    lattice = build_lattice(inst.domain, cfg.h)
    try:
        u, rep = policy_iteration_solve(
            inst.spec, lattice, inst.spec.terminal_g,
            tol=cfg.solver_tol, max_outer=cfg.solver_max_outer,
        )
        code = 0
    except NoConvergence as exc:
        u, code = exc.best, 1
        rep = None
    write_field_csv(u, cfg.out_dir / "value_field.csv")
    doc = rep.to_dict() if rep else {"converged": False, "residual": float("nan")}
    doc["game"] = inst.spec.name
    doc["u_at_x0"] = float(u.value(np.atleast_2d(cfg.x0))[0])
    _write_json(cfg.out_dir / "solve_report.json", doc)
    return code


def _lambda_rules_for(dom: Domain):
    rules = [LambdaRule.constant(0.0, "lambda=0"), LambdaRule.constant(1.0, "lambda=1")]
    if dom.kind == "interval":
        a, b = dom.lo[0], dom.hi[0]
        width = b - a

        def bump(t, x):
            z = (x[:, 0] - a) / width
            return 4.0 * z * (1.0 - z)

        rules.append(LambdaRule.of_state(bump, "lambda=bump"))
    return rules


def _run_check(name: str, ctx: dict) -> list:
    """Run one named check; returns a list of CheckReport."""
    cfg: RunConfig = ctx["cfg"]
    inst = cfg.game
    spec, dom = inst.spec, inst.domain
    if name == "ellipticity":
        r = game_model.check_ellipticity(spec, ctx["samples"])
        return [V.CheckReport("ellipticity", r.min_quotient, 0.0, spec.delta,
                              r.passed, 0, cfg.dt, cfg.seed)]
    if name == "factorization":
        r = game_model.check_factorization(spec, ctx["samples"])
        return [V.CheckReport("factorization", r.max_rel_defect, 0.0, 1e-12,
                              r.passed, 0, cfg.dt, cfg.seed)]
    if name == "bounds":
        r = game_model.check_bounds(spec, ctx["samples"])
        return [V.CheckReport("bounds", r.max_sigma_norm, 0.0, spec.k0,
                              r.passed, 0, cfg.dt, cfg.seed)]
    if name == "exhaustion":
        rho = [cfg.game.domain.diameter * (2.0 ** -(n + 2)) for n in range(2, 7)]
        fam = SubdomainFamily(dom, tuple(rho))
        return [V.exhaustion_check(spec, dom, fam, spec.terminal_g, cfg.h,
                                   cfg.exhaustion_tol, solver_tol=cfg.solver_tol)]
    # remaining checks need the solved field and the saddle pair
    u, pair = ctx["u"], ctx["pair"]
    common = dict(prule=None, dt=cfg.dt, n_paths=cfg.n_paths, seed=cfg.seed,
                  t_cap=cfg.t_cap, bridge_exit=cfg.bridge_exit, threads=cfg.threads)
    if name == "value":
        est = V.mc_value(spec, dom, cfg.x0, pair, **common)
        ref = float(u.value(np.atleast_2d(cfg.x0))[0])
        allowance = 2.0 * cfg.dt if cfg.dt_bias_allowance is None else cfg.dt_bias_allowance
        bound = 3.0 * est.stderr + allowance
        ok = abs(est.mean - ref) <= bound and V._cap_gate(True, est.cap_fraction, cfg.cap_allowance)
        return [V.CheckReport("value", est.mean - ref, est.stderr, bound, ok,
                              est.n_paths, cfg.dt, cfg.seed,
                              {"mc_mean": est.mean, "solved": ref})]
    if name.startswith("dpp:gamma="):
        kind = name.split("=", 1)[1]
        if kind == "zero":
            rule = StopRule.zero()
        elif kind == "tau":
            rule = StopRule.tau()
        elif kind == "subdomain":
            rule = StopRule.exit_subdomain(dom.shrink(dom.diameter / 4.0))
        elif kind == "fixed":
            rule = StopRule.fixed_time(0.05)
        else:
            raise UsageError(f"unknown dpp gamma rule {kind!r}")
        lam_rules = _lambda_rules_for(dom)
        ests = V.dpp_residual_multi(spec, dom, cfg.x0, u, rule, lam_rules, pair, **common)
        out = []
        for lam, est in zip(lam_rules, ests):
            bound = 3.0 * est.stderr + (0.0 if kind in ("zero",) else 2.0 * cfg.dt)
            ok = abs(est.mean) <= bound
            ok = V._cap_gate(ok, est.cap_fraction, cfg.cap_allowance)
            out.append(V.CheckReport(f"{name},{lam.name}", est.mean, est.stderr,
                                     bound, ok, est.n_paths, cfg.dt, cfg.seed))
        return out
    if name in ("supermartingale", "submartingale"):
        sign = -1.0 if name == "supermartingale" else 1.0
        horizon = max(cfg.dt * 64, dom.diameter**2 / 8.0)
        cks = [horizon * f for f in (0.125, 0.25, 0.5, 1.0)]
        alpha_src = ctx["const_alpha"] if name == "supermartingale" else pair[0]
        beta_src = pair[1] if name == "supermartingale" else ctx["const_beta"]
        samples = V.sample_kappa(spec, dom, cfg.x0, u, alpha_src, beta_src,
                                 cfg.eps, cks, sign=sign, **common)
        fn = V.supermartingale_check if name == "supermartingale" else V.submartingale_check
        return [fn(samples, cks, name=name, dt=cfg.dt, seed=cfg.seed)]
    if name == "moments":
        return [V.moment_check(spec, dom, cfg.x0, pair, max_power=2,
                               cap_allowance=cfg.cap_allowance, **common)]
    if name == "occupation":
        h = lambda x: np.ones(x.shape[0])
        return [V.occupation_bound_check(spec, dom, cfg.x0, h, pair, max_power=2,
                                         cap_allowance=cfg.cap_allowance, **common)]
    if name == "localization":
        rho = [dom.diameter * (2.0 ** -(n + 2)) for n in range(2, 7)]
        fam = SubdomainFamily(dom, tuple(rho))
        return [V.localization_check(spec, dom, fam, cfg.x0, pair,
                                     cap_allowance=cfg.cap_allowance, **common)]
    if name == "p_invariance":
        d1 = spec.noise_dim
        rot = -np.eye(d1) if d1 == 1 else _plane_rotation(d1, np.pi / 2)
        rules = [
            ParamProcessRule.constant_base(),
            ParamProcessRule.time_change_rotation(1.0, rot),
        ]
        if spec.delta1 < 1.0 or True:
            p_hi = min(2.0, 1.0 / spec.delta1)
            rules.append(ParamProcessRule.time_change_rotation(p_hi))
        return [V.p_invariance_check(spec, dom, cfg.x0, pair, rules,
                                     dt=cfg.dt, n_paths=cfg.n_paths, seed=cfg.seed,
                                     dt_bias_allowance=cfg.dt_bias_allowance,
                                     t_cap=cfg.t_cap, bridge_exit=cfg.bridge_exit,
                                     threads=cfg.threads,
                                     cap_allowance=cfg.cap_allowance)]
    if name == "deviations":
        return [V.deviation_check(spec, dom, cfg.x0, u, cfg.eps, cfg.mesh_n,
                                  cap_allowance=cfg.cap_allowance, **common)]
    raise UsageError(f"unknown check name {name!r}")


def _plane_rotation(d: int, angle: float) -> np.ndarray:
    q = np.eye(d)
    q[0, 0] = q[1, 1] = np.cos(angle)
    q[0, 1] = -np.sin(angle)
    q[1, 0] = np.sin(angle)
    return q


def cmd_verify(cfg: RunConfig) -> int:
    """Run the selected checks; write verify_report.json; exit 0 iff all pass."""
    known = set(DEFAULT_CHECKS) | set(EXTRA_CHECKS)
    for name in cfg.checks:
        base = name.split(",")[0]
        if base not in known:
            raise UsageError(f"unknown check name {name!r}; known: {sorted(known)}")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    inst = cfg.game
    rng = np.random.default_rng(cfg.seed)
    ctx = {"cfg": cfg, "samples": inst.domain.sample_interior(64, rng)}
    needs_field = any(
        not c.startswith(("ellipticity", "factorization", "bounds", "exhaustion"))
        for c in cfg.checks
    )
    if needs_field:
        lattice = build_lattice(inst.domain, cfg.h)
        u, _ = policy_iteration_solve(inst.spec, lattice, inst.spec.terminal_g,
                                      tol=cfg.solver_tol, max_outer=cfg.solver_max_outer)
        ctx["u"] = u
        ctx["pair"] = strategy_pair_saddle(inst.spec, u, cfg.eps, cfg.mesh_n)
        from .strategies import ControlSignal, Strategy

        ctx["const_alpha"] = ControlSignal.constant(0)
        ctx["const_beta"] = Strategy.constant(0)
    reports = []
    for name in cfg.checks:
        reports.extend(_run_check(name, ctx))
    all_pass = all(r.passed for r in reports)
    doc = {
        "game": inst.spec.name,
        "pass": bool(all_pass),
        "seed": cfg.seed,
        "dt": cfg.dt,
        "n_paths": cfg.n_paths,
        "reports": [r.to_dict() for r in reports],
    }
    _write_json(cfg.out_dir / "verify_report.json", doc, "report.schema.json")
    return 0 if all_pass else 1


def cmd_simulate(cfg: RunConfig) -> int:
    """Dump n_dump_paths trajectories as CSV files."""
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    inst = cfg.game
    lattice = build_lattice(inst.domain, cfg.h)
    u, _ = policy_iteration_solve(inst.spec, lattice, inst.spec.terminal_g,
                                  tol=cfg.solver_tol, max_outer=cfg.solver_max_outer)
    alpha_resp, beta_strat = strategy_pair_saddle(inst.spec, u, cfg.eps, cfg.mesh_n)
    d = inst.spec.dim
    header = ",".join(["t"] + [f"x{k + 1}" for k in range(d)] + ["alpha", "beta", "phi", "psi"])
    for pid in range(cfg.n_dump_paths):
        rec = simulate_path(
            inst.spec, inst.domain, cfg.x0, alpha_resp.fresh(), beta_strat.fresh(),
            dt=cfg.dt, t_cap=cfg.t_cap, seed=cfg.seed, path_id=pid,
        )
        rows = []
        m = rec.step_dt.shape[0]
        for k in range(rec.times.shape[0]):
            j = min(k, m - 1)
            a = rec.alpha_idx[j] if m else -1
            b = rec.beta_idx[j] if m else -1
            cols = [rec.times[k], *rec.states[k], float(a), float(b), rec.phi[k], rec.psi[min(k, len(rec.psi) - 1)]]
            rows.append(",".join(f"{v:.17g}" for v in cols))
        (cfg.out_dir / f"path_{pid:04d}.csv").write_text(header + "\n" + "\n".join(rows) + "\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="diffgame",
        description="Stochastic differential game engine: solve, simulate, verify.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in ("solve", "verify", "simulate"):
        p = sub.add_parser(cmd)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--checks", default=None,
                       help="comma-separated check list (verify only)")
        p.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)
    overrides = {"seed": args.seed, "threads": args.threads}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.checks is not None:
        overrides["checks"] = [c for c in args.checks.split(",") if c]
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "verify":
            return cmd_verify(cfg)
        return cmd_simulate(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DiffGameError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
