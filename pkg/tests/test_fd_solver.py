import numpy as np
import pytest

from diffgame import (
    Domain,
    MeshTooCoarse,
    NoConvergence,
    OutsideDomain,
    build_lattice,
    builtin_game,
    discretize_L,
    field_derivatives,
    holder_quotient,
    policy_iteration_solve,
)
from diffgame.fd_solver import write_field_csv
from conftest import const_field, make_spec, saddle_drift

SINGLETON = np.array([[0.0]])


def solve_simple(spec, dom, h, g=None, **kw):
    lat = build_lattice(dom, h)
    g = g or spec.terminal_g
    return policy_iteration_solve(spec, lat, g, **kw)


class TestStencil:
    def test_pure_diffusion_weights(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON)
        lat = build_lattice(Domain.interval(0, 1), 0.1)
        row = discretize_L(spec, lat, 0, 0, 4)
        w = dict(zip(row.offsets, row.weights))
        assert np.isclose(w[(-1,)], 100.0)
        assert np.isclose(w[(0,)], -200.0)
        assert np.isclose(w[(1,)], 100.0)

    def test_upwind_drift(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON,
                         drift_fn=lambda a, b, p, x: np.full((x.shape[0], 1), 2.0))
        lat = build_lattice(Domain.interval(0, 1), 0.1)
        row = discretize_L(spec, lat, 0, 0, 4)
        w = dict(zip(row.offsets, row.weights))
        assert np.isclose(w[(1,)], 100.0 + 20.0)
        assert np.isclose(w[(0,)], -200.0 - 20.0)
        assert np.isclose(w[(-1,)], 100.0)

    def test_zeroth_order_in_center(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON,
                         cost_fn=const_field(3.0))
        lat = build_lattice(Domain.interval(0, 1), 0.1)
        row = discretize_L(spec, lat, 0, 0, 4)
        w = dict(zip(row.offsets, row.weights))
        assert np.isclose(w[(0,)], -200.0 - 3.0)

    def test_mesh_too_coarse_on_nondominant_cross(self):
        a = np.array([[1.0, 1.2], [1.2, 2.0]])
        s = np.linalg.cholesky(2.0 * a)
        spec = make_spec(dim=2, sigma_mat=s, alphas=SINGLETON, betas=SINGLETON, delta=0.1)
        lat = build_lattice(Domain.box([0, 0], [1, 1]), 0.25)
        with pytest.raises(MeshTooCoarse):
            discretize_L(spec, lat, 0, 0, 0)


class TestSolve1D:
    def test_closed_form_poisson(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON,
                         running_fn=const_field(1.0))
        u, rep = solve_simple(spec, Domain.interval(0, 1), 1.0 / 64)
        assert rep.converged
        x = u.lattice.nodes[:, 0]
        assert np.abs(u.values - x * (1 - x) / 2).max() <= 1e-4
        assert abs(u.value(np.array([[0.5]]))[0] - 0.125) <= 1e-4

    def test_zero_data_zero_solution(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON)
        u, _ = solve_simple(spec, Domain.interval(0, 1), 1.0 / 32)
        assert np.abs(u.values).max() <= 1e-12

    def test_saddle_drift_cancels(self, bm1d, bm1d_solved):
        # sup-inf of (alpha-beta) u' vanishes, so the value matches the
        # drift-free closed form
        u, rep = bm1d_solved
        exact = bm1d.exact_value(u.lattice.nodes)
        assert np.abs(u.values - exact).max() <= 1e-3

    def test_upwind_drift_first_order(self):
        # u'' + 2u' = -1 with zero data; exact solution via the ODE
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON,
                         drift_fn=lambda a, b, p, x: np.full((x.shape[0], 1), 2.0),
                         running_fn=const_field(1.0))
        A = 0.5 / (1.0 - np.exp(-2.0))
        exact = lambda x: A * (1.0 - np.exp(-2.0 * x)) - x / 2.0
        errs = []
        for h in (1.0 / 64, 1.0 / 128):
            u, _ = solve_simple(spec, Domain.interval(0, 1), h)
            errs.append(np.abs(u.values - exact(u.lattice.nodes[:, 0])).max())
        assert errs[0] / errs[1] >= 1.7  # first-order upwind

    def test_boundary_values_exact(self):
        g = lambda x: 5.0 * np.ones(np.atleast_2d(x).shape[0])
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON)
        u, _ = solve_simple(spec, Domain.interval(0, 1), 1.0 / 16, g=g)
        assert np.allclose(u.grid_values[[0, -1]], 5.0)
        assert np.abs(u.values - 5.0).max() <= 1e-10  # harmonic constant

    def test_no_convergence_attaches_best(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON,
                         running_fn=const_field(1.0))
        lat = build_lattice(Domain.interval(0, 1), 1.0 / 512)
        with pytest.raises(NoConvergence) as exc:
            policy_iteration_solve(spec, lat, spec.terminal_g, tol=1e-16, max_outer=5)
        best = exc.value.best
        x = best.lattice.nodes[:, 0]
        assert np.abs(best.values - x * (1 - x) / 2).max() <= 1e-4


class TestSolveInvariants:
    @pytest.mark.parametrize("fval,gval", [(-1.0, 0.0), (0.0, -1.0), (-1.0, -0.5)])
    def test_discrete_maximum_principle(self, fval, gval):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], drift_fn=saddle_drift(1.0),
                         running_fn=const_field(fval),
                         terminal_fn=lambda x: np.full(np.atleast_2d(x).shape[0], gval))
        u, _ = solve_simple(spec, Domain.interval(0, 1), 1.0 / 64)
        assert u.values.max() <= 1e-12

    def test_residual_certificate_brute_force(self, bm1d, bm1d_solved):
        u, rep = bm1d_solved
        spec = bm1d.spec
        lat = u.lattice
        # independent re-evaluation: loop pairs, rebuild rows via discretize_L
        rng = np.random.default_rng(0)
        nodes = rng.choice(lat.n_interior, size=25, replace=False)
        upad = np.append(u.values, 0.0)
        for node in nodes:
            vals = np.empty((3, 3))
            for ia in range(3):
                for ib in range(3):
                    row = discretize_L(spec, lat, ia, ib, int(node), g=spec.terminal_g)
                    cols = lat.cols[node]
                    vals[ia, ib] = (
                        np.sum(row.weights * upad[cols]) + row.boundary_source + 1.0
                    )
            assert abs(vals.min(axis=1).max()) <= 1e-8

    def test_grid_convergence_second_order(self, bm1d, bm1d_solved):
        u256, _ = bm1d_solved
        exact = bm1d.exact_value
        e256 = np.abs(u256.values - exact(u256.lattice.nodes)).max()
        u128, _ = solve_simple(bm1d.spec, bm1d.domain, 1.0 / 128)
        e128 = np.abs(u128.values - exact(u128.lattice.nodes)).max()
        assert e128 / e256 >= 3.5

    def test_comparison_monotonicity(self):
        def game(fv, gv):
            return make_spec(sigma_mat=[[np.sqrt(2.0)]], drift_fn=saddle_drift(1.0),
                             running_fn=const_field(fv),
                             terminal_fn=lambda x: np.full(np.atleast_2d(x).shape[0], gv))

        for (f1, g1), (f2, g2) in [((1.0, 0.5), (0.5, 0.0)), ((0.0, 0.0), (-1.0, -0.1))]:
            u1, _ = solve_simple(game(f1, g1), Domain.interval(0, 1), 1.0 / 64)
            u2, _ = solve_simple(game(f2, g2), Domain.interval(0, 1), 1.0 / 64)
            assert np.all(u1.values >= u2.values - 1e-12)

    def test_lower_value_diagnostic_reported(self, bm1d_solved):
        _, rep = bm1d_solved
        assert np.isfinite(rep.lower_value_residual)


class TestSolve2D:
    def test_cross_terms_exact_on_quadratic(self):
        # a with off-diagonal, no drift: the seven-point scheme is exact on
        # quadratics, so the solve reproduces a manufactured quadratic
        a = np.array([[1.0, 0.4], [0.4, 1.0]])
        s = np.linalg.cholesky(2.0 * a)
        uex = lambda x: x[:, 0] ** 2 + x[:, 0] * x[:, 1] - x[:, 1] ** 2 + x[:, 0]
        # f = -(a : D2 u) with D2 u = [[2, 1], [1, -2]]
        fval = -(a[0, 0] * 2 + 2 * a[0, 1] * 1 + a[1, 1] * (-2))
        spec = make_spec(dim=2, sigma_mat=s, alphas=SINGLETON, betas=SINGLETON,
                         delta=0.5, running_fn=const_field(fval),
                         terminal_fn=lambda x: uex(np.atleast_2d(x)))
        u, rep = solve_simple(spec, Domain.box([0, 0], [1, 1]), 1.0 / 16,
                              g=lambda x: uex(np.atleast_2d(x)))
        assert np.abs(u.values - uex(u.lattice.nodes)).max() <= 1e-9

    def test_rot2d_ball_matches_closed_form(self):
        inst = builtin_game("rot2d")
        u, rep = solve_simple(inst.spec, inst.domain, 1.0 / 32)
        exact = inst.exact_value(u.lattice.nodes)
        assert rep.converged
        assert np.abs(u.values - exact).max() <= 5e-3


class TestFieldDerivatives:
    def test_quadratic_exact(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON,
                         running_fn=const_field(1.0))
        u, _ = solve_simple(spec, Domain.interval(0, 1), 1.0 / 64)
        du = field_derivatives(u, np.array([0.5]))
        assert abs(du.value - 0.125) <= 1e-5
        assert abs(du.gradient[0]) <= 1e-9
        assert abs(du.hessian[0, 0] + 1.0) <= 1e-6

    def test_constant_field(self):
        g = lambda x: 2.0 * np.ones(np.atleast_2d(x).shape[0])
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON)
        u, _ = solve_simple(spec, Domain.interval(0, 1), 1.0 / 32, g=g)
        du = field_derivatives(u, np.array([0.37]))
        assert abs(du.value - 2.0) <= 1e-9
        assert abs(du.gradient[0]) <= 1e-7 and abs(du.hessian[0, 0]) <= 1e-5

    def test_outside_domain_raises(self, bm1d_solved):
        u, _ = bm1d_solved
        with pytest.raises(OutsideDomain):
            field_derivatives(u, np.array([1.5]))


class TestHolder:
    def test_constant_is_zero(self):
        g = lambda x: np.ones(np.atleast_2d(x).shape[0])
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON)
        u, _ = solve_simple(spec, Domain.interval(0, 1), 1.0 / 32, g=g)
        assert holder_quotient(u, 0.5, Domain.interval(0.25, 0.75)) <= 1e-10

    def test_linear_is_lipschitz_one(self):
        g = lambda x: np.atleast_2d(x)[:, 0]
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], alphas=SINGLETON, betas=SINGLETON)
        u, _ = solve_simple(spec, Domain.interval(0, 1), 1.0 / 64, g=g)
        q = holder_quotient(u, 1.0, Domain.interval(0.25, 0.75))
        assert abs(q - 1.0) <= 1e-6

    def test_stable_under_refinement(self, bm1d):
        qs = []
        for h in (1.0 / 128, 1.0 / 256):
            u, _ = solve_simple(bm1d.spec, bm1d.domain, h)
            qs.append(holder_quotient(u, 0.5, Domain.interval(0.25, 0.75)))
        assert abs(qs[0] - qs[1]) <= 0.1 * qs[1]


def test_write_field_csv(tmp_path, bm1d_solved):
    u, _ = bm1d_solved
    path = tmp_path / "field.csv"
    write_field_csv(u, path)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (u.lattice.n_interior, 2)
    assert np.allclose(data[:, 1], u.values)
