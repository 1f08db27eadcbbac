import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from diffgame import (
    ControlGrid,
    UsageError,
    builtin_game,
    check_bounds,
    check_ellipticity,
    check_factorization,
    eval_diffusion,
    validate_game,
)
from conftest import GRID3, const_field, make_spec


class TestControlGrid:
    def test_duplicate_points_rejected(self):
        with pytest.raises(UsageError):
            ControlGrid(alphas=np.array([[1.0], [1.0]]), betas=GRID3, params=np.array([[1.0]]))

    def test_base_index_validated(self):
        with pytest.raises(UsageError):
            ControlGrid(alphas=GRID3, betas=GRID3, params=np.array([[1.0]]), base_param_index=3)

    def test_base_param_point(self):
        g = ControlGrid(alphas=GRID3, betas=GRID3,
                        params=np.array([[0.5], [1.0], [2.0]]), base_param_index=1)
        assert g.base_param[0] == 1.0


class TestEvalDiffusion:
    def test_scalar_sqrt2(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]])
        a, b, c, f = eval_diffusion(spec, 0, 0, 0, np.array([0.3]))
        assert np.allclose(a, [[1.0]])

    def test_identity_2d(self):
        spec = make_spec(dim=2, sigma_mat=np.eye(2))
        a, _, _, _ = eval_diffusion(spec, 0, 0, 0, np.zeros(2))
        assert np.allclose(a, 0.5 * np.eye(2))

    def test_upper_triangular(self):
        # oracle: direct product (1/2) s s^T computed by hand
        s = np.array([[1.0, 1.0], [0.0, 1.0]])
        spec = make_spec(dim=2, sigma_mat=s)
        a, _, _, _ = eval_diffusion(spec, 0, 0, 0, np.zeros(2))
        assert np.allclose(a, 0.5 * np.array([[2.0, 1.0], [1.0, 1.0]]))
        assert np.allclose(a, 0.5 * s @ s.T)

    def test_index_out_of_range(self):
        spec = make_spec()
        with pytest.raises(UsageError):
            eval_diffusion(spec, 5, 0, 0, np.array([0.0]))

    def test_batched_shapes(self):
        spec = make_spec(dim=2, cost_fn=const_field(1.0))
        x = np.zeros((7, 2))
        a, b, c, f = eval_diffusion(spec, 0, 0, 0, x)
        assert a.shape == (7, 2, 2) and b.shape == (7, 2) and c.shape == (7,)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
    def test_a_symmetric_psd(self, s):
        spec = make_spec(dim=2, noise_dim=3, sigma_mat=s, delta=1.0)
        a, _, _, _ = eval_diffusion(spec, 0, 0, 0, np.zeros(2))
        assert np.allclose(a, a.T, atol=1e-14)
        assert np.linalg.eigvalsh(a).min() >= -1e-12


class TestEllipticity:
    def test_identity_delta_one(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], delta=1.0)
        rep = check_ellipticity(spec, np.array([[0.2], [0.7]]))
        assert rep.passed and np.isclose(rep.min_quotient, 1.0) and np.isclose(rep.max_quotient, 1.0)

    def test_identity_delta_half(self):
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], delta=0.5)
        assert check_ellipticity(spec, np.array([[0.5]])).passed

    def test_degenerate_direction_fails(self):
        # a = diag(0.1, 1): quotient 0.1 < delta = 0.5 along e1
        s = np.diag(np.sqrt([0.2, 2.0]))
        spec = make_spec(dim=2, sigma_mat=s, delta=0.5)
        rep = check_ellipticity(spec, np.zeros((1, 2)), directions=np.eye(2))
        assert not rep.passed
        assert np.isclose(rep.min_quotient, 0.1)

    def test_empty_samples_rejected(self):
        spec = make_spec()
        with pytest.raises(UsageError):
            check_ellipticity(spec, np.empty((0, 1)))


class TestFactorization:
    def test_trivial_base_only(self):
        spec = make_spec(running_fn=const_field(3.0))
        assert check_factorization(spec, np.array([[0.5]])).passed

    def test_multiplicative_family(self):
        # f scaled by p', r = p', over P = {0.5, 1, 2}
        params = np.array([[0.5], [1.0], [2.0]])
        pf = lambda a, b, p, x: np.full(x.shape[0], float(np.asarray(p)[0]))
        spec = make_spec(
            params=params, base_param_index=1, delta1=0.5,
            running_fn=lambda a, b, p, x: 3.0 * pf(a, b, p, x),
            factor_fn=pf,
        )
        rep = check_factorization(spec, np.array([[0.25], [0.75]]))
        assert rep.passed and rep.r_min == 0.5 and rep.r_max == 2.0

    def test_factor_bound_violation(self):
        params = np.array([[1.0], [3.0]])
        pf = lambda a, b, p, x: np.full(x.shape[0], float(np.asarray(p)[0]))
        spec = make_spec(
            params=params, base_param_index=0, delta1=0.5,
            running_fn=lambda a, b, p, x: pf(a, b, p, x),
            factor_fn=pf,
        )
        rep = check_factorization(spec, np.array([[0.5]]))
        assert not rep.passed and rep.r_max == 3.0


class TestBuiltins:
    @pytest.mark.parametrize("name", ["bm1d", "pursuit1d", "rot2d"])
    def test_structural_checks_pass(self, name):
        inst = builtin_game(name)
        reports = validate_game(inst, n_samples=48)
        for key, rep in reports.items():
            assert rep.passed, f"{name}: {key} failed: {rep}"

    def test_unknown_name(self):
        with pytest.raises(UsageError):
            builtin_game("nope")

    def test_bm1d_coefficients(self, bm1d):
        a, b, c, f = eval_diffusion(bm1d.spec, 2, 0, 0, np.array([0.5]))
        assert np.isclose(a[0, 0], 1.0) and np.isclose(b[0], 2.0)
        assert c == 0.0 and f == 1.0

    def test_bm1d_drift_scale_variant(self):
        inst = builtin_game("bm1d", drift_scale=0.5)
        _, b, _, _ = eval_diffusion(inst.spec, 2, 0, 0, np.array([0.5]))
        assert np.isclose(b[0], 1.0)

    def test_pursuit1d_factorization_is_paper_family(self):
        inst = builtin_game("pursuit1d")
        rep = check_factorization(inst.spec, np.array([[0.3], [0.9]]))
        assert rep.passed and rep.r_min == 0.5 and rep.r_max == 2.0

    def test_rot2d_exact_value_center(self):
        inst = builtin_game("rot2d")
        assert np.isclose(inst.exact_value(np.zeros((1, 2)))[0], 0.25)

    def test_bounds_on_builtin(self, bm1d):
        rep = check_bounds(bm1d.spec, np.linspace(0.1, 0.9, 9)[:, None])
        assert rep.passed and rep.min_cost >= 0.0
