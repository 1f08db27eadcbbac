import numpy as np
import pytest

from diffgame import (
    Domain,
    SubdomainFamily,
    UsageError,
    boundary_crossing,
    contains,
    quadratic_barrier,
    verify_barrier,
)
from conftest import const_field, make_spec, saddle_drift


class TestContains:
    def test_interval_inside(self):
        assert contains(Domain.interval(0, 1), np.array([0.5]))

    def test_boundary_counts_as_exited(self):
        assert not contains(Domain.interval(0, 1), np.array([1.0]))

    def test_ball_unit_vector(self):
        assert not contains(Domain.ball([0, 0], 1.0), np.array([0.6, 0.8]))

    def test_signed_distance_signs(self):
        dom = Domain.box([0, 0], [2, 1])
        assert dom.signed_distance(np.array([1.0, 0.5])) < 0
        assert dom.signed_distance(np.array([1.0, 1.0])) == 0
        assert dom.signed_distance(np.array([3.0, 0.5])) > 0


class TestBoundaryCrossing:
    def test_interval_crossing(self):
        pt, theta = boundary_crossing(Domain.interval(0, 1), np.array([0.9]), np.array([1.1]))
        assert np.isclose(pt[0], 1.0, atol=1e-10) and np.isclose(theta, 0.5, atol=1e-10)

    def test_no_crossing(self):
        assert boundary_crossing(Domain.interval(0, 1), np.array([0.5]), np.array([0.6])) is None

    def test_ball_crossing(self):
        pt, theta = boundary_crossing(Domain.ball([0, 0], 1.0), np.zeros(2), np.array([2.0, 0.0]))
        assert np.allclose(pt, [1.0, 0.0], atol=1e-10) and np.isclose(theta, 0.5, atol=1e-10)

    def test_crossing_point_on_boundary(self):
        dom = Domain.ball([0.0, 0.0], 1.0)
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = dom.sample_interior(1, rng)[0]
            b = a + rng.normal(size=2) * 2.0
            if dom.signed_distance(b) < 0:
                continue
            pt, _ = boundary_crossing(dom, a, b)
            assert abs(dom.signed_distance(pt)) <= 1e-10 * dom.diameter

    def test_requires_inside_start(self):
        with pytest.raises(UsageError):
            boundary_crossing(Domain.interval(0, 1), np.array([1.5]), np.array([2.0]))

    def test_segment_exit_matches_bisection(self):
        # closed-form crossings against the generic bisection
        for dom in (Domain.interval(0, 1), Domain.ball([0, 0], 1.0), Domain.box([0, 0], [1, 2])):
            rng = np.random.default_rng(11)
            d = dom.dim
            a = dom.sample_interior(40, rng)
            b = a + rng.normal(size=(40, d))
            out = dom.signed_distance(b) >= 0
            if not np.any(out):
                continue
            pts, theta = dom.segment_exit(a[out], b[out])
            for i, j in enumerate(np.flatnonzero(out)):
                ref_pt, ref_theta = boundary_crossing(dom, a[j], b[j])
                assert np.isclose(theta[i], ref_theta, atol=1e-9)
                assert np.allclose(pts[i], ref_pt, atol=1e-9)


class TestSubdomains:
    def test_nesting(self):
        fam = SubdomainFamily(Domain.interval(0, 1), (0.25, 0.125, 0.0625))
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1, size=(200, 1))
        for i in range(len(fam) - 1):
            inner = fam.member(i).signed_distance(pts) < 0
            outer = fam.member(i + 1).signed_distance(pts) < 0
            assert np.all(~inner | outer)  # D_n subset of D_{n+1}

    def test_radii_must_decrease(self):
        with pytest.raises(UsageError):
            SubdomainFamily(Domain.interval(0, 1), (0.1, 0.2))

    def test_shrink_too_far(self):
        with pytest.raises(UsageError):
            Domain.interval(0, 1).shrink(0.5)

    def test_ball_shrink(self):
        sub = Domain.ball([0, 0], 1.0).shrink(0.25)
        assert sub.radius == 0.75


class TestFaceDistances:
    @pytest.mark.parametrize("dom", [
        Domain.interval(0, 1),
        Domain.box([0, -1], [2, 1]),
        Domain.ball([0.5, 0.5], 2.0),
    ])
    def test_consistent_with_signed_distance(self, dom):
        rng = np.random.default_rng(5)
        pts = dom.sample_interior(50, rng)
        dists, normals = dom.face_distances(pts)
        assert np.allclose(-dists.min(axis=1), dom.signed_distance(pts), atol=1e-12)
        for f in range(normals.shape[0]):
            assert np.allclose(np.linalg.norm(normals[f], axis=1), 1.0)

    def test_projection_lands_on_boundary(self):
        for dom in (Domain.box([0, 0], [1, 2]), Domain.ball([0, 0], 1.0)):
            rng = np.random.default_rng(9)
            pts = dom.sample_interior(30, rng)
            proj = dom.project_to_boundary(pts)
            assert np.abs(dom.signed_distance(proj)).max() <= 1e-12


class TestBarrier:
    def test_quadratic_shape(self):
        dom = Domain.interval(0, 1)
        bar = quadratic_barrier(dom)
        assert bar.check_shape(dom)

    def test_pure_diffusion_passes(self):
        # G = x(1-x), a = 1, b = 0, c = 0: LG = -2
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]])
        dom = Domain.interval(0, 1)
        rep = verify_barrier(spec, quadratic_barrier(dom), dom, np.linspace(0.05, 0.95, 19)[:, None])
        assert rep.passed and np.isclose(rep.max_lg, -2.0)

    def test_bounded_drift_passes(self):
        # |b| <= 1: LG = -2 + b(1-2x) <= -1; oracle: brute-force max over x, a, b
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], drift_fn=saddle_drift(0.5),
                         cost_fn=const_field(0.0))
        dom = Domain.interval(0, 1)
        bar = quadratic_barrier(dom)
        pts = np.linspace(0.02, 0.98, 49)[:, None]
        rep = verify_barrier(spec, bar, dom, pts)
        brute = max(
            -2.0 + 0.5 * (a - b) * (1.0 - 2.0 * x)
            for x in pts[:, 0]
            for a in (-1.0, 0.0, 1.0)
            for b in (-1.0, 0.0, 1.0)
        )
        assert np.isclose(rep.max_lg, brute)
        assert rep.passed and brute <= -1.0

    def test_weak_diffusion_fails(self):
        # a = 1/4: LG = -1/2 > -1
        spec = make_spec(sigma_mat=[[np.sqrt(0.5)]], delta=0.25)
        dom = Domain.interval(0, 1)
        rep = verify_barrier(spec, quadratic_barrier(dom), dom, np.array([[0.5]]))
        assert not rep.passed and np.isclose(rep.max_lg, -0.5)

    def test_missing_hessian_rejected(self):
        from diffgame import Barrier

        spec = make_spec()
        dom = Domain.interval(0, 1)
        bar = Barrier(value=lambda x: 0.0, gradient=lambda x: np.zeros(1), hessian=None)
        with pytest.raises(UsageError):
            verify_barrier(spec, bar, dom, np.array([[0.5]]))
