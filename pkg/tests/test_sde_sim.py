import numpy as np
import pytest
from scipy import stats as sstats

from diffgame import (
    Domain,
    LambdaRule,
    ParamProcessRule,
    StepRejected,
    StopRule,
    UsageError,
    apply_param_rule,
    dpp_payoff,
    payoff,
    simulate_path,
)
from diffgame.fd_solver import AnalyticField
from diffgame.sde_sim import SimTasks, simulate_batch
from diffgame.strategies import ControlSignal, Strategy
from diffgame.verify import mc_payoffs
from conftest import const_field, make_spec, saddle_drift

DOM = Domain.interval(0, 1)
SINGLETON = np.array([[0.0]])
A0 = ControlSignal.constant(0)
B0 = Strategy.constant(0)


def frozen_spec(**kw):
    return make_spec(sigma_mat=[[0.0]], alphas=SINGLETON, betas=SINGLETON, **kw)


def drift_spec(**kw):
    return make_spec(
        sigma_mat=[[0.0]], alphas=SINGLETON, betas=SINGLETON,
        drift_fn=lambda a, b, p, x: np.ones((x.shape[0], 1)), **kw,
    )


class TestTrivialDynamics:
    def test_frozen_path_never_exits(self):
        rec = simulate_path(frozen_spec(), DOM, np.array([0.4]), A0, B0,
                            dt=1e-3, t_cap=0.02, seed=1)
        assert not rec.exited and rec.capped and np.isclose(rec.tau, 0.02)
        assert np.allclose(rec.states, 0.4)

    def test_deterministic_transport_exit(self):
        rec = simulate_path(drift_spec(), DOM, np.array([0.5]), A0, B0,
                            dt=1e-3, seed=0)
        assert rec.exited
        assert abs(rec.tau - 0.5) <= 1e-3 + 1e-12
        assert np.isclose(rec.exit_state[0], 1.0)

    def test_discount_accumulation_exact(self):
        spec = frozen_spec(cost_fn=const_field(2.0))
        lam = LambdaRule.constant(3.0)
        rec = simulate_path(spec, DOM, np.array([0.5]), A0, B0,
                            lambda_rule=lam, dt=1e-3, t_cap=0.01, seed=0)
        assert np.allclose(rec.phi, 2.0 * rec.times)
        assert np.allclose(rec.psi, 3.0 * rec.times)

    def test_outside_start(self):
        rec = simulate_path(frozen_spec(), DOM, np.array([1.5]), A0, B0, dt=1e-3)
        assert rec.exited and rec.tau == 0.0 and rec.times.shape == (1,)

    def test_step_rejected_on_nan(self):
        spec = make_spec(
            alphas=SINGLETON, betas=SINGLETON,
            sigma_fn=lambda a, b, p, x: np.full((x.shape[0], 1, 1), np.nan),
        )
        with pytest.raises(StepRejected):
            simulate_path(spec, DOM, np.array([0.5]), A0, B0, dt=1e-3, t_cap=0.01)


class TestPathRecordInvariants:
    def test_monotone_discounts_and_exit_state(self, bm1d, bm1d_saddle):
        ar, bs = bm1d_saddle
        lam = LambdaRule.of_state(lambda t, x: x[:, 0] ** 2)
        for pid in range(5):
            rec = simulate_path(bm1d.spec, bm1d.domain, np.array([0.5]),
                                ar.fresh(), bs.fresh(), lambda_rule=lam,
                                dt=1e-3, seed=7, path_id=pid)
            assert rec.phi[0] == 0.0 and rec.psi[0] == 0.0
            assert np.all(np.diff(rec.phi) >= 0) and np.all(np.diff(rec.psi) >= 0)
            assert rec.tau <= 50.0 * bm1d.domain.diameter**2 / 2.0
            if rec.exited:
                sd = bm1d.domain.signed_distance(rec.exit_state)
                assert abs(sd) <= 1e-10 * bm1d.domain.diameter

    def test_lambda_survival_integral_bounded(self):
        # int lambda e^{-psi} dt <= 1 along every path, to quadrature error
        spec = frozen_spec()
        lam = LambdaRule.constant(5.0)
        rec = simulate_path(spec, DOM, np.array([0.5]), A0, B0,
                            lambda_rule=lam, dt=1e-3, t_cap=2.0, seed=0)
        integrand = 5.0 * np.exp(-rec.psi[:-1]) * rec.step_dt
        assert integrand.sum() <= 1.0 + 5.0 * 1e-3


class TestPayoff:
    def test_terminal_only(self):
        spec = drift_spec(terminal_fn=lambda x: np.ones(np.atleast_2d(x).shape[0]))
        rec = simulate_path(spec, DOM, np.array([0.5]), A0, B0, dt=1e-3)
        assert np.isclose(payoff(spec, rec), 1.0)

    def test_running_time_integral(self):
        spec = drift_spec(running_fn=const_field(1.0))
        rec = simulate_path(spec, DOM, np.array([0.7]), A0, B0, dt=1e-3)
        assert abs(payoff(spec, rec) - 0.3) <= 1e-3

    def test_discounted_terminal(self):
        spec = drift_spec(cost_fn=const_field(2.0),
                          terminal_fn=lambda x: np.ones(np.atleast_2d(x).shape[0]))
        rec = simulate_path(spec, DOM, np.array([0.5]), A0, B0, dt=1e-4)
        assert abs(payoff(spec, rec) - np.exp(-1.0)) <= 1e-3


class TestDppPayoff:
    def v_const(self, val):
        return AnalyticField(
            value_fn=lambda x: np.full(x.shape[0], val),
            gradient_fn=lambda x: np.zeros_like(x),
            hessian_fn=lambda x: np.zeros((x.shape[0], x.shape[1], x.shape[1])),
        )

    def test_gamma_zero_returns_v_at_start(self):
        spec = drift_spec(running_fn=const_field(1.0))
        rec = simulate_path(spec, DOM, np.array([0.5]), A0, B0, dt=1e-3)
        v = self.v_const(0.77)
        assert dpp_payoff(spec, rec, StopRule.zero(), None, v) == 0.77

    def test_gamma_tau_equals_payoff_with_boundary_v(self):
        spec = drift_spec(running_fn=const_field(1.0),
                          terminal_fn=lambda x: np.zeros(np.atleast_2d(x).shape[0]))
        rec = simulate_path(spec, DOM, np.array([0.5]), A0, B0, dt=1e-3)
        v = AnalyticField(
            value_fn=lambda x: np.full(x.shape[0], 123.0),
            gradient_fn=lambda x: np.zeros_like(x),
            hessian_fn=lambda x: np.zeros((x.shape[0], 1, 1)),
            outside_fn=lambda x: np.zeros(x.shape[0]),
            dom=DOM,
        )
        got = dpp_payoff(spec, rec, StopRule.tau(), None, v)
        assert abs(got - payoff(spec, rec)) <= 1e-12

    def test_constant_v_martingale_identity(self):
        # lambda = L, v = V, f = 0, c = 0, gamma = tau:
        # V e^{-L tau} + V L int e^{-L t} = V exactly
        spec = drift_spec()
        rec = simulate_path(spec, DOM, np.array([0.5]), A0, B0, dt=1e-4)
        v = self.v_const(2.5)
        got = dpp_payoff(spec, rec, StopRule.tau(), LambdaRule.constant(4.0), v)
        assert abs(got - 2.5) <= 2.5 * 4.0 * 1e-4 * 2

    def test_batch_engine_matches_record_route(self, bm1d, bm1d_fine, bm1d_saddle):
        # dual route: vectorized accumulators vs the per-record reference
        ar, bs = bm1d_saddle
        lam = LambdaRule.of_state(lambda t, x: 4.0 * x[:, 0] * (1 - x[:, 0]))
        for rule in (StopRule.zero(), StopRule.fixed_time(0.03), StopRule.tau(),
                     StopRule.exit_subdomain(Domain.interval(0.25, 0.75)),
                     StopRule.phi_threshold(0.0)):
            res = simulate_batch(
                bm1d.spec, bm1d.domain, np.array([0.5]), ar, bs,
                dt=1e-3, seed=5, path_ids=np.arange(4),
                tasks=SimTasks(payoff=False, gamma_rule=rule, v_field=bm1d_fine,
                               lambda_rules=(lam,)),
            )
            for pid in range(4):
                rec = simulate_path(bm1d.spec, bm1d.domain, np.array([0.5]),
                                    ar.fresh(), bs.fresh(), dt=1e-3, seed=5,
                                    path_id=pid)
                ref = dpp_payoff(bm1d.spec, rec, rule, lam, bm1d_fine)
                assert abs(res.dpp[0, pid] - ref) <= 1e-9, rule.kind


class TestParamRules:
    def test_constant_base_identity(self, bm1d):
        s0, b0, c0, f0 = apply_param_rule(
            bm1d.spec, ParamProcessRule.constant_base(), 2, 0, np.array([0.5]))
        assert np.isclose(s0[0, 0], np.sqrt(2.0)) and np.isclose(b0[0], 2.0)
        assert c0 == 0.0 and f0 == 1.0

    def test_unit_time_change_identity(self, bm1d):
        rule = ParamProcessRule.time_change_rotation(1.0, np.eye(1))
        s0, b0, c0, f0 = apply_param_rule(bm1d.spec, rule, 2, 0, np.array([0.5]))
        assert np.isclose(s0[0, 0], np.sqrt(2.0)) and np.isclose(b0[0], 2.0)

    def test_doubling_time_change(self, bm1d):
        rule = ParamProcessRule.time_change_rotation(2.0)
        s0, b0, c0, f0 = apply_param_rule(bm1d.spec, rule, 2, 0, np.array([0.5]))
        a_eff = 0.5 * s0 @ s0.T
        assert np.isclose(a_eff[0, 0], 2.0)  # a -> p' a
        assert np.isclose(b0[0], 4.0) and np.isclose(f0, 2.0)

    def test_state_feedback_transform(self, bm1d):
        rule = ParamProcessRule.state_feedback(
            r_fn=lambda x: 1.0 + 0.5 * x[:, 0],
            q_fn=lambda x: np.broadcast_to(-np.eye(1), (x.shape[0], 1, 1)).copy(),
        )
        spec = make_spec(sigma_mat=[[np.sqrt(2.0)]], delta1=0.5,
                         running_fn=const_field(1.0))
        s0, b0, c0, f0 = apply_param_rule(spec, rule, 0, 0, np.array([0.4]))
        r = 1.2
        assert np.isclose(s0[0, 0], -np.sqrt(r) * np.sqrt(2.0))
        assert np.isclose(f0, r)

    def test_scale_out_of_bounds_rejected(self, bm1d):
        rule = ParamProcessRule.time_change_rotation(3.0)
        with pytest.raises(UsageError):
            rule.validate(bm1d.spec)

    def test_non_orthogonal_rotation_rejected(self, bm1d):
        rule = ParamProcessRule.time_change_rotation(1.0, np.array([[2.0]]))
        with pytest.raises(UsageError):
            rule.validate(bm1d.spec)


class TestDeterminism:
    def test_same_seed_bit_identical(self, bm1d, bm1d_saddle):
        ar, bs = bm1d_saddle
        recs = [
            simulate_path(bm1d.spec, bm1d.domain, np.array([0.5]), ar.fresh(),
                          bs.fresh(), dt=1e-3, seed=13, path_id=4)
            for _ in range(2)
        ]
        assert np.array_equal(recs[0].states, recs[1].states)
        assert np.array_equal(recs[0].beta_idx, recs[1].beta_idx)
        assert recs[0].tau == recs[1].tau

    def test_distinct_paths_differ(self, bm1d, bm1d_saddle):
        ar, bs = bm1d_saddle
        r0 = simulate_path(bm1d.spec, bm1d.domain, np.array([0.5]), ar.fresh(),
                           bs.fresh(), dt=1e-3, seed=13, path_id=0)
        r1 = simulate_path(bm1d.spec, bm1d.domain, np.array([0.5]), ar.fresh(),
                           bs.fresh(), dt=1e-3, seed=13, path_id=1)
        assert not np.array_equal(r0.states[:10], r1.states[:10])

    def test_nonanticipation_of_beta(self, bm1d, bm1d_fine):
        # alpha signals agreeing on [0, s] produce identical betas and states
        # on [0, s], bit-exact, for the same seed
        s_switch = 0.05
        sig1 = ControlSignal.piecewise([0.0, s_switch], [2, 0])
        sig2 = ControlSignal.piecewise([0.0, s_switch], [2, 1])
        beta = Strategy.eps_optimal_beta(bm1d.spec, bm1d.domain, bm1d_fine, 1e-4, 32)
        r1 = simulate_path(bm1d.spec, bm1d.domain, np.array([0.5]), sig1,
                           beta.fresh(), dt=1e-3, seed=3, path_id=2)
        r2 = simulate_path(bm1d.spec, bm1d.domain, np.array([0.5]), sig2,
                           beta.fresh(), dt=1e-3, seed=3, path_id=2)
        k = min(int(s_switch / 1e-3), len(r1.beta_idx), len(r2.beta_idx))
        assert np.array_equal(r1.beta_idx[:k], r2.beta_idx[:k])
        assert np.array_equal(r1.states[:k], r2.states[:k])


class TestStatistical:
    def test_dt_refinement_reduces_error(self, bm1d, bm1d_saddle):
        # without the bridge test the exit bias is O(sqrt(dt)); refining dt by
        # 4 must shrink the error beyond statistical noise
        errs = []
        for dt in (1.6e-3, 4e-4):
            pay, _ = mc_payoffs(bm1d.spec, bm1d.domain, np.array([0.5]),
                                bm1d_saddle, dt=dt, n_paths=20000, seed=21,
                                bridge_exit=False)
            errs.append(abs(pay.mean() - 0.125))
        assert errs[1] < errs[0]

    def test_rotation_rule_preserves_distribution(self, bm1d, bm1d_saddle):
        # d1 = 1 orthogonal rotation = sign flip; KS at level 0.01, 1e4 paths
        base, _ = mc_payoffs(bm1d.spec, bm1d.domain, np.array([0.5]), bm1d_saddle,
                             dt=2e-4, n_paths=10000, seed=33)
        rot, _ = mc_payoffs(bm1d.spec, bm1d.domain, np.array([0.5]), bm1d_saddle,
                            prule=ParamProcessRule.time_change_rotation(1.0, -np.eye(1)),
                            dt=2e-4, n_paths=10000, seed=33)
        assert sstats.ks_2samp(base, rot).pvalue > 0.01
