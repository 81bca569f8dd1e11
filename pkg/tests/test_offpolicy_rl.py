import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oftrack import linalg_kit as la
from oftrack import offpolicy_rl as rl
from oftrack import regulation_oracle as ro
from oftrack.errors import ConvergenceError, InstabilityError, PolicyUpdateError, RankConditionError

from conftest import prepared

QUIET = rl.ExcitationSpec(amp=0.0, noise_amp=0.0)


def collect(prep, k0=10, kf=400, x0=None, excitation=None, K_o0=None, theta_source="exploration", xd0=None):
    state = rl.LoopState.initial(prep.setup, prep.spec, x0, xd0)
    exc = excitation if excitation is not None else prep.cfg.excitation
    K = prep.K_o0 if K_o0 is None else K_o0
    return rl.run_behavior(prep.setup, state, exc, K, k0, kf, theta_source)


def unique_rel_err(a, b):
    ua, ub = a.unique_part(), b.unique_part()
    return np.linalg.norm(ua - ub) / np.linalg.norm(ub)


def oracle_for(prep, K_o):
    return rl.oracle_kernels(prep.setup, prep.param, rl.state_gain_from_output_gain(K_o, prep.param.Mbar))


class TestExcitation:
    def test_seeded_and_stream_separated(self):
        spec = rl.ExcitationSpec(seed=4)
        a, b = spec.signal(2, 100, 0), spec.signal(2, 100, 0)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, spec.signal(2, 100, 1))
        assert not np.allclose(a[:, 0], a[:, 1])
        assert not np.allclose(a, rl.ExcitationSpec(seed=5).signal(2, 100, 0))

    def test_bounds(self):
        spec = rl.ExcitationSpec(n_sines=5, amp=0.3, noise_amp=0.05)
        assert np.max(np.abs(spec.signal(1, 1000, 0))) <= 5 * 0.3 + 0.05

    def test_zero_amplitude(self):
        np.testing.assert_array_equal(QUIET.signal(3, 20, 0), 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            rl.ExcitationSpec(amp=-1)
        with pytest.raises(ValueError):
            rl.ExcitationSpec(freq_range=(2.0, 1.0))


class TestBehavior:
    def test_quiet_run_is_zero(self):
        beh = collect(prepared("rot_tracking"), excitation=QUIET, kf=60)
        for arr in (beh.log.zeta, beh.log.zeta_next, beh.log.ubar, beh.log.theta, beh.log.y):
            np.testing.assert_array_equal(arr, 0)

    def test_logging_window(self):
        beh = collect(prepared("scalar_step"), k0=7, kf=30)
        np.testing.assert_array_equal(beh.log.k, np.arange(7, 31))
        assert beh.state.k == 31

    def test_data_system_identity(self):
        prep = prepared("rot_tracking")
        aug = prep.setup.aug
        beh = collect(prep, x0=[1.0, -2.0])
        pred = beh.r @ aug.underA.T + beh.log.ubar @ aug.barB.T + beh.log.theta @ aug.barG.T
        assert np.max(np.abs(beh.r_next - pred)) <= 1e-10
        np.testing.assert_allclose(beh.log.y, beh.r @ aug.barC.T, atol=1e-12)

    def test_deadbeat_reconstruction_from_zero(self):
        prep = prepared("rot_tracking")
        beh = collect(prep, k0=0)
        assert np.max(np.abs(beh.r - beh.log.zeta @ prep.param.Mbar.T)) <= 1e-8

    def test_reference_theta(self):
        prep = prepared("rot_tracking")
        beh = collect(prep, theta_source="reference", xd0=[1.0, 0.0], k0=0, kf=50)
        np.testing.assert_allclose(beh.log.theta[:, 0], np.cos(0.3 * np.arange(51)), atol=1e-12)

    def test_unstable_behavior_aborts(self):
        prep = prepared("rot_tracking")
        with pytest.raises(InstabilityError):
            collect(prep, K_o0=np.zeros_like(prep.K_o0), kf=2000)

    def test_bad_window(self):
        with pytest.raises(ValueError):
            collect(prepared("scalar_step"), k0=20, kf=20)


class TestRegressors:
    def test_column_count(self):
        assert rl.unknown_count(12, 1, 1) == 78 + 12 + 1 + 12 + 1 + 1 == 105
        assert rl.unknown_count(6, 1, 1) == 36

    def test_oracle_kernels_balance_every_row(self):
        prep = prepared("rot_tracking")
        beh = collect(prep, k0=0)
        for K_o in (prep.K_o0, prep.K_o_oracle):
            reg = rl.assemble_regressors(beh.log, K_o, prep.cfg.weights)
            v = oracle_for(prep, K_o).to_vector()
            scale = max(1.0, np.max(np.abs(reg.nu)))
            assert np.max(np.abs(reg.rho @ v - reg.nu)) <= 1e-8 * scale
            assert reg.rho.shape == (len(beh.log), 105)

    def test_layout_spans(self):
        layout = rl.column_layout(12, 1, 1)
        assert [layout[k].stop - layout[k].start for k in rl.KERNEL_NAMES] == [78, 12, 1, 12, 1, 1]

    def test_zero_log(self):
        prep = prepared("rot_tracking")
        beh = collect(prep, excitation=QUIET, kf=200)
        reg = rl.assemble_regressors(beh.log, prep.K_o0, prep.cfg.weights)
        assert not reg.rho.any() and not reg.nu.any()

    def test_too_few_samples(self):
        prep = prepared("rot_tracking")
        beh = collect(prep, kf=50)
        with pytest.raises(RankConditionError):
            rl.assemble_regressors(beh.log, prep.K_o0, prep.cfg.weights)


class TestRankCondition:
    def test_rich_excitation(self):
        chk = rl.check_rank_condition(collect(prepared("rot_tracking")).log)
        assert chk.ok and chk.rank == chk.required == 105

    def test_no_excitation(self):
        chk = rl.check_rank_condition(collect(prepared("rot_tracking"), excitation=QUIET, x0=[1, 1]).log)
        assert not chk.ok and chk.rank < chk.required // 2

    def test_duplicates_do_not_add_rank(self):
        log = collect(prepared("rot_tracking"), kf=80).log
        doubled = log.subset(np.r_[np.arange(len(log)), np.arange(len(log))])
        assert rl.check_rank_condition(doubled).rank == rl.check_rank_condition(log).rank

    def test_accepts_regressor_system(self):
        prep = prepared("scalar_step")
        reg = rl.assemble_regressors(collect(prep).log, prep.K_o0, prep.cfg.weights)
        assert rl.check_rank_condition(reg).ok


class TestDirectSolver:
    def test_matches_oracle(self):
        prep = prepared("rot_tracking")
        log = collect(prep, k0=0).log
        reg = rl.assemble_regressors(log, prep.K_o0, prep.cfg.weights)
        assert unique_rel_err(rl.solve_kernels_direct(reg), oracle_for(prep, prep.K_o0)) <= 1e-6

    def test_scalar_first_iterate_L2(self):
        prep = prepared("scalar_step")
        reg = rl.assemble_regressors(collect(prep).log, prep.K_o0, prep.cfg.weights)
        aug = prep.setup.aug
        P0 = la.solve_stein(aug.closed_loop(prep.oracle.K0),
                            aug.state_weight(prep.cfg.weights) + prep.oracle.K0.T @ prep.oracle.K0)
        assert rl.solve_kernels_direct(reg).L_2[0, 0] == pytest.approx((aug.barB.T @ P0 @ aug.barB)[0, 0], rel=1e-8)

    def test_duplicate_samples_same_solution(self):
        prep = prepared("scalar_step")
        log = collect(prep).log
        doubled = log.subset(np.r_[np.arange(len(log)), np.arange(len(log))])
        a = rl.solve_kernels_direct(rl.assemble_regressors(log, prep.K_o0, prep.cfg.weights))
        b = rl.solve_kernels_direct(rl.assemble_regressors(doubled, prep.K_o0, prep.cfg.weights))
        np.testing.assert_allclose(a.to_vector(), b.to_vector(), rtol=1e-9, atol=1e-12)

    def test_refuses_without_rank(self):
        prep = prepared("rot_tracking")
        log = collect(prep, excitation=rl.ExcitationSpec(n_sines=1, noise_amp=0.0), kf=300).log
        reg = rl.assemble_regressors(log, prep.K_o0, prep.cfg.weights)
        with pytest.raises(RankConditionError):
            rl.solve_kernels_direct(reg)


def _identity_system(nu):
    n = nu.size
    log = rl.DataLog(k=np.arange(n), zeta=np.zeros((n, 1)), zeta_next=np.zeros((n, 1)), ubar=np.zeros((n, 0)),
                     theta=np.zeros((n, 0)), y=np.zeros((n, 0)))
    return rl.RegressorSystem(rho=np.eye(n), nu=nu, column_layout={"L_P": slice(0, n)}, log=log,
                              K_o=np.zeros((0, 1)))


class TestGradientSolver:
    def test_identity_system(self):
        nu = np.array([2.0])
        for accelerate in (True, False):
            reg = _identity_system(nu)
            reg.column_layout = rl.column_layout(1, 0, 0)
            kern = rl.solve_kernels_gradient(reg, eps_fraction=0.5, tol=1e-12, accelerate=accelerate, check=False)
            assert kern.L_P[0, 0] == pytest.approx(2.0, rel=1e-12)

    def test_step_guard(self):
        prep = prepared("scalar_step")
        reg = rl.assemble_regressors(collect(prep).log, prep.K_o0, prep.cfg.weights)
        rl.solve_kernels_gradient(reg, eps_fraction=0.99)
        for bad in (1.01, 1.0, 0.0, -0.5):
            with pytest.raises(ValueError, match="eps_fraction"):
                rl.solve_kernels_gradient(reg, eps_fraction=bad)

    def test_agrees_with_direct(self):
        prep = prepared("rot_tracking")
        reg = rl.assemble_regressors(collect(prep).log, prep.K_o0, prep.cfg.weights)
        g = rl.solve_kernels_gradient(reg)
        d = rl.solve_kernels_direct(reg)
        assert unique_rel_err(g, d) <= 1e-6
        assert g.info["error_bound"] <= 1e-6 * np.linalg.norm(g.to_vector())

    def test_plain_loop_matches_doubling(self, rng):
        # three filter states, no channels: six unknowns, all in L_P
        A = rng.standard_normal((30, 6))
        truth = np.array([1.0, -2.0, 0.5, 3.0, 0.0, -1.0])
        reg = _identity_system(np.zeros(30))
        reg.rho, reg.nu = A, A @ truth
        reg.log.zeta = reg.log.zeta_next = np.zeros((30, 3))
        reg.column_layout = rl.column_layout(3, 0, 0)
        kw = {"tol": 1e-10, "check": False}
        a = rl.solve_kernels_gradient(reg, accelerate=False, **kw)
        b = rl.solve_kernels_gradient(reg, accelerate=True, **kw)
        assert a.info["steps"] > b.info["steps"].bit_length()
        np.testing.assert_allclose(a.info["eps"], b.info["eps"])
        np.testing.assert_allclose(a.to_vector(), truth, atol=1e-8)
        np.testing.assert_allclose(b.to_vector(), truth, atol=1e-8)

    def test_max_steps(self):
        prep = prepared("rot_tracking")
        reg = rl.assemble_regressors(collect(prep).log, prep.K_o0, prep.cfg.weights)
        with pytest.raises(ConvergenceError):
            rl.solve_kernels_gradient(reg, max_s=64)


class TestPolicyUpdate:
    def test_zero_L1(self):
        kern = rl.LearnedKernels(L_P=np.eye(2), L_1=np.zeros((2, 1)), L_2=np.eye(1), L_3=np.zeros((2, 1)),
                                 L_4=np.zeros((1, 1)), L_5=np.eye(1))
        np.testing.assert_array_equal(rl.policy_update(kern, [[1.0]]), 0)

    def test_model_kernels_give_hewer_step(self):
        prep = prepared("rot_tracking")
        hew = prep.oracle.hewer
        for it, nxt in zip(hew.iterates, hew.iterates[1:]):
            K_o = it.K @ prep.param.Mbar
            K_next = rl.policy_update(oracle_for(prep, K_o), prep.cfg.weights.Rbar)
            np.testing.assert_allclose(K_next, nxt.K @ prep.param.Mbar, rtol=1e-8, atol=1e-10)

    def test_not_positive_definite(self):
        kern = rl.LearnedKernels(L_P=np.eye(1), L_1=np.ones((1, 1)), L_2=-2 * np.eye(1), L_3=np.zeros((1, 1)),
                                 L_4=np.zeros((1, 1)), L_5=np.eye(1))
        with pytest.raises(PolicyUpdateError):
            rl.policy_update(kern, [[1.0]])


def run_learn(prep, **kw):
    cfg = prep.cfg
    return rl.learn(prep.setup, prep.spec, cfg.excitation, prep.K_o0, cfg.k0, cfg.kf, x0=cfg.x0, xd0=cfg.xd0, **kw)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestLearn:
    def test_scalar_step(self):
        prep = prepared("scalar_step")
        res = run_learn(prep)
        assert res.converged and rel(res.K_o_star, prep.K_o_oracle) <= 1e-4

    def test_rot_tracking(self):
        prep = prepared("rot_tracking")
        res = run_learn(prep)
        assert res.converged and rel(res.K_o_star, prep.K_o_oracle) <= 1e-3
        # monotone until the error reaches round-off, where it only jitters
        errs = [rel(r.K_o_next, prep.K_o_oracle) for r in res.trace]
        assert all(b <= a for a, b in zip(errs, errs[1:]) if a > 1e-9)

    def test_deterministic(self):
        prep = prepared("rot_tracking")
        a, b = run_learn(prep), run_learn(prep)
        assert len(a.trace) == len(b.trace)
        for x, y in zip(a.trace, b.trace):
            np.testing.assert_array_equal(x.K_o_next, y.K_o_next)

    def test_off_policy_reuses_log(self):
        prep = prepared("scalar_step")
        res = run_learn(prep)
        K_o, trace, _ = rl.iterate_policy(res.log, prep.K_o0, prep.cfg.weights)
        np.testing.assert_array_equal(K_o, res.K_o_star)
        assert len(trace) == len(res.trace)

    def test_non_convergence(self):
        prep = prepared("rot_tracking")
        with pytest.raises(ConvergenceError):
            run_learn(prep, max_iter=2)
        assert not run_learn(prep, max_iter=2, strict=False).converged

    def test_rank_failure(self):
        prep = prepared("rot_tracking")
        with pytest.raises(RankConditionError):
            rl.learn(prep.setup, prep.spec, rl.ExcitationSpec(n_sines=1, noise_amp=0.0), prep.K_o0, 10, 300)


class TestDeploy:
    def test_zero_reference_zero_state(self):
        prep = prepared("rot_tracking")
        state = rl.LoopState.initial(prep.setup, prep.spec)
        dep = rl.deploy(prep.setup, state, prep.K_o_oracle, 100)
        np.testing.assert_array_equal(dep.ye, 0)

    def test_scalar_settles(self):
        prep = prepared("scalar_step")
        res = run_learn(prep)
        dep = rl.deploy(prep.setup, res.behavior.state, res.K_o_star, 300)
        assert dep.trailing_max(50) <= 1e-3 * dep.initial_error
        assert dep.k[0] == prep.cfg.kf + 1

    def test_sinusoid_envelope_rate(self):
        prep = prepared("rot_tracking")
        res = run_learn(prep)
        rho = la.spectral_radius(prep.setup.aug.closed_loop(prep.oracle.K_star))
        dep = rl.deploy(prep.setup, res.behavior.state, res.K_o_star, 120)
        env = np.abs(dep.ye[:, 0])
        early, late = np.max(env[10:30]), np.max(env[50:70])
        assert late <= early * (rho + 0.05) ** 40
        np.testing.assert_allclose(dep.y[-20:, 0], dep.yd[-20:, 0], atol=1e-6)

    def test_carries_state(self):
        prep = prepared("scalar_step")
        res = run_learn(prep)
        before = res.behavior.state.copy()
        dep = rl.deploy(prep.setup, res.behavior.state, res.K_o_star, 1)
        np.testing.assert_allclose(dep.y[0], prep.setup.plant.C @ before.x)


class TestOracleHelpers:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_gain_roundtrip(self, seed):
        prep = prepared("rot_tracking")
        K = np.random.default_rng(seed).standard_normal((1, 4))
        np.testing.assert_allclose(rl.state_gain_from_output_gain(K @ prep.param.Mbar, prep.param.Mbar), K,
                                   atol=1e-9)

    def test_oracle_kernel_P_matches_hewer(self):
        prep = prepared("scalar_step")
        kern = rl.oracle_kernels(prep.setup, prep.param, prep.oracle.K_star)
        np.testing.assert_allclose(kern.info["P"], prep.oracle.P_star, rtol=1e-10)
        np.testing.assert_allclose(kern.L_P, prep.param.Mbar.T @ prep.oracle.P_star @ prep.param.Mbar, rtol=1e-10)
