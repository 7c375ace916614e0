import math

import numpy as np
import pytest
import scipy.linalg as sla

from sirpdoa import clutter as cl
from sirpdoa.clutter import (
    ClutterModel,
    TextureFamily,
    TextureKind,
    sample_clutter,
    speckle_template,
)
from sirpdoa.estimators import (
    EstimatorConfig,
    RankDeficiencyError,
    _joint_texture_mode,
    estimate_amplitudes,
    estimate_gaussian_ml,
    estimate_marginal_ml,
    estimate_texture_weighted,
    marginal_angle_objective,
    marginal_log_likelihood,
    minimize_angles,
    music_scm,
    solve_texture,
    update_speckle,
    whitened_residual_norm_sq,
)
from sirpdoa.model import (
    Scene,
    half_wavelength_ula,
    signal_block,
    steering_matrix,
    synthesize,
    virtual_steering,
)
from sirpdoa.specfun import integrate_halfline


def hermitian_inv_sqrt(sigma):
    w, u = np.linalg.eigh(sigma)
    return (u * w ** -0.5) @ u.conj().T


def random_sigma(rng, mn):
    x = rng.normal(size=(mn, 2 * mn)) + 1j * rng.normal(size=(mn, 2 * mn))
    s = x @ x.conj().T / (2 * mn)
    return 0.5 * (s + s.conj().T) + 0.1 * np.eye(mn)


@pytest.fixture
def noiseless_obs(geom, scene):
    return synthesize(geom, scene, np.zeros((scene.pulses, 12)))


class TestWhitenedResidual:
    def test_in_span_is_zero(self, geom, scene):
        a = steering_matrix(geom, scene)
        z = a @ np.array([1.0 + 2j, 3.0 - 1j])
        val = whitened_residual_norm_sq(geom, scene.angle_pairs, np.eye(12), z)
        assert val < 1e-10

    def test_square_full_rank_annihilates(self):
        geom = half_wavelength_ula(1, 2)
        pairs = np.array([[0.0, -0.5], [0.0, 0.7]])
        rng = np.random.default_rng(20)
        z = rng.normal(size=2) + 1j * rng.normal(size=2)
        val = whitened_residual_norm_sq(geom, pairs, np.eye(2), z)
        assert val < 1e-10 * np.linalg.norm(z) ** 2

    def test_whitening_factor_invariance(self, geom, scene):
        rng = np.random.default_rng(21)
        sigma = random_sigma(rng, 12)
        z = rng.normal(size=12) + 1j * rng.normal(size=12)
        via_op = whitened_residual_norm_sq(geom, scene.angle_pairs, sigma, z)
        # Hermitian-root reference computed from scratch.
        w = hermitian_inv_sqrt(sigma)
        aw = w @ steering_matrix(geom, scene)
        zw = w @ z
        p = aw @ np.linalg.solve(aw.conj().T @ aw, aw.conj().T)
        ref = np.linalg.norm(zw - p @ zw) ** 2
        assert via_op == pytest.approx(ref, abs=1e-10 * max(ref, 1.0))

    def test_rank_deficiency(self, geom):
        pairs = np.array([[0.3, 0.2], [0.3, 0.2]])
        z = np.ones(12, dtype=complex)
        with pytest.raises(RankDeficiencyError):
            whitened_residual_norm_sq(geom, pairs, np.eye(12), z)


class TestAmplitudes:
    def test_exact_recovery(self, geom, scene):
        a = steering_matrix(geom, scene)
        v = np.array([2.0 - 1j, 0.5 + 0.25j])
        z = a @ v
        out = estimate_amplitudes(geom, scene.angle_pairs, np.eye(12), z)
        assert np.allclose(out, v, atol=1e-10)

    def test_orthogonal_snapshot_gives_zero(self, geom, scene):
        a = steering_matrix(geom, scene)
        rng = np.random.default_rng(22)
        z = rng.normal(size=12) + 1j * rng.normal(size=12)
        p = a @ np.linalg.solve(a.conj().T @ a, a.conj().T)
        z_perp = z - p @ z
        out = estimate_amplitudes(geom, scene.angle_pairs, np.eye(12), z_perp)
        assert np.max(np.abs(out)) < 1e-10

    def test_matches_dense_normal_equations(self, geom, scene):
        rng = np.random.default_rng(23)
        sigma = random_sigma(rng, 12)
        z = rng.normal(size=12) + 1j * rng.normal(size=12)
        out = estimate_amplitudes(geom, scene.angle_pairs, sigma, z)
        w = hermitian_inv_sqrt(sigma)
        aw = w @ steering_matrix(geom, scene)
        ref = np.linalg.inv(aw.conj().T @ aw) @ aw.conj().T @ (w @ z)
        assert np.allclose(out, ref, atol=1e-9)

    def test_residual_orthogonal_to_columns(self, geom, scene):
        rng = np.random.default_rng(24)
        sigma = random_sigma(rng, 12)
        z = rng.normal(size=12) + 1j * rng.normal(size=12)
        v = estimate_amplitudes(geom, scene.angle_pairs, sigma, z)
        w = hermitian_inv_sqrt(sigma)
        aw = w @ steering_matrix(geom, scene)
        resid = w @ z - aw @ v
        assert np.linalg.norm(aw.conj().T @ resid) < 1e-9 * np.linalg.norm(w @ z)


class TestMarginalObjective:
    def test_noiseless_single_target_grid_minimum(self, texture_t):
        geom = half_wavelength_ula(2, 2)
        scene = Scene(dod=[np.deg2rad(10.0)], doa=[np.deg2rad(-20.0)],
                      rcs=[1 + 1j], doppler=[0.2], pulses=6,
                      snapshots_per_pulse=2)
        obs = synthesize(geom, scene, np.zeros((6, 4)))
        grid = np.deg2rad(np.arange(-89.0, 89.5, 1.0))
        best = None
        for d in grid:
            for r in grid:
                val = marginal_angle_objective(
                    geom, np.array([[d, r]]), np.eye(4), texture_t, obs)
                if best is None or val < best[0]:
                    best = (val, d, r)
        assert math.degrees(best[1]) == pytest.approx(10.0, abs=1e-9)
        assert math.degrees(best[2]) == pytest.approx(-20.0, abs=1e-9)

    def test_constant_offset_against_kernel_sum(self, geom, scene, texture_t):
        rng = np.random.default_rng(25)
        cm = ClutterModel(texture_t, 0.3 * speckle_template(12))
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        sigma = random_sigma(rng, 12)
        offsets = []
        for _ in range(10):
            pairs = rng.uniform(-1.2, 1.2, size=(2, 2))
            obj = marginal_angle_objective(geom, pairs, sigma, texture_t, obs)
            from sirpdoa.estimators import _amplitudes_block, _residual_sq_block
            try:
                v = _amplitudes_block(geom, pairs, sigma, obs.snapshots)
            except RankDeficiencyError:
                continue
            rho = _residual_sq_block(geom, pairs, v, sigma, obs.snapshots)
            kern = np.sum(cl.log_marginal_kernel(rho, texture_t, 12))
            # t family: kernel sum = -(mn + a) * objective + constant
            offsets.append(kern + (12 + texture_t.shape) * obj)
        offsets = np.array(offsets)
        assert np.max(np.abs(offsets - offsets[0])) < 1e-9 * max(
            1.0, np.abs(offsets[0]))

    def test_large_scale_flattens(self, geom, scene, texture_t):
        rng = np.random.default_rng(26)
        cm = ClutterModel(texture_t, speckle_template(12))
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        tex = texture_t.with_params(texture_t.shape, 1e12)
        vals = []
        for _ in range(5):
            pairs = rng.uniform(-1.2, 1.2, size=(2, 2))
            vals.append(marginal_angle_objective(geom, pairs, np.eye(12),
                                                 tex, obs))
        # Each term approaches ln(b): differences vanish.
        assert np.ptp(vals) < 1e-6 * abs(np.mean(vals))


class TestMinimizeAngles:
    def test_quadratic_bowl(self):
        cfg = EstimatorConfig(coarse_grid_step=4.0, refine_tol=0.01)
        target = np.array([[np.deg2rad(12.3), np.deg2rad(-41.7)]])

        def objective(pairs):
            return float(np.sum((np.asarray(pairs) - target) ** 2))

        pairs, flags = minimize_angles(objective, cfg, 1)
        assert np.max(np.abs(np.rad2deg(pairs - target))) < 0.01

    def test_two_target_noiseless(self, geom, scene, texture_t, noiseless_obs):
        from sirpdoa.estimators import _AngleObjective, _marginal_cost
        cfg = EstimatorConfig()
        obj = _AngleObjective(geom, np.eye(12), noiseless_obs,
                              _marginal_cost(texture_t, 12))
        pairs, flags = minimize_angles(obj, cfg, 2)
        err = np.rad2deg(np.sort(pairs, axis=0) - np.sort(scene.angle_pairs, axis=0))
        assert np.max(np.abs(err)) < cfg.refine_tol

    def test_eval_budget(self):
        cfg = EstimatorConfig(coarse_grid_step=5.0, refine_tol=0.05)
        count = 0
        target = np.array([[0.1, -0.2]])

        def objective(pairs):
            nonlocal count
            count += 1
            return float(np.sum((np.asarray(pairs) - target) ** 2))

        minimize_angles(objective, cfg, 1)
        grid_points = np.arange(-89.0, 89.0 + 1e-9, 5.0).size ** 2
        assert count <= 2 * 1 * (grid_points + 200)

    def test_initial_never_worsens(self, geom, scene, texture_t, noiseless_obs):
        from sirpdoa.estimators import _AngleObjective, _marginal_cost
        cfg = EstimatorConfig()
        obj = _AngleObjective(geom, np.eye(12), noiseless_obs,
                              _marginal_cost(texture_t, 12))
        initial = scene.angle_pairs
        pairs, _ = minimize_angles(obj, cfg, 2, initial=initial)
        assert obj(pairs) <= obj(initial) + 1e-9


class TestUpdateSpeckle:
    def test_single_pulse_rank_one(self, geom, texture_t):
        scene = Scene(dod=[0.2], doa=[0.1], rcs=[1.0], doppler=[0.0],
                      pulses=1, snapshots_per_pulse=1)
        rng = np.random.default_rng(27)
        z = rng.normal(size=(1, 12)) + 1j * rng.normal(size=(1, 12))
        obs = synthesize(geom, scene, z)
        cfg = EstimatorConfig()
        v = np.zeros((1, 1), dtype=complex)
        sigma, flags = update_speckle(geom, scene.angle_pairs, v, texture_t,
                                      obs, cfg, np.eye(12))
        assert np.trace(sigma).real == pytest.approx(12.0, abs=1e-9)
        assert np.all(np.linalg.eigvalsh(sigma) > 0)

    def test_monte_carlo_consistency(self, geom, scene, texture_k):
        # Residuals are exact clutter draws; the fixed point should land
        # near the true (normalized) speckle shape.
        cfg = EstimatorConfig(sigma_fixed_point_iters=40,
                              sigma_fixed_point_tol=1e-6)
        big_scene = Scene(dod=scene.dod, doa=scene.doa, rcs=(0.0, 0.0),
                          doppler=scene.doppler, pulses=500,
                          snapshots_per_pulse=scene.snapshots_per_pulse)
        cov = 0.7 * speckle_template(12)
        cm = ClutterModel(texture_k, cov)
        rng = np.random.default_rng(28)
        obs = synthesize(geom, big_scene, sample_clutter(cm, 500, rng))
        v = np.zeros((500, 2), dtype=complex)
        sigma, _ = update_speckle(geom, big_scene.angle_pairs, v, texture_k,
                                  obs, cfg, np.eye(12))
        target = 12.0 * cov / np.trace(cov).real
        assert (np.linalg.norm(sigma - target) / np.linalg.norm(target)) < 0.10

    def test_constant_weight_hook(self, geom, scene, texture_k, monkeypatch):
        rng = np.random.default_rng(29)
        cm = ClutterModel(texture_k, speckle_template(12))
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        from sirpdoa import estimators as est_mod
        v = est_mod._amplitudes_block(geom, scene.angle_pairs, np.eye(12),
                                      obs.snapshots)
        cfg = EstimatorConfig(sigma_fixed_point_iters=1)
        results = []
        for c in (0.5, 3.0):
            monkeypatch.setattr(est_mod._cl, "residual_weight",
                                lambda rho, tex, mn, c=c: np.full_like(
                                    np.asarray(rho, dtype=float), c))
            sigma, _ = update_speckle(geom, scene.angle_pairs, v, texture_k,
                                      obs, cfg, np.eye(12))
            results.append(sigma)
        assert np.allclose(results[0], results[1], atol=1e-10)
        a = steering_matrix(geom, scene)
        resid = obs.snapshots.T - a @ v.T
        scatter = resid @ resid.conj().T / scene.pulses
        from sirpdoa.estimators import _condition_floor
        expect = _condition_floor(12.0 * scatter / np.trace(scatter).real, set())
        assert np.allclose(results[0], expect, atol=1e-8)


class TestSolveTexture:
    def test_root_contract_and_bracket(self, geom, scene, texture_k):
        rng = np.random.default_rng(30)
        cm = ClutterModel(texture_k, 0.2 * speckle_template(12))
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        cfg = EstimatorConfig()
        from sirpdoa.estimators import _amplitudes_block
        sigma = np.eye(12, dtype=complex)
        v = _amplitudes_block(geom, scene.angle_pairs, sigma, obs.snapshots)
        a_hat, b_hat, flags = solve_texture(geom, scene.angle_pairs, v, sigma,
                                            obs, texture_k, cfg)
        from sirpdoa.estimators import _residual_sq_block
        rho = _residual_sq_block(geom, scene.angle_pairs, v, sigma,
                                 obs.snapshots)
        res_a = np.sum(cl.shape_score(rho, texture_k.with_params(a_hat, texture_k.scale), 12))
        res_b = np.sum(cl.scale_score(rho, texture_k.with_params(a_hat, b_hat), 12))
        assert abs(res_a) < cfg.root_tol
        assert abs(res_b) < cfg.root_tol
        # bracket property: the score sums change sign around the roots
        for fn, root in [(lambda x: np.sum(cl.shape_score(
                rho, texture_k.with_params(x, texture_k.scale), 12)), a_hat),
                (lambda x: np.sum(cl.scale_score(
                    rho, texture_k.with_params(a_hat, x), 12)), b_hat)]:
            lo, hi = 0.9 * root, 1.1 * root
            assert np.sign(fn(lo)) != np.sign(fn(hi))

    def test_monte_carlo_consistency_t(self, geom, texture_t):
        # 500 pulses of pure t clutter at a known power factor: the shape
        # should come back near truth and the scale near power * truth.
        power = 0.35
        scene = Scene(dod=[0.3, 0.8], doa=[0.35, 0.7], rcs=(0.0, 0.0),
                      doppler=(0.3, 0.8), pulses=500, snapshots_per_pulse=5)
        cm = ClutterModel(texture_t, power * speckle_template(12))
        rng = np.random.default_rng(31)
        obs = synthesize(geom, scene, sample_clutter(cm, 500, rng))
        cfg = EstimatorConfig()
        sigma = speckle_template(12)  # normalized shape (trace 12)
        v = np.zeros((500, 2), dtype=complex)
        a_hat, b_hat, flags = solve_texture(geom, scene.angle_pairs, v, sigma,
                                            obs, texture_t, cfg)
        assert a_hat == pytest.approx(texture_t.shape, rel=0.15)
        assert b_hat == pytest.approx(power * texture_t.scale, rel=0.15)


class TestMarginalLogLikelihood:
    def test_block_doubling_additivity(self, geom, scene, texture_k):
        rng = np.random.default_rng(32)
        cm = ClutterModel(texture_k, speckle_template(12))
        from sirpdoa.model import ObservationBlock
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        sigma = random_sigma(rng, 12)
        from sirpdoa.estimators import _amplitudes_block
        v = _amplitudes_block(geom, scene.angle_pairs, sigma, obs.snapshots)
        ll1 = marginal_log_likelihood(geom, scene.angle_pairs, v, sigma,
                                      texture_k, obs)
        obs2 = ObservationBlock(np.vstack([obs.snapshots, obs.snapshots]))
        v2 = np.vstack([v, v])
        ll2 = marginal_log_likelihood(geom, scene.angle_pairs, v2, sigma,
                                      texture_k, obs2)
        assert ll2 == pytest.approx(2 * ll1, rel=1e-12)

    def test_t_family_scale_identifiability(self, geom, scene, texture_t):
        rng = np.random.default_rng(33)
        cm = ClutterModel(texture_t, speckle_template(12))
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        sigma = random_sigma(rng, 12)
        from sirpdoa.estimators import _amplitudes_block
        v = _amplitudes_block(geom, scene.angle_pairs, sigma, obs.snapshots)
        c = 3.7
        ll = marginal_log_likelihood(geom, scene.angle_pairs, v, sigma,
                                     texture_t, obs)
        ll_scaled = marginal_log_likelihood(
            geom, scene.angle_pairs, v, c * sigma,
            texture_t.with_params(texture_t.shape, texture_t.scale / c), obs)
        assert ll_scaled == pytest.approx(ll, rel=1e-12)

    def test_against_quadrature_oracle(self, geom, scene, texture_k):
        rng = np.random.default_rng(34)
        cm = ClutterModel(texture_k, speckle_template(12))
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        sigma = 0.5 * speckle_template(12)
        from sirpdoa.estimators import _amplitudes_block, _residual_sq_block
        v = _amplitudes_block(geom, scene.angle_pairs, sigma, obs.snapshots)
        ll = marginal_log_likelihood(geom, scene.angle_pairs, v, sigma,
                                     texture_k, obs)
        rho = _residual_sq_block(geom, scene.angle_pairs, v, sigma,
                                 obs.snapshots)
        a, b = texture_k.shape, texture_k.scale
        kern = 0.0
        for r in rho:
            val = integrate_halfline(
                lambda t: np.exp(-r / t - t / b + (a - 12 - 1) * np.log(t)
                                 - math.lgamma(a) - a * math.log(b)))
            kern += math.log(val)
        sign, logdet = np.linalg.slogdet(sigma)
        expect = -15 * 12 * math.log(math.pi) - 15 * logdet + kern
        assert ll == pytest.approx(expect, rel=1e-5)


class TestEstimators:
    def test_marginal_noiseless_first_iteration(self, geom, scene,
                                                noiseless_obs):
        cfg = EstimatorConfig()
        for kind in (TextureKind.K_DISTRIBUTED, TextureKind.T_DISTRIBUTED):
            res = estimate_marginal_ml(noiseless_obs, geom, kind, 2, cfg)
            err = np.rad2deg(res.theta_at(1)) - np.rad2deg(scene.angle_pairs)
            assert np.max(np.abs(err)) < cfg.refine_tol

    def test_marginal_ll_trace_monotone(self, geom, scene, texture_k):
        cfg = EstimatorConfig()
        cm = ClutterModel(texture_k, 0.11 * speckle_template(12))
        for seed in range(8):
            rng = np.random.default_rng(100 + seed)
            obs = synthesize(geom, scene,
                             sample_clutter(cm, scene.pulses, rng))
            res = estimate_marginal_ml(obs, geom, TextureKind.K_DISTRIBUTED,
                                       2, cfg)
            assert np.all(np.diff(res.ll_trace) >= -1e-6)

    def test_sigma_trace_invariant(self, geom, scene, texture_k):
        cfg = EstimatorConfig(max_outer_iters=3)
        cm = ClutterModel(texture_k, 0.11 * speckle_template(12))
        rng = np.random.default_rng(200)
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        res = estimate_marginal_ml(obs, geom, TextureKind.K_DISTRIBUTED, 2, cfg)
        for s in res.sigma_hat:
            assert np.trace(s).real == pytest.approx(12.0, abs=1e-9)

    def test_gaussian_white_noiseless(self, geom, scene, noiseless_obs):
        cfg = EstimatorConfig()
        res = estimate_gaussian_ml(noiseless_obs, geom, 2, cfg,
                                   iterative=False)
        err = np.rad2deg(res.theta_at(1)) - np.rad2deg(scene.angle_pairs)
        assert np.max(np.abs(err)) < cfg.refine_tol

    def test_gaussian_white_scale_invariance(self, geom, scene, texture_k):
        from sirpdoa.model import ObservationBlock
        cfg = EstimatorConfig()
        cm = ClutterModel(texture_k, 0.11 * speckle_template(12))
        rng = np.random.default_rng(35)
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        res1 = estimate_gaussian_ml(obs, geom, 2, cfg, iterative=False)
        res2 = estimate_gaussian_ml(ObservationBlock(5.0 * obs.snapshots),
                                    geom, 2, cfg, iterative=False)
        assert np.allclose(res1.theta_at(1), res2.theta_at(1), atol=1e-12)

    def test_weighted_first_iteration_matches_gaussian(self, geom, scene,
                                                       texture_k):
        # Unit initial textures and identity covariance: the first angle
        # fit coincides with the iterative-Gaussian first fit.
        cfg = EstimatorConfig(max_outer_iters=1)
        cm = ClutterModel(texture_k, 0.11 * speckle_template(12))
        rng = np.random.default_rng(36)
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        r_cond = estimate_texture_weighted(obs, geom,
                                           TextureKind.K_DISTRIBUTED, 2, cfg,
                                           mode="conditional")
        r_gauss = estimate_gaussian_ml(obs, geom, 2, cfg, iterative=True)
        assert np.allclose(r_cond.theta_at(1), r_gauss.theta_at(1),
                           atol=1e-12)

    def test_weighted_invalid_mode(self, geom, noiseless_obs):
        with pytest.raises(ValueError):
            estimate_texture_weighted(noiseless_obs, geom,
                                      TextureKind.K_DISTRIBUTED, 2,
                                      EstimatorConfig(), mode="other")

    @pytest.mark.parametrize("family", [TextureKind.K_DISTRIBUTED,
                                        TextureKind.T_DISTRIBUTED])
    def test_joint_texture_mode_is_stationary(self, family):
        # The per-pulse joint log-density derivative vanishes at the mode.
        a, b, mn = 1.7, 3.0, 12
        for rho_sq in (0.5, 4.0, 90.0):
            tau = float(_joint_texture_mode(np.array([rho_sq]), family, a, b,
                                            mn)[0])

            def logp(t):
                if family is TextureKind.T_DISTRIBUTED:
                    prior = -(a + 1) * math.log(t) - b / t
                else:
                    prior = (a - 1) * math.log(t) - t / b
                return -rho_sq / t - mn * math.log(t) + prior

            h = 1e-7 * tau
            deriv = (logp(tau + h) - logp(tau - h)) / (2 * h)
            # scale-free stationarity: slope times tau is in rounding noise
            assert abs(deriv) * tau < 1e-6

    def test_weighted_argmin_weight_scale_invariance(self, geom, scene,
                                                     texture_k):
        # Scaling every per-pulse weight by one constant cannot change the
        # angle fit: the cost is linear in the weights.
        from sirpdoa.estimators import _AngleObjective, _ls_cost
        cm = ClutterModel(texture_k, 0.11 * speckle_template(12))
        rng = np.random.default_rng(37)
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        cfg = EstimatorConfig()
        w = rng.uniform(0.5, 2.0, size=scene.pulses)
        obj1 = _AngleObjective(geom, np.eye(12), obs, _ls_cost(w))
        obj2 = _AngleObjective(geom, np.eye(12), obs, _ls_cost(7.3 * w))
        p1, _ = minimize_angles(obj1, cfg, 2)
        p2, _ = minimize_angles(obj2, cfg, 2)
        assert np.allclose(p1, p2, atol=1e-10)

    def test_projector_algebra(self, geom, scene):
        rng = np.random.default_rng(38)
        sigma = random_sigma(rng, 12)
        w = hermitian_inv_sqrt(sigma)
        aw = w @ steering_matrix(geom, scene)
        p = np.eye(12) - aw @ np.linalg.solve(aw.conj().T @ aw, aw.conj().T)
        assert np.linalg.norm(p - p.conj().T) < 1e-10
        assert np.linalg.norm(p @ p - p) < 1e-10
        assert np.linalg.norm(p @ aw) < 1e-10


class TestMusic:
    def test_noiseless_exact(self, geom, scene, noiseless_obs):
        pairs, flags = music_scm(noiseless_obs, geom, 2, 1.0)
        got = np.rad2deg(pairs[np.argsort(pairs[:, 0])])
        assert np.allclose(got, [[18.0, 20.0], [45.0, 40.0]], atol=1e-9)

    def test_scale_invariance(self, geom, scene, texture_k):
        from sirpdoa.model import ObservationBlock
        cm = ClutterModel(texture_k, 0.11 * speckle_template(12))
        rng = np.random.default_rng(39)
        obs = synthesize(geom, scene, sample_clutter(cm, scene.pulses, rng))
        p1, _ = music_scm(obs, geom, 2, 1.0)
        p2, _ = music_scm(ObservationBlock(5.0 * obs.snapshots), geom, 2, 1.0)
        assert np.allclose(p1, p2, atol=1e-12)

    def test_requires_enough_pulses(self, geom):
        from sirpdoa.estimators import EstimatorError
        from sirpdoa.model import ObservationBlock
        obs = ObservationBlock(np.ones((1, 12), dtype=complex))
        with pytest.raises(EstimatorError):
            music_scm(obs, geom, 2, 1.0)
