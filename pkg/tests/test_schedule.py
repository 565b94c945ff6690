"""Noise-schedule correctness against closed forms and Monte-Carlo oracles."""

import math

import numpy as np
import pytest

from triplane_diffusion import schedule as sch


def _simulate_forward_chain(x0, sched, t_stop, rng):
    """Independent brute-force forward process: t_stop sequential beta-steps.

    Returns the whole trajectory [x_0, x_1, ..., x_{t_stop}].
    Deliberately does not use q_sample.
    """
    traj = [np.asarray(x0, dtype=float)]
    x = traj[0]
    for t in range(1, t_stop + 1):
        b = sched.beta[t]
        x = math.sqrt(1.0 - b) * x + math.sqrt(b) * rng.standard_normal(x.shape)
        traj.append(x)
    return traj


class TestCosineSchedule:
    def test_alpha_bar_starts_at_one(self):
        for T, s in [(1, 0.008), (10, 0.1), (1000, 0.008)]:
            assert sch.build_cosine_schedule(T, s).alpha_bar[0] == 1.0

    def test_midpoint_matches_independent_closed_form(self):
        s = 0.008
        T = 1000
        sched = sch.build_cosine_schedule(T, s)
        # one-line independent evaluation of f(t)/f(0)
        f = lambda t: math.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
        expected = f(500) / f(0)
        assert abs(expected - 0.49) < 0.01
        assert sched.alpha_bar[500] == pytest.approx(expected, abs=1e-10)

    def test_alpha_bar_strictly_decreasing(self):
        sched = sch.build_cosine_schedule(100)
        assert np.all(np.diff(sched.alpha_bar) < 0)

    def test_beta_in_open_unit_interval_and_clipped(self):
        sched = sch.build_cosine_schedule(1000)
        assert np.all(sched.beta[1:] > 0)
        assert np.all(sched.beta[1:] <= sch.BETA_CLIP)

    def test_posterior_var_zero_at_one_positive_after(self):
        sched = sch.build_cosine_schedule(50)
        assert sched.posterior_var[1] == 0.0
        assert np.all(sched.posterior_var[2:] > 0)

    def test_invalid_arguments_rejected(self):
        with pytest.raises(ValueError):
            sch.build_cosine_schedule(0)
        with pytest.raises(ValueError):
            sch.build_cosine_schedule(10, s=0.0)


class TestQSample:
    def test_t0_returns_x0_exactly(self):
        sched = sch.build_cosine_schedule(10)
        rng = np.random.default_rng(0)
        x0 = rng.uniform(-1, 1, (4, 4))
        out = sch.q_sample(x0, 0, rng.standard_normal((4, 4)), sched)
        np.testing.assert_array_equal(out, x0)

    def test_zero_noise_scales_by_sqrt_alpha_bar(self):
        sched = sch.build_cosine_schedule(10)
        x0 = np.full((3, 3), 0.5)
        out = sch.q_sample(x0, 7, np.zeros((3, 3)), sched)
        np.testing.assert_allclose(out, math.sqrt(sched.alpha_bar[7]) * x0)

    def test_empirical_moments_match_closed_form(self):
        # Monte-Carlo oracle: mean and variance of q_sample over 1e5 draws.
        sched = sch.build_cosine_schedule(100)
        rng = np.random.default_rng(42)
        t = 40
        x0 = np.array(0.3)
        n = 100_000
        draws = sch.q_sample(np.full(n, x0), t, rng.standard_normal(n), sched)
        ab = sched.alpha_bar[t]
        se_mean = math.sqrt((1 - ab) / n)
        assert abs(draws.mean() - math.sqrt(ab) * x0) < 3 * se_mean
        se_var = (1 - ab) * math.sqrt(2.0 / (n - 1))
        assert abs(draws.var() - (1 - ab)) < 3 * se_var

    def test_single_step_matches_sequential_chain_marginal(self):
        # Marginal of x_t via the closed form vs t sequential beta-steps.
        sched = sch.build_cosine_schedule(20)
        rng = np.random.default_rng(7)
        t = 12
        x0 = 0.4
        n = 100_000
        closed = sch.q_sample(np.full(n, x0), t, rng.standard_normal(n), sched)
        seq = _simulate_forward_chain(np.full(n, x0), sched, t, rng)[t]
        se_mean = math.sqrt(max(closed.var(), seq.var()) / n)
        assert abs(closed.mean() - seq.mean()) < 3 * math.sqrt(2) * se_mean
        se_var = closed.var() * math.sqrt(2.0 / (n - 1))
        assert abs(closed.var() - seq.var()) < 3 * math.sqrt(2) * se_var

    def test_t_out_of_range_errors(self):
        sched = sch.build_cosine_schedule(5)
        with pytest.raises(ValueError, match="out of range"):
            sch.q_sample(np.zeros(2), 6, np.zeros(2), sched)
        with pytest.raises(ValueError, match="out of range"):
            sch.q_sample(np.zeros(2), -1, np.zeros(2), sched)

    def test_eps_shape_mismatch_errors(self):
        sched = sch.build_cosine_schedule(5)
        with pytest.raises(ValueError, match="shape"):
            sch.q_sample(np.zeros(3), 1, np.zeros(2), sched)


class TestPosterior:
    def test_t1_posterior_is_x0_with_zero_variance(self):
        sched = sch.build_cosine_schedule(10)
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal(5)
        xt = rng.standard_normal(5)
        mu, var = sch.posterior_mean_var(x0, xt, 1, sched)
        np.testing.assert_allclose(mu, x0, atol=1e-12)
        assert var == 0.0

    def test_t0_rejected(self):
        sched = sch.build_cosine_schedule(10)
        with pytest.raises(ValueError):
            sch.posterior_mean_var(np.zeros(2), np.zeros(2), 0, sched)

    def test_coefficients_sum_matches_independent_evaluation(self):
        sched = sch.build_cosine_schedule(200)
        rng = np.random.default_rng(3)
        for t in rng.integers(2, 201, size=10):
            t = int(t)
            mu_x0, _ = sch.posterior_mean_var(1.0, 0.0, t, sched)
            mu_xt, _ = sch.posterior_mean_var(0.0, 1.0, t, sched)
            ab, abp = sched.alpha_bar[t], sched.alpha_bar[t - 1]
            expected = (math.sqrt(abp) * sched.beta[t]
                        + math.sqrt(sched.alpha[t]) * (1 - abp)) / (1 - ab)
            assert mu_x0 + mu_xt == pytest.approx(expected, rel=1e-12)

    def test_empirical_conditional_mean_matches_closed_form(self):
        # Brute-force oracle on a toy T=5 schedule: simulate 1e5 forward
        # chains, bin chains whose x_t lands near a fixed value, and compare
        # the mean of their x_{t-1} against the closed-form posterior mean.
        sched = sch.build_cosine_schedule(5)
        rng = np.random.default_rng(2024)
        n = 100_000
        x0 = 0.5
        trajs = _simulate_forward_chain(np.full(n, x0), sched, 5, rng)
        for t in range(2, 6):
            xt = trajs[t]
            xprev = trajs[t - 1]
            centre = math.sqrt(sched.alpha_bar[t]) * x0
            half_width = 0.05
            sel = np.abs(xt - centre) < half_width
            assert sel.sum() > 1000, "bin too narrow for a stable estimate"
            mu, var = sch.posterior_mean_var(x0, xt[sel].mean(), t, sched)
            se = xprev[sel].std(ddof=1) / math.sqrt(sel.sum())
            # allow a small bias term for the finite bin width
            bin_bias = 0.5 * half_width * abs(
                sch.posterior_mean_var(0.0, 1.0, t, sched)[0])
            assert abs(xprev[sel].mean() - mu) < 3 * se + bin_bias

    def test_conditional_variance_matches_posterior_var(self):
        sched = sch.build_cosine_schedule(5)
        rng = np.random.default_rng(11)
        n = 100_000
        x0 = 0.2
        trajs = _simulate_forward_chain(np.full(n, x0), sched, 5, rng)
        t = 4
        centre = math.sqrt(sched.alpha_bar[t]) * x0
        sel = np.abs(trajs[t] - centre) < 0.05
        sample_var = trajs[t - 1][sel].var(ddof=1)
        se_var = sample_var * math.sqrt(2.0 / (sel.sum() - 1))
        assert abs(sample_var - sched.posterior_var[t]) < 3 * se_var + 1e-3


class TestMuFromX0Hat:
    def test_identity_with_posterior_mean(self):
        # Algebraic identity, checked numerically over 100 random inputs.
        sched = sch.build_cosine_schedule(50)
        rng = np.random.default_rng(9)
        for _ in range(100):
            t = int(rng.integers(1, 51))
            x0 = rng.standard_normal(3)
            xt = rng.standard_normal(3)
            mu_a = sch.mu_from_x0hat(xt, x0, t, sched)
            mu_b, _ = sch.posterior_mean_var(x0, xt, t, sched)
            np.testing.assert_allclose(mu_a, mu_b, atol=1e-10)

    def test_t_equals_T_with_zero_x0hat(self):
        sched = sch.build_cosine_schedule(30)
        T = 30
        xt = np.array([1.0, -2.0])
        got = sch.mu_from_x0hat(xt, np.zeros(2), T, sched)
        a, ab = sched.alpha[T], sched.alpha_bar[T]
        expected = xt * (1 - (1 - a) / (1 - ab)) / math.sqrt(a)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_out_of_range_t(self):
        sched = sch.build_cosine_schedule(4)
        with pytest.raises(ValueError):
            sch.mu_from_x0hat(np.zeros(1), np.zeros(1), 5, sched)


class TestAncestralStep:
    def test_t1_is_deterministic(self):
        sched = sch.build_cosine_schedule(10)
        rng = np.random.default_rng(0)
        xt = rng.standard_normal(4)
        x0hat = rng.standard_normal(4)
        a = sch.ancestral_step(xt, x0hat, 1, rng.standard_normal(4), sched)
        b = sch.ancestral_step(xt, x0hat, 1, rng.standard_normal(4), sched)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a, sch.mu_from_x0hat(xt, x0hat, 1, sched))

    def test_oracle_denoiser_chain_converges_to_target(self):
        # With x0hat fixed to the ground truth, the reverse chain from pure
        # noise must land on the target within the schedule noise floor.
        T = 100
        sched = sch.build_cosine_schedule(T)
        rng = np.random.default_rng(123)
        target = rng.uniform(-1, 1, (8, 8))
        x = rng.standard_normal((8, 8))
        for t in range(T, 0, -1):
            x = sch.ancestral_step(x, target, t, rng.standard_normal((8, 8)), sched)
        assert np.max(np.abs(x - target)) < 0.02

    def test_single_step_variance_matches_sigma(self):
        sched = sch.build_cosine_schedule(50)
        rng = np.random.default_rng(77)
        t = 25
        xt = np.array(0.4)
        x0hat = np.array(-0.2)
        n = 100_000
        outs = np.array([
            sch.ancestral_step(xt, x0hat, t, z, sched)
            for z in rng.standard_normal(n)
        ])
        var = sched.posterior_var[t]
        se_var = var * math.sqrt(2.0 / (n - 1))
        assert abs(outs.var() - var) < 3 * se_var
