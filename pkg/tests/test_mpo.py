import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from oracles import golden_section
from robust_ctrl import mpo
from robust_ctrl.agent import deterministic_metrics
from robust_ctrl.envs import make_env_set
from robust_ctrl.nn import autodiff as ad
from robust_ctrl.nn import distributions as D
from robust_ctrl.nn.nets import Adam, GaussianPolicy
from robust_ctrl.policy_eval import RobustnessSpec


def dual_oracle(eta, Q, epsilon):
    # written out directly, without the library's logsumexp
    z = Q / eta
    m = z.max(axis=1, keepdims=True)
    log_mean_exp = m[:, 0] + np.log(np.mean(np.exp(z - m), axis=1))
    return eta * epsilon + eta * np.mean(log_mean_exp)


def q_tables(K=4, N=15):
    return st.integers(0, 2**31 - 1).map(
        lambda s: np.random.default_rng(s).normal(0.0, np.random.default_rng(s + 1).uniform(0.1, 10.0),
                                                  (K, N)))


def tiny_config(**kw):
    base = dict(policy_hidden=(16, 16), critic_hidden=(16, 16), batch_size=32, warmup_steps=100,
                steps_per_round=50, critic_updates_per_round=5, policy_updates_per_round=2,
                policy_batch_size=16, n_envs=2, target_period=10)
    base.update(kw)
    return mpo.MpoConfig(**base)


class TestEStep:
    def test_constant_q_gives_uniform_weights(self):
        for eta_prev in (None, 0.01, 50.0):
            w, _ = mpo.e_step_weights(np.full((5, 15), 3.7), 0.1, eta_prev)
            np.testing.assert_array_equal(w, np.full((5, 15), 1 / 15))

    def test_huge_budget_gives_greedy_weights(self):
        rng = np.random.default_rng(0)
        Q = rng.normal(size=(6, 15))
        w, eta = mpo.e_step_weights(Q, 1e6)
        assert eta < 1e-4
        one_hot = np.zeros_like(Q)
        one_hot[np.arange(6), Q.argmax(axis=1)] = 1.0
        np.testing.assert_allclose(w, one_hot, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(Q=q_tables())
    def test_temperature_matches_golden_section(self, Q):
        _, eta = mpo.e_step_weights(Q, 0.1)
        lo, hi = np.log(mpo.ETA_BOUNDS[0]), np.log(mpo.ETA_BOUNDS[1])
        ref = np.exp(golden_section(lambda x: dual_oracle(np.exp(x), Q, 0.1), lo, hi))
        assert abs(eta - ref) <= 1e-4 * ref

    @settings(max_examples=40, deadline=None)
    @given(Q=q_tables(), epsilon=st.sampled_from([0.01, 0.1, 0.5]))
    def test_sample_kl_budget(self, Q, epsilon):
        w, _ = mpo.e_step_weights(Q, epsilon)
        kl = np.mean(np.sum(w * np.log(np.maximum(w, 1e-300) * Q.shape[1]), axis=1))
        assert kl <= 1.01 * epsilon
        assert kl == pytest.approx(mpo.sample_kl_to_uniform(w), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(Q=q_tables(K=8, N=10), epsilon=st.sampled_from([0.01, 0.1, 1.0]))
    def test_weights_tilt_towards_higher_values(self, Q, epsilon):
        w, _ = mpo.e_step_weights(Q, epsilon)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(np.sum(w * Q, axis=1) >= Q.mean(axis=1) - 1e-12)

    @settings(max_examples=40, deadline=None)
    @given(Q=q_tables())
    def test_dual_is_unimodal_on_log_grid(self, Q):
        vals = np.array([mpo.temperature_dual(eta, Q, 0.1) for eta in np.logspace(-6, 3, 200)])
        k = int(np.argmin(vals))
        tol = 1e-12 * np.max(np.abs(vals))
        assert np.all(np.diff(vals[:k + 1]) <= tol)
        assert np.all(np.diff(vals[k:]) >= -tol)

    def test_warm_start_agrees_with_cold_start(self):
        rng = np.random.default_rng(3)
        Q = rng.normal(size=(4, 15))
        _, cold = mpo.e_step_weights(Q, 0.1)
        for prev in (1e-3, 0.5, 200.0):
            _, warm = mpo.e_step_weights(Q, 0.1, prev)
            assert warm == pytest.approx(cold, rel=1e-4)

    def test_rejects_non_finite_table(self):
        with pytest.raises(ValueError):
            mpo.e_step_weights(np.array([[0.0, np.nan]]), 0.1)


def weighted_set(rng, K=8, N=15, obs_dim=3, act_dim=2, weights=None):
    states = rng.normal(size=(K, obs_dim))
    actions = rng.normal(size=(K, N, act_dim))
    if weights is None:
        weights = rng.dirichlet(np.ones(N), size=K)
    return mpo.WeightedActionSet(states, actions, weights)


class TestMStep:
    def test_uniform_weights_give_plain_likelihood_gradient(self):
        rng = np.random.default_rng(0)
        data = weighted_set(rng, weights=np.full((8, 15), 1 / 15))
        policy = GaussianPolicy(3, 2, (16,), rng=rng)
        dist = policy.dist(data.states)
        ll = mpo.weighted_log_likelihood(dist, dist, data, decoupled=False)
        g = ad.grad(ll, policy.parameters())

        dist = policy.dist(data.states)
        K, N, d = data.actions.shape
        total = None
        for i in range(N):
            term = D.log_prob(dist, data.actions[:, i]).mean()
            total = term if total is None else total + term
        ref = ad.grad(total * (1.0 / N), policy.parameters())
        np.testing.assert_allclose(g, ref, rtol=1e-12, atol=1e-14)

    def test_decoupled_gradient_equals_coupled_at_old_policy(self):
        rng = np.random.default_rng(1)
        data = weighted_set(rng)
        policy = GaussianPolicy(3, 2, (16,), rng=rng)
        old = D.DiagGaussian(*policy.dist_np(data.states))
        g_dec = ad.grad(mpo.weighted_log_likelihood(policy.dist(data.states), old, data, True),
                        policy.parameters())
        g_cpl = ad.grad(mpo.weighted_log_likelihood(policy.dist(data.states), old, data, False),
                        policy.parameters())
        np.testing.assert_allclose(g_dec, g_cpl, rtol=1e-10, atol=1e-13)

    def test_one_hot_weights_pull_mean_to_targets(self):
        rng = np.random.default_rng(2)
        data = weighted_set(rng, act_dim=1, weights=np.eye(15)[rng.integers(0, 15, 8)])
        targets = np.einsum("kn,knd->kd", data.weights, data.actions)
        policy = GaussianPolicy(3, 1, (32,), rng=rng)
        old = policy.copy()
        cfg = mpo.MpoConfig(epsilon_mu=1e6, epsilon_sigma=1e6)
        duals = mpo.Duals(np.log(1e-8), np.log(1e-8))
        opt = Adam(policy.parameters(), lr=3e-3)
        dist = []
        for _ in range(400):
            mpo.m_step(data, policy, old, cfg, opt, duals, n_iters=1)
            dist.append(np.mean(np.linalg.norm(policy.mean_action(data.states) - targets, axis=1)))
        windows = np.array(dist).reshape(-1, 20).mean(axis=1)
        assert np.all(np.diff(windows) < 0)
        assert windows[-1] < 0.1 * windows[0]

    def test_likelihood_is_non_decreasing(self):
        rng = np.random.default_rng(3)
        data = weighted_set(rng)
        policy = GaussianPolicy(3, 2, (32,), rng=rng)
        cfg = mpo.MpoConfig(epsilon_mu=1e6, epsilon_sigma=1e6)
        duals = mpo.Duals(np.log(1e-8), np.log(1e-8))
        info = mpo.m_step(data, policy, policy.copy(), cfg, Adam(policy.parameters(), lr=1e-3),
                          duals, n_iters=300)
        assert not info["rejected"]
        windows = np.array(info["likelihood"]).reshape(-1, 20).mean(axis=1)
        assert np.all(np.diff(windows) >= 0)

    def test_tiny_trust_region_binds(self):
        rng = np.random.default_rng(4)
        data = weighted_set(rng, weights=np.eye(15)[rng.integers(0, 15, 8)])
        policy = GaussianPolicy(3, 2, (32,), rng=rng)
        old = policy.copy()
        cfg = mpo.MpoConfig(epsilon_mu=1e-9, epsilon_sigma=1e-9)
        duals = mpo.Duals()
        opt = Adam(policy.parameters(), lr=3e-4)
        for _ in range(20):
            mpo.m_step(data, policy, old, cfg, opt, duals, n_iters=5)
        m0, s0 = old.dist_np(data.states)
        m1, s1 = policy.dist_np(data.states)
        ratio = (s1 / s0) ** 2
        kl_mu = np.mean(0.5 * np.sum(((m1 - m0) / s0) ** 2, axis=1))
        kl_sigma = np.mean(0.5 * np.sum(ratio - 1 - np.log(ratio), axis=1))
        assert kl_mu < 1e-6 and kl_sigma < 1e-6

    def test_violation_rejects_step_and_boosts_multiplier(self):
        rng = np.random.default_rng(5)
        data = weighted_set(rng, weights=np.eye(15)[rng.integers(0, 15, 8)])
        policy = GaussianPolicy(3, 2, (32,), rng=rng)
        before = policy.get_flat()
        cfg = mpo.MpoConfig(epsilon_mu=1e-9, epsilon_sigma=1e6)
        duals = mpo.Duals(0.0, 0.0)
        info = mpo.m_step(data, policy, policy.copy(), cfg, Adam(policy.parameters(), lr=1e-2),
                          duals, n_iters=10)
        assert info["rejected"] and duals.rejected == 1
        np.testing.assert_array_equal(policy.get_flat(), before)
        assert duals.alpha_mu > 9.0

    def test_weights_must_be_normalised(self):
        with pytest.raises(ValueError):
            mpo.WeightedActionSet(np.zeros((1, 3)), np.zeros((1, 2, 1)), np.array([[0.7, 0.7]]))


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            mpo.MpoConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            mpo.MpoConfig(discount=1.0)

    def test_seed_determinism(self):
        es = make_env_set("pendulum_swingup", (1.0, 1.1, 1.4), (1.5,), episode_length=60)
        spec = RobustnessSpec("robust", "entropy_regularized", 1.0, models=es.training_set)
        runs = [mpo.train(es, spec, tiny_config(), 8, seed=11) for _ in range(2)]
        a, b = (deterministic_metrics(r.metrics) for r in runs)
        assert a == b
        np.testing.assert_array_equal(runs[0].policy.get_flat(), runs[1].policy.get_flat())
        other = deterministic_metrics(mpo.train(es, spec, tiny_config(), 8, seed=12).metrics)
        assert other != a

    @pytest.mark.parametrize("objective", ["expected", "entropy_regularized"])
    def test_singleton_set_collapses_modes(self, objective):
        es = make_env_set("pendulum_swingup", (1.0,), (1.5,), episode_length=60)
        streams = []
        for mode in ("robust", "soft_robust", "non_robust"):
            spec = RobustnessSpec(mode, objective, 1.0, models=es.training_set)
            res = mpo.train(es, spec, tiny_config(), 8, seed=5)
            streams.append((deterministic_metrics(res.metrics), res.policy.get_flat().tobytes()))
        assert streams[0] == streams[1] == streams[2]
        assert not np.isnan(streams[0][0][-1]["critic_loss"])

    def test_limited_dr_on_singleton_is_plain_mpo(self):
        es = make_env_set("pendulum_swingup", (1.0,), (1.5,), episode_length=60)
        spec = RobustnessSpec("non_robust", "expected", models=es.training_set)
        plain = mpo.train(es, spec, tiny_config(), 8, seed=9)
        dr = mpo.limited_dr_train(es, tiny_config(), 8, seed=9)
        assert deterministic_metrics(plain.metrics) == deterministic_metrics(dr.metrics)

    def test_limited_dr_draws_are_balanced(self):
        es = make_env_set("pendulum_swingup", (1.0, 1.1, 1.4), (1.5,), episode_length=5)
        # warm-up longer than the run: only the acting loop is exercised
        res = mpo.limited_dr_train(es, tiny_config(warmup_steps=10**6, n_envs=10), 300, seed=0)
        counts = np.bincount(res.env_draws, minlength=3)
        assert counts.sum() == 300
        assert chisquare(counts).pvalue > 0.01

    def test_metrics_csv_columns(self, tmp_path):
        es = make_env_set("pendulum_swingup", (1.0, 1.1), (1.5,), episode_length=60)
        spec = RobustnessSpec("soft_robust", "expected", models=es.training_set)
        path = tmp_path / "m.csv"
        mpo.train(es, spec, tiny_config(), 4, seed=0, metrics_path=path)
        lines = path.read_text().splitlines()
        assert lines[0] == "episode,nominal_return,critic_loss,eta,kl_mu,kl_sigma,wall_ms"
        assert len(lines) == 5
