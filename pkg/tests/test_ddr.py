import numpy as np
import pytest

from robust_ctrl import ddr
from robust_ctrl import policy_eval as PE
from robust_ctrl.envs import EnvModel, EnvState, make_env_set, observe
from robust_ctrl.exceptions import DomainError
from robust_ctrl.nn.nets import GaussianPolicy, MlpSpec, QNetwork


@pytest.fixture(scope="module")
def pendulum():
    return make_env_set("pendulum_swingup", (1.0, 1.1, 1.4), (1.5,))


def linear_dataset(rng, n=2000):
    A = np.array([[0.9, 0.1, 0.0], [-0.2, 0.95, 0.05], [0.0, 0.1, 0.8]])
    B = np.array([[0.0], [0.5], [-0.3]])
    s = rng.normal(size=(n, 3))
    a = rng.uniform(-1, 1, (n, 1))
    return ddr.OfflineDataset(s, a, s @ A.T + a @ B.T)


def probe_batch(env_set, n=128, seed=123):
    probe = ddr.generate_dataset(env_set.nominal, n, seed=seed)
    p = env_set.nominal.params
    rew = env_set.nominal.reward(probe.next_states, probe.actions)
    return PE.Batch(observe(p.domain, probe.states), probe.actions, rew,
                    observe(p.domain, probe.next_states), probe.states, np.zeros(n, dtype=np.int64))


class TestDataset:
    def test_empty(self, pendulum):
        d = ddr.generate_dataset(pendulum.nominal, 0, seed=0)
        assert len(d) == 0 and d.states.shape == (0, 2)

    def test_deterministic_per_seed(self, pendulum):
        a = ddr.generate_dataset(pendulum.nominal, 500, seed=3)
        b = ddr.generate_dataset(pendulum.nominal, 500, seed=3)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)

    def test_seeds_give_disjoint_actions(self, pendulum):
        a = ddr.generate_dataset(pendulum.nominal, 1000, seed=1)
        b = ddr.generate_dataset(pendulum.nominal, 1000, seed=2)
        assert not np.intersect1d(a.actions.ravel(), b.actions.ravel()).size

    def test_records_are_true_transitions(self, pendulum):
        model = pendulum.training_set[2]
        d = ddr.generate_dataset(model, 300, seed=0)
        nxt, _ = model.batch_step(d.states, d.actions)
        np.testing.assert_array_equal(nxt, d.next_states)

    def test_episodes_reset(self, pendulum):
        d = ddr.generate_dataset(pendulum.nominal, 40, seed=0, reset_every=5, n_lanes=4)
        # rows 20..23 start fresh episodes at rest
        np.testing.assert_array_equal(d.states[20:24, 1], 0.0)
        assert np.any(d.states[16:20, 1] != 0.0)

    def test_angle_coverage(self, pendulum):
        d = ddr.generate_dataset(pendulum.nominal, 10_000, seed=0)
        counts, _ = np.histogram(d.states[:, 0], bins=36, range=(-np.pi, np.pi))
        assert np.mean(counts > 0) >= 0.8

    def test_custom_behaviour(self, pendulum):
        d = ddr.generate_dataset(pendulum.nominal, 50, seed=0,
                                 behavior=lambda obs, rng: np.full((len(obs), 1), 0.25))
        assert np.all(d.actions == 0.25)

    def test_disk_round_trip(self, pendulum, tmp_path):
        d = ddr.generate_dataset(pendulum.training_set[1], 257, seed=4)
        ddr.save_dataset(tmp_path / "ds", d, seed=4)
        back = ddr.load_dataset(tmp_path / "ds")
        assert back.params == d.params
        for name in ("states", "actions", "next_states"):
            np.testing.assert_array_equal(getattr(back, name), getattr(d, name))
        raw = (tmp_path / "ds" / "records.bin").read_bytes()
        assert len(raw) == 257 * (2 + 1 + 2) * 8

    def test_truncated_blob_rejected(self, pendulum, tmp_path):
        ddr.save_dataset(tmp_path / "ds", ddr.generate_dataset(pendulum.nominal, 20, seed=0))
        blob = tmp_path / "ds" / "records.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(ValueError):
            ddr.load_dataset(tmp_path / "ds")

    def test_non_finite_records_rejected(self):
        with pytest.raises(DomainError):
            ddr.OfflineDataset(np.array([[np.nan]]), np.zeros((1, 1)), np.zeros((1, 1)))


class TestFit:
    def test_linear_system_is_fit_exactly(self):
        rng = np.random.default_rng(0)
        data = linear_dataset(rng)
        spec = MlpSpec(in_dim=1, hidden=(), out_dim=1, layer_norm_first=False)
        model = ddr.fit_model(data, spec, epochs=200, lr=1e-2)
        assert model.heldout_mse < 1e-6

    def test_constant_states_refused(self):
        s = np.ones((50, 2))
        data = ddr.OfflineDataset(s, np.random.default_rng(0).uniform(-1, 1, (50, 1)), s)
        with pytest.raises(DomainError):
            ddr.fit_model(data)

    def test_more_data_gives_smaller_error(self, pendulum):
        model = pendulum.nominal
        hold = ddr.generate_dataset(model, 5000, seed=99)
        small = ddr.fit_model(ddr.generate_dataset(model, 100, seed=1), min_updates=1000)
        large = ddr.fit_model(ddr.generate_dataset(model, 10_000, seed=1), epochs=10)
        assert large.mse(hold) < small.mse(hold)

    def test_checkpoint_round_trip(self, pendulum, tmp_path):
        m = ddr.fit_model(ddr.generate_dataset(pendulum.nominal, 200, seed=0), epochs=2)
        m.save(tmp_path / "m.ckpt")
        back = ddr.LearnedModel.load(tmp_path / "m.ckpt")
        s = ddr.generate_dataset(pendulum.nominal, 30, seed=5)
        np.testing.assert_array_equal(back.predict(s.states, s.actions), m.predict(s.states, s.actions))
        assert back.heldout_mse == m.heldout_mse and back.params == m.params


@pytest.fixture(scope="module")
def learned(pendulum):
    return [ddr.fit_model(ddr.generate_dataset(m, 20_000, seed=10 + i), epochs=20, min_updates=4000)
            for i, m in enumerate(pendulum.training_set)]


class TestSubstitution:
    def test_env_model_contract(self, learned):
        model = learned[0]
        assert isinstance(model, EnvModel)
        model.reset(np.random.default_rng(0))
        state = EnvState(np.array([0.3, -0.2]), 7)
        model.set_state(state)
        assert model.get_state() == state
        obs, r = model.step(np.array([0.5]))
        assert obs.shape == (3,) and 0.0 <= r <= 1.0
        assert model.get_state().step_count == 8
        twin = model.clone()
        np.testing.assert_array_equal(twin.step(np.array([0.1]))[0], model.step(np.array([0.1]))[0])

    def test_reward_uses_analytic_function(self, pendulum, learned):
        s = ddr.generate_dataset(pendulum.nominal, 50, seed=2)
        nxt, r = learned[1].batch_step(s.states, s.actions)
        np.testing.assert_array_equal(r, pendulum.nominal.reward(nxt, s.actions))

    def test_targets_close_to_ground_truth(self, pendulum, learned):
        batch = probe_batch(pendulum)
        rng = np.random.default_rng(0)
        critic = PE.CriticPair(QNetwork(3, 1, (32, 32), rng=rng))
        pi = GaussianPolicy(3, 1, (32, 32), rng=rng)
        noise = rng.standard_normal((len(batch), 1, 1))
        for mode in ("robust", "soft_robust"):
            gt = PE.td_target(batch, critic, pi, pi, PE.RobustnessSpec(mode, models=pendulum.training_set),
                              0.99, noise=noise)
            dd = PE.td_target(batch, critic, pi, pi,
                              PE.RobustnessSpec(mode, models=ddr.ddr_uncertainty_set(learned)), 0.99,
                              noise=noise)
            assert np.mean(np.abs(dd - gt) / np.abs(gt)) < 0.02

    def test_single_model_collapses_modes(self, pendulum, learned):
        batch = probe_batch(pendulum, 64)
        rng = np.random.default_rng(1)
        critic = PE.CriticPair(QNetwork(3, 1, (16,), rng=rng))
        pi = GaussianPolicy(3, 1, (16,), rng=rng)
        noise = rng.standard_normal((64, 1, 1))
        out = [PE.td_target(batch, critic, pi, pi, PE.RobustnessSpec(mode, models=learned[:1]), 0.99,
                            noise=noise) for mode in ("robust", "soft_robust", "non_robust")]
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], out[2])

    def test_untrained_models_give_finite_targets(self, pendulum):
        rng = np.random.default_rng(2)
        data = ddr.generate_dataset(pendulum.nominal, 100, seed=0)
        raw = [ddr.fit_model(data, epochs=0, seed=k) for k in range(3)]
        batch = probe_batch(pendulum, 64)
        critic = PE.CriticPair(QNetwork(3, 1, (16,), rng=rng))
        pi = GaussianPolicy(3, 1, (16,), rng=rng)
        t = PE.td_target(batch, critic, pi, pi, PE.RobustnessSpec("robust", models=raw), 0.99, rng=rng)
        assert np.all(np.isfinite(t))

    def test_mixed_domains_rejected(self, learned):
        cart = make_env_set("cartpole_swingup", (1.0, 1.5), (2.0,))
        other = ddr.fit_model(ddr.generate_dataset(cart.nominal, 500, seed=0), epochs=1)
        with pytest.raises(ValueError):
            ddr.ddr_uncertainty_set([learned[0], other])
