"""Train a robust and a non-robust MPO agent on the pendulum and compare holdout returns.

A short run (a few minutes on one core).  Pass a larger episode count as the
first argument for a closer look, e.g. ``python3 gallery/pendulum_robust_vs_nominal.py 1500``.
"""
import sys

from robust_ctrl.envs import make_env_set
from robust_ctrl.harness import eval_policy
from robust_ctrl.mpo import MpoConfig, train
from robust_ctrl.policy_eval import RobustnessSpec


def main(episodes=300, seed=0):
    env_set = make_env_set("pendulum_swingup", (1.0, 1.1, 1.4), (1.5, 1.6, 1.7))
    cfg = MpoConfig(n_envs=10, steps_per_round=500, critic_updates_per_round=50,
                    policy_updates_per_round=25)
    for mode in ("robust", "non_robust"):
        spec = RobustnessSpec(mode, "entropy_regularized", 1.0, models=env_set.training_set)
        res = train(env_set, spec, cfg, episodes, seed)
        returns = [eval_policy(res.policy, env, 10, seed=1000)[0] for env in env_set.holdout_set]
        cells = "  ".join(f"{v}: {r:6.1f}" for v, r in zip(env_set.holdout_values, returns))
        print(f"{mode:<11} {cells}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 300)
