"""Fit pendulum transition models on growing offline datasets and report held-out error."""
from robust_ctrl import ddr
from robust_ctrl.envs import make_env_set


def main():
    source = make_env_set("pendulum_swingup", (1.0, 1.1, 1.2), (1.5,)).training_set[0]
    common = ddr.generate_dataset(source, 5_000, seed=999)
    for n in (100, 1_000, 10_000):
        model = ddr.fit_model(ddr.generate_dataset(source, n, seed=1), epochs=20, min_updates=2000)
        print(f"n = {n:>6}  held-out one-step MSE {model.mse(common):.2e}")


if __name__ == "__main__":
    main()
