"""Filter one noisy bouncing-ball drop with SPIPF and the three baselines.

Prints post-impact Mean MSE and the estimated impact time for each filter.
Run from the repository root:  python demos/bouncing_ball_filters.py [seed]
"""
import sys

import numpy as np

from spipf.baselines import GaussianBelief, run_sir, run_skf, spipf_zero_control
from spipf.filter import FilterConfig, GaussianPrior, run
from spipf.harness import estimated_transition_time, mean_mse
from spipf.hybrid import HybridState
from spipf.systems import bouncing_ball, simulate_truth

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
rng = np.random.default_rng(seed)
bb = bouncing_ball(noise_scale=0.1, sigma_B=0.1)
cov = np.diag([0.05 ** 2] * 2)
x0 = rng.multivariate_normal([1.0, 0.0], cov)
truth = simulate_truth(bb, HybridState(0, x0), 0.8, 0.01, rng)
impact = truth.transition_steps[0][0]
print(f"true impact at t = {truth.times[impact]:.2f} s")

prior = GaussianPrior.single(0, [1.0, 0.0], cov)
cfg = FilterConfig(K=50, H=10, dt=0.01, epsilon=0.1, prior=prior, seed=seed)
filters = {
    "spipf": lambda: run(bb, truth.measurements, cfg),
    "spipf0": lambda: spipf_zero_control(bb, truth.measurements, cfg),
    "sir": lambda: run_sir(bb, truth.measurements, cfg),
    "skf": lambda: run_skf(bb, truth.measurements, GaussianBelief([1.0, 0.0], cov, 0)),
}
print(f"{'filter':8s} {'post-impact MSE':>16s} {'estimated impact':>17s} {'min ESSE':>9s}")
for name, fn in filters.items():
    recs = fn()
    mse = mean_mse(recs, truth, bb, start=impact - 1)
    t_hat = estimated_transition_time(recs, 0)
    print(f"{name:8s} {mse:16.4f} {t_hat:17.2f} {min(r.esse for r in recs):9.3f}")
