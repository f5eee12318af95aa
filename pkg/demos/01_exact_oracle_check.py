"""Particle filter vs exact Kalman filter on a linear-Gaussian model.

A linear-Gaussian state-space model is the one setting where filtering has a
closed form, so it makes an honest yardstick: the particle filter's marginal
likelihood estimate must sit within sampling noise of the Kalman value, and
averaging the evidence ratio over many seeds must come out near one because
the estimator is unbiased.

Run with:  python3 demos/01_exact_oracle_check.py
"""

import numpy as np

from neuralsmc.metrics import kalman_filter
from neuralsmc.models import LinearGaussianSsm, simulate
from neuralsmc.prng import stream_for
from neuralsmc.smc import SmcConfig, run_bootstrap

model = LinearGaussianSsm(A=[[0.9]], C=[[1.0]], q_std=[1.0], r_std=[0.5],
                          m0=[0.0], p0_std=[1.0])
T, N = 50, 500
z_true, x = simulate(model, T, stream_for(0, "demo1-sim"))

exact = kalman_filter(model, x)
print(f"sequence length {T}, particles {N}")
print(f"exact log marginal likelihood (Kalman): {exact.log_marginal_likelihood:+.3f}")

res = run_bootstrap(model, x, SmcConfig(n_particles=N), stream_for(0, "demo1-run"))
print(f"particle estimate (one run):            {res.log_marginal_likelihood():+.3f}")

print("\nfiltering means, last five steps (particle vs Kalman):")
for t in range(T - 5, T):
    pm = res.filtering_means[t][0]
    km = exact.filtered_means[t, 0]
    print(f"  t={t + 1:3d}   {pm:+.3f}   {km:+.3f}")

n_seeds = 500
ratios = np.empty(n_seeds)
cfg = SmcConfig(n_particles=N, record_filtering_stats=False)
for j in range(n_seeds):
    est = run_bootstrap(model, x, cfg, stream_for(j, "demo1-rep"))
    ratios[j] = np.exp(est.log_marginal_likelihood() - exact.log_marginal_likelihood)
se = ratios.std(ddof=1) / np.sqrt(n_seeds)
print(f"\nmean evidence ratio over {n_seeds} seeds: {ratios.mean():.4f} "
      f"+- {se:.4f}  (unbiasedness says this should be near 1)")
