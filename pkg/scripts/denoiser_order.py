"""Score error of the Bayes-optimal Gaussian denoiser as sigma halves (expect ratios near 4)."""
import numpy as np

from affmap import densities as D
from affmap import objectives as obj

mu, s = np.array([1.0, -0.5]), 1.0
y = np.random.default_rng(0).normal(0, 2, (1000, 2))
exact = (mu - y) / s ** 2
prev = None
for sigma in (0.8, 0.4, 0.2, 0.1, 0.05, 0.025):
    den = obj.Denoiser(sigma, fn=lambda v, sg=sigma: D.analytic_denoiser_gaussian(mu, s, sg, v))
    err = np.mean(np.linalg.norm(obj.denoiser_gradient(den, y) - exact, axis=1))
    print(f"sigma={sigma:<6g} error={err:.6f}" + (f"  ratio={prev / err:.3f}" if prev else ""))
    prev = err
