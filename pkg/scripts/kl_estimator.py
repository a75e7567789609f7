"""Discriminator-based KL estimate against the closed form for a few 1D Gaussian pairs."""
import numpy as np

from affmap import densities as D
from affmap import nn_core as nn
from affmap import objectives as obj

rng = np.random.default_rng(0)
for mu1, s1 in ((0.0, 1.0), (1.0, 1.0), (0.0, 2.0), (2.0, 0.5)):
    q, p = rng.normal(0, 1, (100_000, 1)), rng.normal(mu1, s1, (100_000, 1))
    spec = nn.mlp([1, 32, 32, 1], seed=0, out_act="sigmoid")
    disc = obj.train_discriminator(q, p, spec, nn.OptimConfig("adam", lr=2e-3, batch_size=512, iterations=1500))
    est = obj.discriminator_as_kl_estimator(disc, q, p)
    print(f"KL[N(0,1) || N({mu1:g},{s1:g}^2)]  estimate {est:7.4f}  exact {D.analytic_kl_gaussians(0, 1, mu1, s1):7.4f}")
