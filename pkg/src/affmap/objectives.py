"""Training criteria: pixel losses, affine/soft GAN, denoiser guidance.

A :class:`Generator` wraps a network ``f`` and decides how its raw output
becomes the SR estimate: affine projected (``projector`` set) or raw with an
optional soft penalty ``soft_weight * MAE(x, A y)``. Every step function
computes gradients with :mod:`affmap.nn_core` and applies one optimiser step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .linops import AffineProjector, DownsampleOperator, apply_downsample, apply_downsample_adjoint, \
    project, project_gradient

log = logging.getLogger(__name__)

EPS = 1e-7


# ---------------------------------------------------------------------------
# pixel losses
# ---------------------------------------------------------------------------

def pixel_loss(yhat, y, kind="mse"):
    """Mean over batch and pixels; returns ``(loss, dloss/dyhat)``."""
    yhat, y = np.asarray(yhat), np.asarray(y)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch: {yhat.shape} vs {y.shape}")
    diff = yhat - y
    if kind == "mse":
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    if kind == "mae":
        return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size
    raise ValueError(f"kind must be 'mse' or 'mae', got {kind!r}")


# ---------------------------------------------------------------------------
# generator wrapper
# ---------------------------------------------------------------------------

@dataclass
class Generator:
    spec: nn.NetSpec
    state: nn.NetState
    projector: AffineProjector | None = None
    down: DownsampleOperator | None = None
    soft_weight: float = 0.0
    z_dim: int = 0

    def __post_init__(self):
        if self.soft_weight < 0:
            raise ValueError("soft-constraint weight must be >= 0")
        if self.down is None and self.projector is not None:
            self.down = self.projector.down

    @property
    def affine(self):
        return self.projector is not None


@dataclass
class GenCache:
    x: np.ndarray
    f_out: np.ndarray
    y: np.ndarray
    tape: nn.Tape


def _net_input(gen, x, z):
    if gen.z_dim == 0:
        return x
    if z is None:
        raise ValueError("stochastic generator needs z")
    return np.concatenate([x.reshape(len(x), -1), z], axis=1)


def generate(gen: Generator, x, z=None, mode="train"):
    f_out, tape = nn.forward(gen.spec, gen.state, _net_input(gen, x, z), mode)
    y = project(gen.projector, f_out, x) if gen.affine else f_out
    return y, GenCache(x, f_out, y, tape)


def soft_constraint(gen: Generator, x, y):
    """``MAE(x, A y)`` and its gradient w.r.t. ``y``."""
    r = apply_downsample(gen.down, y) - x
    return float(np.mean(np.abs(r))), apply_downsample_adjoint(gen.down, np.sign(r) / r.size)


def generator_backward(gen: Generator, cache: GenCache, upstream):
    """Parameter gradients for an upstream gradient on the SR output ``y``.

    Adds the soft-constraint term for non-projected generators.
    """
    if gen.affine:
        g_f = project_gradient(gen.projector, upstream)
    else:
        g_f = upstream
        if gen.soft_weight > 0:
            g_f = g_f + gen.soft_weight * soft_constraint(gen, cache.x, cache.y)[1]
    grads, _ = nn.backward(cache.tape, g_f)
    return grads


def predict_sr(gen: Generator, x, z=None, batch=4096):
    x = np.asarray(x, dtype=gen.spec.dtype)
    outs = []
    for i in range(0, len(x), batch):
        zi = None if z is None else z[i:i + batch]
        outs.append(generate(gen, x[i:i + batch], zi, mode="eval")[0])
    return np.concatenate(outs)


def pixel_step(gen: Generator, x, y, kind, opt: nn.OptimConfig):
    yhat, cache = generate(gen, x)
    loss, g = pixel_loss(yhat, y, kind)
    nn.optimizer_step(gen.state, generator_backward(gen, cache, g), opt)
    return loss


# ---------------------------------------------------------------------------
# GAN
# ---------------------------------------------------------------------------

@dataclass
class GanLosses:
    d_loss: float
    g_loss: float
    saturated: float = 0.0  # fraction of D outputs hitting the clamp in the G step
    sigma: float = 0.0


@dataclass
class Discriminator:
    spec: nn.NetSpec
    state: nn.NetState


def _clamp(d):
    return np.clip(d, EPS, 1 - EPS)


def _inside(d):
    return (d > EPS) & (d < 1 - EPS)


def d_losses(d_real, d_fake):
    """-E log D(y) - E log(1 - D(y_hat)) with the usual clamp."""
    return float(-np.mean(np.log(_clamp(d_real))) - np.mean(np.log(1 - _clamp(d_fake))))


def g_loss_value(d_fake):
    d = _clamp(d_fake)
    return float(-np.mean(np.log(d) - np.log1p(-d)))


def discriminator_step(disc: Discriminator, real, fake, opt: nn.OptimConfig):
    d_real, t_real = nn.forward(disc.spec, disc.state, real)
    d_fake, t_fake = nn.forward(disc.spec, disc.state, fake)
    loss = d_losses(d_real, d_fake)
    g_real = -_inside(d_real).astype(d_real.dtype) / np.maximum(d_real, EPS) / len(real)
    g_fake = _inside(d_fake).astype(d_fake.dtype) / np.maximum(1 - d_fake, EPS) / len(fake)
    grads_r, _ = nn.backward(t_real, g_real)
    grads_f, _ = nn.backward(t_fake, g_fake)
    nn.optimizer_step(disc.state, nn.add_grads(grads_r, grads_f), opt)
    return loss


def generator_adversarial_grad(disc: Discriminator, y_noisy):
    """g_loss = -E log[D/(1-D)] and its gradient w.r.t. the (noisy) samples."""
    d, tape = nn.forward(disc.spec, disc.state, y_noisy)
    inside = _inside(d)
    # d/dD of -log(D/(1-D)) = -1/(D(1-D))
    g = -inside.astype(d.dtype) / np.maximum(d * (1 - d), EPS * EPS) / len(y_noisy)
    _, g_y = nn.backward(tape, g)
    return g_loss_value(d), g_y, float(np.mean(~inside))


def gan_step(gen: Generator, disc: Discriminator, real_batch, lr_batch, sigma, k_d,
             opt_g: nn.OptimConfig, opt_d: nn.OptimConfig, rng, z=None) -> GanLosses:
    """k_d discriminator updates followed by one generator update (instance noise ``sigma``)."""
    if sigma < 0 or k_d < 1:
        raise ValueError("need sigma >= 0 and k_d >= 1")
    yhat, _ = generate(gen, lr_batch, z)
    d_loss = 0.0
    for _ in range(k_d):
        real = real_batch + sigma * rng.standard_normal(real_batch.shape) if sigma > 0 else real_batch
        fake = yhat + sigma * rng.standard_normal(yhat.shape) if sigma > 0 else yhat
        d_loss = discriminator_step(disc, real, fake, opt_d)
    yhat, cache = generate(gen, lr_batch, z)
    noisy = yhat + sigma * rng.standard_normal(yhat.shape) if sigma > 0 else yhat
    g_loss, g_y, sat = generator_adversarial_grad(disc, noisy)
    if sat > 0.5:
        log.debug("discriminator saturated on %.0f%% of the batch", 100 * sat)
    nn.optimizer_step(gen.state, generator_backward(gen, cache, g_y), opt_g)
    return GanLosses(d_loss, g_loss, sat, sigma)


def train_discriminator(samples_q, samples_p, spec: nn.NetSpec, opt: nn.OptimConfig, rng=None):
    """Logistic regression of p (label 1) against q (label 0)."""
    rng = rng or np.random.default_rng(opt.seed)
    disc = Discriminator(spec, nn.init_state(spec))
    bs = opt.batch_size
    for _ in range(opt.iterations):
        ip = rng.integers(0, len(samples_p), bs)
        iq = rng.integers(0, len(samples_q), bs)
        discriminator_step(disc, samples_p[ip], samples_q[iq], opt)
    return disc


def discriminator_as_kl_estimator(disc: Discriminator, samples_q, samples_p=None):
    """KL[q || p] estimate: -E_q log[D/(1-D)] with D the probability of p.

    ``samples_p`` is accepted for symmetry with the training call; the
    estimate only needs D evaluated on q.
    """
    d = _clamp(nn.predict(disc.spec, disc.state, samples_q))
    return float(-np.mean(np.log(d) - np.log1p(-d)))


# ---------------------------------------------------------------------------
# instance noise
# ---------------------------------------------------------------------------

@dataclass
class InstanceNoiseSchedule:
    family: str = "linear"
    sigma_start: float = 0.1
    sigma_end: float = 0.0
    horizon: int = 1000
    target: float = 2 * math.log(2) * 0.9
    sigma: float = field(init=False)

    def __post_init__(self):
        if self.family not in ("linear", "adaptive", "constant"):
            raise ValueError(f"unknown instance-noise family {self.family!r}")
        if not self.sigma_start >= self.sigma_end >= 0:
            raise ValueError("need sigma_start >= sigma_end >= 0")
        self.sigma = self.sigma_start

    def value(self, t):
        if self.family == "constant":
            return self.sigma_start
        if self.family == "adaptive":
            return self.sigma
        frac = min(max(t / max(self.horizon, 1), 0.0), 1.0)
        return self.sigma_start + (self.sigma_end - self.sigma_start) * frac

    def update(self, d_loss):
        """Adaptive controller: more noise while D is winning, less while it is losing."""
        if self.family != "adaptive":
            return self.sigma
        if d_loss < self.target - 0.1:
            self.sigma *= 1.05
        elif d_loss > self.target + 0.1:
            self.sigma *= 0.95
        self.sigma = min(max(self.sigma, self.sigma_end), self.sigma_start)
        return self.sigma


# ---------------------------------------------------------------------------
# denoisers
# ---------------------------------------------------------------------------

@dataclass
class DenoiserSchedule:
    sigmas: tuple
    checkpoint_ids: tuple = ()

    def __post_init__(self):
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if not self.sigmas or any(s <= 0 for s in self.sigmas):
            raise ValueError("denoiser noise levels must be positive")
        if any(a <= b for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError("denoiser noise levels must be strictly decreasing")
        if not self.checkpoint_ids:
            self.checkpoint_ids = tuple(f"dae_sigma{s:g}" for s in self.sigmas)

    def index_at(self, iteration, total):
        """Checkpoint in use at ``iteration``: swaps at evenly spaced fractions of ``total``."""
        k = len(self.sigmas)
        return min(int(k * iteration / max(total, 1)), k - 1)

    @classmethod
    def geometric(cls, start, end, levels):
        if levels == 1:
            return cls((start,))
        return cls(tuple(np.geomspace(start, end, levels)))


class Denoiser:
    """Callable denoiser trained (or defined) for one noise level."""

    def __init__(self, sigma, fn=None, spec=None, state=None):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.fn, self.spec, self.state = fn, spec, state

    def __call__(self, y):
        if self.fn is not None:
            return self.fn(y)
        return nn.predict(self.spec, self.state, y)


def dae_pretrain(spec: nn.NetSpec, sample_data, schedule: DenoiserSchedule, opt: nn.OptimConfig,
                 iters_per_level=None, rng=None, state=None):
    """Train one denoiser through the noise schedule, saving a checkpoint per level.

    ``sample_data(n, rng)`` returns clean samples. Returns a list of
    :class:`Denoiser` in schedule order.
    """
    rng = rng or np.random.default_rng(opt.seed)
    state = state or nn.init_state(spec)
    per_level = iters_per_level or max(opt.iterations // len(schedule.sigmas), 1)
    out = []
    for sigma in schedule.sigmas:
        for it in range(per_level):
            y = sample_data(opt.batch_size, rng)
            noisy = y + sigma * rng.standard_normal(y.shape)
            try:
                pred, tape = nn.forward(spec, state, noisy)
            except FloatingPointError:
                pred = None
            loss, g = pixel_loss(pred, y, "mse") if pred is not None else (math.nan, None)
            if not math.isfinite(loss) or loss > 1e8:
                raise FloatingPointError(f"DAE training diverged at sigma={sigma:g}, iteration {it}")
            grads, _ = nn.backward(tape, g)
            nn.optimizer_step(state, grads, opt)
        out.append(Denoiser(sigma, spec=spec, state=state.copy()))
    return out


def denoiser_gradient(denoiser, y):
    """(f(y) - y) / sigma^2, an estimate of the score d/dy log p(y)."""
    y = np.asarray(y)
    return (denoiser(y) - y) / denoiser.sigma ** 2


def denoiser_guided_step(gen: Generator, denoiser, lr_batch, opt: nn.OptimConfig, score=None):
    """Ascend E_x log p(y_hat) using the denoiser's score estimate as upstream signal.

    ``score`` may replace the denoiser with any callable returning d log p / dy
    (e.g. an exact KDE gradient). Returns False if the batch was skipped.
    """
    yhat, cache = generate(gen, lr_batch)
    s = score(yhat) if score is not None else denoiser_gradient(denoiser, yhat)
    if not np.all(np.isfinite(s)):
        log.warning("non-finite denoiser gradient; batch skipped")
        return False
    upstream = -s / len(yhat)
    nn.optimizer_step(gen.state, generator_backward(gen, cache, upstream), opt)
    return True


# ---------------------------------------------------------------------------
# stochastic generator
# ---------------------------------------------------------------------------

def stochastic_generator_sample(gen: Generator, x, n, rng):
    """``n`` draws of y = P_x f(x, z), z ~ N(0, I), for a single observation ``x``."""
    if gen.z_dim < 1:
        raise ValueError("generator has no noise input")
    x = np.asarray(x, dtype=gen.spec.dtype).reshape((1,) + tuple(np.shape(x)))
    xs = np.repeat(x, n, axis=0)
    z = rng.standard_normal((n, gen.z_dim))
    return predict_sr(gen, xs, z)
