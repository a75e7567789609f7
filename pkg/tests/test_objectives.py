import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import logsumexp

from affmap import densities as D
from affmap import nn_core as nn
from affmap import objectives as obj
from affmap.linops import AffineProjector, apply_downsample, closed_form_pseudoinverse, toy_average
from conftest import rel_err


def toy_projector():
    op = toy_average()
    return AffineProjector(op, closed_form_pseudoinverse(op), tolerance=1e-10)


def constant_disc(value, dim=2):
    spec = nn.NetSpec((dim,), (nn.Dense(dim, 1), nn.Sigmoid()), seed=0)
    state = nn.init_state(spec)
    state.params[0]["w"][...] = 0
    state.params[0]["b"][...] = math.log(value / (1 - value))
    return obj.Discriminator(spec, state)


def toy_generator(kind="aff", seed=0, z_dim=0):
    spec = nn.mlp([1 + z_dim, 16, 16, 2], seed=seed)
    state = nn.init_state(spec)
    if kind == "aff":
        return obj.Generator(spec, state, projector=toy_projector(), z_dim=z_dim)
    return obj.Generator(spec, state, down=toy_average(), soft_weight=10.0 if kind == "soft" else 0.0, z_dim=z_dim)


def flat_params(state):
    return np.concatenate([v.ravel() for p in state.params for _, v in sorted(p.items())])


def set_flat(state, theta):
    i = 0
    for p in state.params:
        for k, v in sorted(p.items()):
            p[k] = theta[i:i + v.size].reshape(v.shape)
            i += v.size


def flat_grads(grads):
    return np.concatenate([v.ravel() for g in grads for _, v in sorted(g.items())])


# ---------------------------------------------------------------------------
# pixel losses
# ---------------------------------------------------------------------------

def test_pixel_loss_values():
    y = np.array([[0.3, -1.0]])
    assert obj.pixel_loss(y, y, "mse")[0] == 0.0 and obj.pixel_loss(y, y, "mae")[0] == 0.0
    assert obj.pixel_loss(np.array([0.6]), np.array([0.4]), "mse")[0] == pytest.approx(0.04)
    assert obj.pixel_loss(np.array([0.6]), np.array([0.4]), "mae")[0] == pytest.approx(0.2)
    with pytest.raises(ValueError):
        obj.pixel_loss(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        obj.pixel_loss(y, y, "huber")


@pytest.mark.parametrize("kind", ["mse", "mae"])
def test_pixel_loss_gradient(rng, kind):
    y = rng.standard_normal((4, 3))
    yhat = y + rng.uniform(0.1, 1.0, y.shape) * rng.choice([-1, 1], y.shape)  # keep away from MAE kinks
    _, g = obj.pixel_loss(yhat, y, kind)
    _, fd = nn.grad_check(lambda z: obj.pixel_loss(z, y, kind)[0], yhat)
    assert rel_err(g.ravel(), fd) <= 1e-6


# ---------------------------------------------------------------------------
# GAN
# ---------------------------------------------------------------------------

def test_constant_half_discriminator_losses(rng):
    disc = constant_disc(0.5)
    real, fake = rng.standard_normal((2, 32, 2))
    d_real = nn.predict(disc.spec, disc.state, real)
    d_fake = nn.predict(disc.spec, disc.state, fake)
    assert obj.d_losses(d_real, d_fake) == pytest.approx(2 * math.log(2), abs=1e-12)
    g, g_y, sat = obj.generator_adversarial_grad(disc, fake)
    assert g == pytest.approx(0.0, abs=1e-12) and np.all(g_y == 0) and sat == 0.0


def test_bayes_optimal_discriminator_recovers_kl():
    z = np.random.default_rng(3).normal(0, 1, 100_000)
    p, q = stats.norm.pdf(z, 1, 1), stats.norm.pdf(z, 0, 1)
    d_star = p / (p + q)
    est = obj.g_loss_value(d_star)  # -E_q log[D*/(1-D*)] = KL[q||p]
    assert est == pytest.approx(D.analytic_kl_gaussians(0, 1, 1, 1), rel=0.1)


def test_clamp_keeps_losses_finite():
    d = np.array([0.0, 1.0, 0.5])
    assert math.isfinite(obj.d_losses(d, d)) and math.isfinite(obj.g_loss_value(d))


def test_adversarial_gradient_matches_finite_differences(rng):
    spec = nn.mlp([2, 8, 1], seed=4, out_act="sigmoid")
    disc = obj.Discriminator(spec, nn.init_state(spec))
    y = rng.standard_normal((5, 2))
    _, g_y, _ = obj.generator_adversarial_grad(disc, y)
    f = lambda v: obj.g_loss_value(nn.predict(spec, disc.state, v))
    _, fd = nn.grad_check(f, y)
    assert rel_err(g_y.ravel(), fd) <= 1e-6


@pytest.mark.parametrize("kind", ["aff", "soft"])
def test_generator_chain_matches_finite_differences(rng, kind):
    """d g_loss / d theta through the projection (or the soft penalty) with D frozen."""
    gen = toy_generator(kind, seed=2)
    dspec = nn.mlp([2, 8, 1], seed=5, out_act="sigmoid")
    disc = obj.Discriminator(dspec, nn.init_state(dspec))
    x = rng.uniform(-3, 3, (6, 1))

    def total(theta):
        set_flat(gen.state, theta)
        y, _ = obj.generate(gen, x)
        loss = obj.g_loss_value(nn.predict(dspec, disc.state, y))
        if kind == "soft":
            loss += gen.soft_weight * obj.soft_constraint(gen, x, y)[0]
        return loss

    theta = flat_params(gen.state)
    y, cache = obj.generate(gen, x)
    _, g_y, _ = obj.generator_adversarial_grad(disc, y)
    grads = flat_grads(obj.generator_backward(gen, cache, g_y))
    _, fd = nn.grad_check(total, theta.copy())
    set_flat(gen.state, theta)
    assert rel_err(grads, fd) <= 1e-4


def test_affine_gan_steps_never_change_consistency(rng):
    gen = toy_generator("aff", seed=1)
    dspec = nn.mlp([2, 16, 1], seed=7, out_act="sigmoid")
    disc = obj.Discriminator(dspec, nn.init_state(dspec))
    opt = nn.OptimConfig("adam", lr=1e-2)
    x_eval = np.linspace(-8, 8, 33)[:, None]
    p = D.SwissRollParams()
    for _ in range(30):
        x = D.observe(D.sample_swiss_roll(p, 64, rng))
        obj.gan_step(gen, disc, D.sample_swiss_roll(p, 64, rng), x, 0.1, 2, opt, opt, rng)
        y = obj.predict_sr(gen, x_eval)
        assert np.max(np.abs(apply_downsample(gen.down, y) - x_eval)) <= 1e-12


def test_gan_step_validates_arguments(rng):
    gen = toy_generator()
    disc = constant_disc(0.5)
    x = np.zeros((2, 1))
    with pytest.raises(ValueError):
        obj.gan_step(gen, disc, np.zeros((2, 2)), x, -0.1, 1, nn.OptimConfig(), nn.OptimConfig(), rng)
    with pytest.raises(ValueError):
        obj.gan_step(gen, disc, np.zeros((2, 2)), x, 0.0, 0, nn.OptimConfig(), nn.OptimConfig(), rng)


def test_saturated_discriminator_is_counted(rng):
    disc = constant_disc(1 - 1e-9)
    _, g_y, sat = obj.generator_adversarial_grad(disc, rng.standard_normal((8, 2)))
    assert sat == 1.0 and np.all(g_y == 0)


def test_instance_noise_lifts_loss_on_separable_point_masses():
    """Fixed logistic D separating point masses at 0 (fake) and 1 (real)."""
    spec = nn.NetSpec((1,), (nn.Dense(1, 1), nn.Sigmoid()))
    state = nn.init_state(spec)
    state.params[0]["w"][...] = 8.0
    state.params[0]["b"][...] = -4.0
    r = np.random.default_rng(0)
    real, fake = np.ones((20_000, 1)), np.zeros((20_000, 1))
    f = lambda v: nn.predict(spec, state, v)
    clean = obj.d_losses(f(real), f(fake))
    for sigma in (0.1, 0.3):
        noisy = obj.d_losses(f(real + sigma * r.standard_normal(real.shape)),
                             f(fake + sigma * r.standard_normal(fake.shape)))
        assert noisy > clean


@settings(max_examples=50)
@given(st.floats(0.0, 2.0), st.floats(0.0, 1.0), st.integers(1, 5000))
def test_linear_schedule_is_non_increasing(start, frac, horizon):
    sched = obj.InstanceNoiseSchedule("linear", start, start * frac, horizon)
    vals = [sched.value(t) for t in np.linspace(0, 1.5 * horizon, 40)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[0] == start and vals[-1] == pytest.approx(start * frac)


def test_adaptive_schedule_stays_in_range():
    sched = obj.InstanceNoiseSchedule("adaptive", 0.5, 0.05, 100, target=1.2)
    for d in [0.2] * 50:  # D winning: more noise, capped at the start value
        sched.update(d)
    assert sched.value(0) == 0.5
    for d in [2.0] * 200:
        sched.update(d)
    assert sched.value(0) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        obj.InstanceNoiseSchedule("linear", 0.1, 0.2)
    with pytest.raises(ValueError):
        obj.InstanceNoiseSchedule("cosine")


# ---------------------------------------------------------------------------
# KL estimator
# ---------------------------------------------------------------------------

def _kl_estimate(q, p, seed):
    spec = nn.mlp([1, 32, 32, 1], seed=seed, out_act="sigmoid")
    disc = obj.train_discriminator(q[:, None], p[:, None], spec,
                                   nn.OptimConfig("adam", lr=2e-3, batch_size=512, iterations=1500, seed=seed))
    return obj.discriminator_as_kl_estimator(disc, q[:, None], p[:, None])


@pytest.mark.parametrize("mu1,s1", [(1.0, 1.0), (0.0, 2.0)])
def test_kl_estimator_against_closed_form(mu1, s1):
    r = np.random.default_rng(21)
    q, p = r.normal(0, 1, 100_000), r.normal(mu1, s1, 100_000)
    assert abs(_kl_estimate(q, p, 0) - D.analytic_kl_gaussians(0, 1, mu1, s1)) <= 0.1


def test_kl_estimator_zero_for_identical_distributions():
    r = np.random.default_rng(22)
    q, p = r.normal(0, 1, 100_000), r.normal(0, 1, 100_000)
    assert abs(_kl_estimate(q, p, 1)) <= 0.05


# ---------------------------------------------------------------------------
# denoisers
# ---------------------------------------------------------------------------

def test_denoiser_schedule_validation_and_swaps():
    with pytest.raises(ValueError):
        obj.DenoiserSchedule((0.5, 0.5))
    with pytest.raises(ValueError):
        obj.DenoiserSchedule((0.5, -0.1))
    s = obj.DenoiserSchedule.geometric(0.5, 0.25, 3)
    assert s.sigmas[0] == 0.5 and s.sigmas[-1] == pytest.approx(0.25)
    assert [s.index_at(i, 90) for i in (0, 29, 30, 59, 60, 89)] == [0, 0, 1, 1, 2, 2]
    assert len(set(s.checkpoint_ids)) == 3


def test_identity_denoiser_has_zero_gradient(rng):
    y = rng.standard_normal((10, 2))
    assert np.all(obj.denoiser_gradient(obj.Denoiser(0.3, fn=lambda v: v), y) == 0)


def test_denoiser_gradient_error_is_second_order():
    mu, s, y = np.array([0.5, -1.0]), 1.0, np.array([[1.5, 0.2], [-0.4, -2.0]])
    exact = (mu - y) / s ** 2
    errs = []
    for sigma in (0.4, 0.2, 0.1, 0.05):
        den = obj.Denoiser(sigma, fn=lambda v, sg=sigma: D.analytic_denoiser_gaussian(mu, s, sg, v))
        errs.append(np.mean(np.linalg.norm(obj.denoiser_gradient(den, y) - exact, axis=1)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios >= 3) & (ratios <= 5)), ratios


def _tweedie_kde_denoiser(ref, h, sigma):
    """Bayes-optimal denoiser for a Gaussian KDE prior, by brute force over the reference set."""
    v = h * h + sigma * sigma

    def f(y):
        d2 = np.sum((y[:, None, :] - ref[None]) ** 2, axis=2)
        logw = -d2 / (2 * v)
        w = np.exp(logw - logsumexp(logw, axis=1, keepdims=True))
        means = (h * h * y[:, None, :] + sigma * sigma * ref[None]) / v
        return np.einsum("nk,nkd->nd", w, means)
    return f


def test_denoiser_gradient_vanishes_at_a_kde_mode():
    r = np.random.default_rng(5)
    ref = D.sample_swiss_roll(D.SwissRollParams(sigma2=0.0), 2000, r)
    sigma, h = 0.25, 0.2
    den = obj.Denoiser(sigma, fn=_tweedie_kde_denoiser(ref, h, sigma))
    y = ref[:1] + 0.3
    for _ in range(400):  # mean-shift style ascent on the smoothed density
        y = den(y)
    probe = D.sample_swiss_roll(D.SwissRollParams(), 200, r)
    avg = np.mean(np.linalg.norm(obj.denoiser_gradient(den, probe), axis=1))
    assert np.linalg.norm(obj.denoiser_gradient(den, y)) <= 0.1 * avg


def _small_dae(seed=0, hidden=64):
    layers = (nn.Dense(2, hidden), nn.ReLU(), nn.Dense(hidden, hidden), nn.ReLU(), nn.Dense(hidden, 2), nn.Skip(-1))
    return nn.NetSpec((2,), layers, seed=seed)


def test_dae_matches_gaussian_oracle():
    mu, s, sigma = np.array([1.0, -0.5]), 0.7, 0.5
    sample = lambda n, r: mu + s * r.standard_normal((n, 2))
    dens = obj.dae_pretrain(_small_dae(), sample, obj.DenoiserSchedule((sigma,)),
                            nn.OptimConfig("adam", lr=3e-4, batch_size=512, iterations=3000), rng=np.random.default_rng(0))
    r = np.random.default_rng(1)
    noisy = sample(2000, r) + sigma * r.standard_normal((2000, 2))
    gap = np.linalg.norm(dens[0](noisy) - D.analytic_denoiser_gaussian(mu, s, sigma, noisy), axis=1)
    assert gap.mean() <= 0.05


def test_dae_huge_noise_collapses_to_mean():
    mu = np.array([2.0, -1.0])
    sample = lambda n, r: mu + 0.3 * r.standard_normal((n, 2))
    dens = obj.dae_pretrain(_small_dae(1), sample, obj.DenoiserSchedule((50.0,)),
                            nn.OptimConfig("adam", lr=3e-3, batch_size=512, iterations=1500), rng=np.random.default_rng(2))
    noisy = mu + 50.0 * np.random.default_rng(3).standard_normal((500, 2))
    assert np.linalg.norm(dens[0](noisy).mean(0) - mu) <= 0.15


def test_dae_divergence_reports_sigma_and_iteration():
    sample = lambda n, r: np.full((n, 2), np.nan)
    with pytest.raises(FloatingPointError, match=r"sigma=0.5.*iteration 0"):
        obj.dae_pretrain(_small_dae(), sample, obj.DenoiserSchedule((0.5,)), nn.OptimConfig(iterations=5))


def test_dae_matches_mixture_oracle_and_moves_uphill():
    """Two-bump prior: the exact posterior-mean denoiser is known in closed form."""
    w, mus, ss, sigma = [0.5, 0.5], np.array([[-1.5, 0.0], [1.5, 0.0]]), [0.3, 0.3], 0.3

    def sample(n, r):
        return mus[r.integers(0, 2, n)] + 0.3 * r.standard_normal((n, 2))

    dens = obj.dae_pretrain(_small_dae(3, 64), sample, obj.DenoiserSchedule((sigma,)),
                            nn.OptimConfig("adam", lr=1e-3, batch_size=256, iterations=3000),
                            rng=np.random.default_rng(4))
    r = np.random.default_rng(5)
    noisy = sample(2000, r) + sigma * r.standard_normal((2000, 2))
    exact = D.analytic_denoiser_mixture(w, mus, ss, sigma, noisy)
    out = dens[0](noisy)
    assert np.linalg.norm(out - exact, axis=1).mean() <= 0.25 * np.linalg.norm(exact - noisy, axis=1).mean()

    # E[y | y~] climbs the sigma-smoothed prior, not the raw one
    v = ss[0] ** 2 + sigma ** 2
    logp = lambda y: logsumexp(-np.sum((y[:, None] - mus) ** 2, axis=-1) / (2 * v), axis=1)
    assert np.mean(logp(out) > logp(noisy)) >= 0.95


def test_kde_guided_chain_matches_finite_differences(toy_kde, rng):
    """Parameter gradient of -mean log p(project(f(x))) with the exact KDE score as upstream."""
    gen = toy_generator("aff", seed=3)
    x = rng.uniform(-2, 2, (5, 1))
    theta = flat_params(gen.state)

    def loss(th):
        set_flat(gen.state, th)
        return -float(np.mean(toy_kde.log_density_raw(obj.generate(gen, x)[0])))

    y, cache = obj.generate(gen, x)
    grads = flat_grads(obj.generator_backward(gen, cache, -toy_kde.grad_log_density(y) / len(y)))
    _, fd = nn.grad_check(loss, theta.copy())
    set_flat(gen.state, theta)
    assert rel_err(grads, fd) <= 1e-3


def test_guided_step_skips_non_finite_scores(rng):
    gen = toy_generator("aff")
    before = flat_params(gen.state)
    ok = obj.denoiser_guided_step(gen, None, rng.standard_normal((4, 1)), nn.OptimConfig(),
                                  score=lambda y: np.full_like(y, np.nan))
    assert ok is False and np.array_equal(flat_params(gen.state), before)


def test_guided_steps_ascend_gaussian_log_density(rng):
    mu = np.array([1.0, 3.0])
    gen = toy_generator("aff", seed=4)
    opt = nn.OptimConfig("adam", lr=1e-2)
    x = rng.uniform(-1, 1, (64, 1))
    logp = lambda y: -0.5 * np.sum((y - mu) ** 2, axis=1).mean()
    start = logp(obj.predict_sr(gen, x))
    for _ in range(200):
        obj.denoiser_guided_step(gen, None, x, opt, score=lambda y: mu - y)
    end = obj.predict_sr(gen, x)
    assert logp(end) > start
    np.testing.assert_allclose(end.sum(1), 2 * x[:, 0], atol=1e-12)


# ---------------------------------------------------------------------------
# stochastic generator
# ---------------------------------------------------------------------------

def test_stochastic_samples_are_consistent_and_spread(rng):
    gen = toy_generator("aff", seed=6, z_dim=2)
    ys = obj.stochastic_generator_sample(gen, [0.5], 64, rng)
    np.testing.assert_allclose(apply_downsample(gen.down, ys), 0.5, atol=1e-12)
    assert np.std(ys[:, 0]) > 1e-3
    with pytest.raises(ValueError):
        obj.stochastic_generator_sample(toy_generator("aff"), [0.5], 4, rng)


@pytest.mark.slow
def test_trained_stochastic_generator_beats_posterior_mean(toy_kde, toy_grid, toy_oracles):
    """Samples of a noise-conditioned AffGAN sit in denser regions than the blurry conditional mean."""
    p = D.SwissRollParams()
    r = np.random.default_rng(8)
    gen = toy_generator("aff", seed=8, z_dim=1)
    gen.spec = nn.mlp([2, 64, 64, 2], seed=8)
    gen.state = nn.init_state(gen.spec)
    dspec = nn.mlp([2, 64, 64, 1], seed=9, out_act="sigmoid")
    disc = obj.Discriminator(dspec, nn.init_state(dspec))
    n_iter = 10_000
    noise = obj.InstanceNoiseSchedule("linear", 1.0, 0.1, n_iter)
    for it in range(n_iter):
        x = D.observe(D.sample_swiss_roll(p, 128, r))
        z = r.standard_normal((128, 1))
        lr = 5e-4 * (1 - it / n_iter)
        obj.gan_step(gen, disc, D.sample_swiss_roll(p, 128, r), x, noise.value(it), 2,
                     nn.OptimConfig("adam", lr=lr), nn.OptimConfig("adam", lr=1e-3), r, z)
    xs, w = toy_grid
    ys = np.concatenate([obj.stochastic_generator_sample(gen, [x], 8, r) for x in xs])
    assert np.all(np.isfinite(ys))
    np.testing.assert_allclose(ys.mean(1), np.repeat(xs, 8), atol=1e-12)
    ce_samples = D.cross_entropy(toy_kde, ys, np.repeat(w, 8))[0]
    ce_mean = D.cross_entropy(toy_kde, toy_oracles["mean"], w)[0]
    ce_map = D.cross_entropy(toy_kde, toy_oracles["map"], w)[0]
    assert ce_map < ce_samples < ce_mean
