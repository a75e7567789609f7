"""Toy image pipeline: procedural textures, PGM I/O, CNN builders, and the two image experiments."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn_core as nn
from . import objectives as obj
from .linops import (AffineProjector, DownsampleOperator, PseudoInverseOperator, apply_downsample, apply_pinv,
                     pinv_param_grad, project, random_pseudoinverse)
from .metrics import MetricsRow, hr_mse, lr_consistency, psnr, ssim

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def band_limited_textures(n, size=32, seed=0, f_lo=0.04, f_hi=0.25):
    """Grayscale noise textures in [0, 1] with a random radial pass band per image."""
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    radius = np.sqrt(fx ** 2 + fy ** 2)
    out = np.empty((n, 1, size, size))
    for i in range(n):
        centre = rng.uniform(f_lo, f_hi)
        width = rng.uniform(0.02, 0.08)
        gain = np.exp(-0.5 * ((radius - centre) / width) ** 2) + 0.5 * np.exp(-0.5 * (radius / 0.03) ** 2)
        spec = np.fft.rfft2(rng.standard_normal((size, size))) * gain
        img = np.fft.irfft2(spec, s=(size, size))
        img = (img - img.min()) / (img.max() - img.min() + 1e-12)
        out[i, 0] = img
    return out


def write_pgm(path, img):
    """8-bit binary PGM; ``img`` in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D image")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode() + q.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    raw = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return raw.reshape(h, w) / float(maxval)


def image_grid(images, cols=8, pad=1):
    """Tile (N, 1, H, W) images into one 2-D array."""
    n, _, h, w = images.shape
    rows = -(-n // cols)
    grid = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i in range(n):
        r, c = divmod(i, cols)
        grid[pad + r * (h + pad):pad + r * (h + pad) + h, pad + c * (w + pad):pad + c * (w + pad) + w] = images[i, 0]
    return grid


@dataclass
class ToyImageDataset:
    hr: np.ndarray
    lr: np.ndarray

    @classmethod
    def build(cls, op: DownsampleOperator, n, size=32, seed=0, source="procedural", dtype="float64"):
        if source == "procedural":
            hr = band_limited_textures(n, size, seed)
        else:
            files = sorted(Path(source).glob("*.pgm"))
            if not files:
                raise FileNotFoundError(f"no .pgm files in {source}")
            crops = []
            rng = np.random.default_rng(seed)
            for i in range(n):
                img = read_pgm(files[i % len(files)])
                r = rng.integers(0, img.shape[0] - size + 1)
                c = rng.integers(0, img.shape[1] - size + 1)
                crops.append(img[r:r + size, c:c + size])
            hr = np.stack(crops)[:, None]
        hr = hr.astype(dtype)
        return cls(hr, apply_downsample(op, hr))

    def batch(self, rng, size):
        idx = rng.integers(0, len(self.hr), size)
        return self.lr[idx], self.hr[idx]


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def sr_cnn(lr_size, stride, channels=16, seed=0, dtype="float64", out_act=None):
    """LR -> HR CNN: two 3x3 conv blocks with a skip, then sub-pixel upsampling."""
    layers = [
        nn.Conv2d(1, channels, 3, padding="circular"), nn.ReLU(),
        nn.Conv2d(channels, channels, 3, padding="circular"), nn.BatchNorm(channels), nn.ReLU(),
        nn.Conv2d(channels, channels, 3, padding="circular"), nn.ReLU(),
        nn.Skip(1),
        nn.Conv2d(channels, stride * stride, 3, padding="circular"),
        nn.PixelShuffle(stride),
    ]
    if out_act == "sigmoid":
        layers.append(nn.Sigmoid())
    return nn.NetSpec((1, lr_size, lr_size), tuple(layers), seed=seed, dtype=dtype)


def disc_cnn(hr_size, channels=16, seed=0, dtype="float64"):
    feat = hr_size // 4
    layers = (
        nn.Conv2d(1, channels, 3, stride=2), nn.ReLU(),
        nn.Conv2d(channels, channels, 3, stride=2), nn.BatchNorm(channels), nn.ReLU(),
        nn.Dense(channels * feat * feat, 1), nn.Sigmoid(),
    )
    return nn.NetSpec((1, hr_size, hr_size), layers, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# MSE with / without affine projection
# ---------------------------------------------------------------------------

def _bank_state(pinv: PseudoInverseOperator):
    """Wrap a trainable kernel bank as a one-layer NetState so the shared optimiser can update it."""
    return nn.NetState([{"bank": pinv.kernel_bank}], [{}])


@dataclass
class MseAffineResult:
    variant: str
    seed: int
    rows: list


def run_mse_affine(variant, seed, data: ToyImageDataset, op: DownsampleOperator, pinv: PseudoInverseOperator,
                   opt: nn.OptimConfig, channels=16, log_every=50, dtype="float64", eval_batch=None):
    """Train one MSE variant; returns metrics rows logged on a fixed evaluation batch."""
    lr_size = op.out_shape[0]
    spec = sr_cnn(lr_size, op.stride, channels, seed=seed, dtype=dtype)
    state = nn.init_state(spec)
    if variant == "MSE-noproj":
        up = None
    elif variant == "MSE-randproj":
        up = random_pseudoinverse(op, pinv.kernel_bank.shape[-1], seed=seed + 7)
    else:
        up = PseudoInverseOperator(pinv.mode, pinv.stride, pinv.lr_shape, pinv.channels,
                                   pinv.kernel_bank.copy(), None, pinv.fit_loss, dict(pinv.fit_config))
    trainable = variant in ("MSE-trainproj", "MSE-randproj")
    proj = AffineProjector(op, up) if up is not None else None
    bank_state = _bank_state(up) if trainable else None

    x_eval, y_eval = eval_batch if eval_batch is not None else (data.lr[:64], data.hr[:64])
    rng = np.random.default_rng(seed + 1)
    rows = []

    def evaluate(it):
        f_out = nn.predict(spec, state, x_eval, batch=64)
        yhat = project(proj, f_out, x_eval) if proj else f_out
        rows.append(MetricsRow(f"{variant}/seed{seed}", it, psnr(np.clip(yhat, 0, 1), y_eval), ssim(yhat, y_eval),
                               lr_consistency(x_eval, yhat, op), hr_mse(yhat, y_eval)))

    evaluate(0)
    for it in range(1, opt.iterations + 1):
        x, y = data.batch(rng, opt.batch_size)
        f_out, tape = nn.forward(spec, state, x)
        if proj:
            resid = x - apply_downsample(op, f_out)
            yhat = f_out + apply_pinv(up, resid)
        else:
            yhat = f_out
        loss, g = obj.pixel_loss(yhat, y, "mse")
        if not np.isfinite(loss):
            raise FloatingPointError(f"{variant}: non-finite loss at iteration {it}")
        g_f = g if proj is None else obj.project_gradient(proj, g)
        grads, _ = nn.backward(tape, g_f)
        if trainable:
            nn.optimizer_step(bank_state, [{"bank": pinv_param_grad(up, resid, g)}], opt)
        nn.optimizer_step(state, grads, opt)
        if it % log_every == 0 or it == opt.iterations:
            evaluate(it)
    return MseAffineResult(variant, seed, rows)


# ---------------------------------------------------------------------------
# texture GAN (smoke scale)
# ---------------------------------------------------------------------------

@dataclass
class TextureResult:
    variant: str
    rows: list
    d_losses: list
    samples: np.ndarray
    diverged: bool = False


def run_texture(variant, seed, data: ToyImageDataset, proj: AffineProjector, opt: nn.OptimConfig,
                noise: obj.InstanceNoiseSchedule, channels=16, k_d=1, log_every=50, dtype="float64",
                n_samples=16):
    op = proj.down
    spec = sr_cnn(op.out_shape[0], op.stride, channels, seed=seed, dtype=dtype)
    gen = obj.Generator(spec, nn.init_state(spec), projector=proj)
    rng = np.random.default_rng(seed + 11)
    x_eval, y_eval = data.lr[:n_samples], data.hr[:n_samples]
    disc = None
    if variant == "AffGAN":
        dspec = disc_cnn(op.in_shape[0], channels, seed=seed + 1000, dtype=dtype)
        disc = obj.Discriminator(dspec, nn.init_state(dspec))
    rows, d_losses = [], []
    last_good = gen.state.copy()

    def evaluate(it):
        yhat = obj.predict_sr(gen, x_eval)
        rows.append(MetricsRow(f"{variant}/seed{seed}", it, psnr(np.clip(yhat, 0, 1), y_eval), ssim(yhat, y_eval),
                               lr_consistency(x_eval, yhat, op), hr_mse(yhat, y_eval)))

    evaluate(0)
    diverged = False
    for it in range(1, opt.iterations + 1):
        x, y = data.batch(rng, opt.batch_size)
        try:
            if disc is None:
                obj.pixel_step(gen, x, y, "mse", opt)
            else:
                _, y_real = data.batch(rng, opt.batch_size)
                sigma = noise.value(it)
                losses = obj.gan_step(gen, disc, y_real, x, sigma, k_d, opt, opt, rng)
                d_losses.append(losses.d_loss)
                noise.update(losses.d_loss)
        except FloatingPointError as exc:
            log.error("%s diverged at iteration %d: %s", variant, it, exc)
            gen.state = last_good
            diverged = True
            break
        if it % log_every == 0 or it == opt.iterations:
            evaluate(it)
            last_good = gen.state.copy()
    samples = obj.predict_sr(gen, x_eval)
    return TextureResult(variant, rows, d_losses, samples, diverged)
