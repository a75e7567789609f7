"""Swiss-roll prior, its Gaussian KDE surrogate, and brute-force oracles.

The KDE is evaluated exactly (up to ~1e-13 relative error): for each query we
find the nearest reference point at distance ``d`` and sum every kernel within
``sqrt(d^2 + 80 h^2)``; anything further contributes less than ``e^-40`` of the
largest term. Reference points live in a uniform cell list so the sum only
touches nearby cells.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import cKDTree

LOG_FLOOR = -745.0
_TAIL = 40.0  # kernels below exp(-_TAIL) of the nearest one are dropped


@dataclass(frozen=True)
class SwissRollParams:
    mu1: float = 10.0
    sigma1: float = 3.0
    mu2: float = 0.0
    sigma2: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ValueError("Swiss-roll standard deviations must be non-negative")


def sample_swiss_roll(params: SwissRollParams, n: int, rng=None):
    """Draw ``n`` points ``(cos(v1) r, sin(v1) r)`` with ``r = 0.4 v1 + v2``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    nu1 = rng.normal(params.mu1, params.sigma1, n)
    nu2 = rng.normal(params.mu2, params.sigma2, n)
    r = 0.4 * nu1 + nu2
    return np.stack([np.cos(nu1) * r, np.sin(nu1) * r], axis=1)


def observe(y):
    """Toy LR observation x = (y1 + y2) / 2, shape (N, 1)."""
    y = np.asarray(y)
    return 0.5 * (y[:, :1] + y[:, 1:2])


# ---------------------------------------------------------------------------
# KDE
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _kde_eval(q, dmin, pts, starts, x0, y0, cs, nx, ny, h, want_grad):
    m = q.shape[0]
    logs = np.empty(m)
    grad = np.zeros((m, 2))
    inv = 1.0 / (2.0 * h * h)
    extra = 2.0 * h * h * 40.0
    for i in range(m):
        qx = q[i, 0]
        qy = q[i, 1]
        d0 = dmin[i] * dmin[i]
        R = math.sqrt(d0 + extra)
        cx0 = max(int(math.floor((qx - R - x0) / cs)), 0)
        cx1 = min(int(math.floor((qx + R - x0) / cs)), nx - 1)
        cy0 = max(int(math.floor((qy - R - y0) / cs)), 0)
        cy1 = min(int(math.floor((qy + R - y0) / cs)), ny - 1)
        s = 0.0
        gx = 0.0
        gy = 0.0
        for cx in range(cx0, cx1 + 1):
            for cy in range(cy0, cy1 + 1):
                c = cx * ny + cy
                for j in range(starts[c], starts[c + 1]):
                    dx = pts[j, 0] - qx
                    dy = pts[j, 1] - qy
                    e = math.exp(-(dx * dx + dy * dy - d0) * inv)
                    s += e
                    if want_grad:
                        gx += e * dx
                        gy += e * dy
        logs[i] = math.log(s) - d0 * inv
        if want_grad:
            grad[i, 0] = gx / (s * h * h)
            grad[i, 1] = gy / (s * h * h)
    return logs, grad


class KdeModel:
    """Isotropic Gaussian KDE in 2D. Immutable after construction."""

    def __init__(self, reference, bandwidth=0.2, cell=0.4):
        ref = np.ascontiguousarray(reference, dtype=np.float64)
        if ref.ndim != 2 or ref.shape[1] != 2:
            raise ValueError("reference points must have shape (n, 2)")
        self.reference = ref
        self.bandwidth = float(bandwidth)
        self.n = len(ref)
        self._tree = cKDTree(ref)
        x0, y0 = ref.min(axis=0) - 1e-9
        nx = int((ref[:, 0].max() - x0) / cell) + 1
        ny = int((ref[:, 1].max() - y0) / cell) + 1
        cid = ((ref[:, 0] - x0) / cell).astype(np.int64) * ny + ((ref[:, 1] - y0) / cell).astype(np.int64)
        order = np.argsort(cid, kind="stable")
        self._pts = np.ascontiguousarray(ref[order])
        self._starts = np.concatenate([[0], np.cumsum(np.bincount(cid, minlength=nx * ny))]).astype(np.int64)
        self._grid = (float(x0), float(y0), float(cell), nx, ny)
        self.log_norm = -math.log(self.n) - math.log(2 * math.pi * self.bandwidth ** 2)

    def _eval(self, y, want_grad=False):
        y = np.ascontiguousarray(np.atleast_2d(y), dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise ValueError("KDE query points must be finite")
        d, _ = self._tree.query(y, k=1)
        logs, grad = _kde_eval(y, d, self._pts, self._starts, *self._grid, self.bandwidth, want_grad)
        return logs + self.log_norm, grad, d

    def log_density_raw(self, y):
        """Exact log-density without flooring."""
        return self._eval(y)[0]

    def log_density(self, y):
        """Log-density clamped at ``LOG_FLOOR``; returns ``(values, n_floored)``."""
        logs = self.log_density_raw(y)
        low = logs < LOG_FLOOR
        return np.where(low, LOG_FLOOR, logs), int(low.sum())

    def grad_log_density(self, y):
        return self._eval(y, want_grad=True)[1]

    def log_density_upper_bound(self, y):
        """Cheap bound log p(y) <= -d_min^2 / 2h^2 - log(2 pi h^2)."""
        d, _ = self._tree.query(np.atleast_2d(y), k=1)
        return -d ** 2 / (2 * self.bandwidth ** 2) - math.log(2 * math.pi * self.bandwidth ** 2)

    def log_density_pruned(self, y, margin=60.0):
        """Exact log-density where it can be within ``margin`` nats of the best point, -inf elsewhere."""
        y = np.ascontiguousarray(y, dtype=np.float64)
        d, _ = self._tree.query(y, k=1)
        ub = -d ** 2 / (2 * self.bandwidth ** 2) - math.log(2 * math.pi * self.bandwidth ** 2)
        i0 = int(np.argmin(d))
        best = _kde_eval(y[i0:i0 + 1], d[i0:i0 + 1], self._pts, self._starts, *self._grid, self.bandwidth,
                         False)[0][0] + self.log_norm
        keep = ub > best - margin
        out = np.full(len(y), -np.inf)
        sub = np.ascontiguousarray(y[keep])
        out[keep] = _kde_eval(sub, d[keep], self._pts, self._starts, *self._grid, self.bandwidth, False)[0] \
            + self.log_norm
        return out


def kde_log_density(model: KdeModel, y):
    return model.log_density(y)[0]


def cross_entropy(model: KdeModel, samples, weights=None):
    """-E log p(samples) in nats (weighted mean if ``weights`` given); returns ``(value, n_floored)``."""
    logs, n_low = model.log_density(samples)
    if weights is None:
        return float(-np.mean(logs)), n_low
    w = np.asarray(weights, dtype=np.float64)
    return float(-np.sum(w * logs) / np.sum(w)), n_low


def build_kde(params: SwissRollParams = SwissRollParams(), n_ref=50_000, bandwidth=0.2, seed=None):
    """KDE fitted to ``n_ref`` draws of the noiseless roll (sigma2 = 0)."""
    noiseless = SwissRollParams(params.mu1, params.sigma1, params.mu2, 0.0, params.seed if seed is None else seed)
    return KdeModel(sample_swiss_roll(noiseless, n_ref), bandwidth)


# ---------------------------------------------------------------------------
# oracles along the line y1 + y2 = 2x
# ---------------------------------------------------------------------------

GRID_POINTS = 20_001


def line_grid(x, n=GRID_POINTS):
    t = np.linspace(2 * x - 20.0, 20.0, n)
    return t, np.stack([t, 2 * x - t], axis=1)


def _line_logs(model, x):
    t, pts = line_grid(x)
    logs = model.log_density_pruned(pts)
    if not np.max(logs) >= LOG_FLOOR:
        raise ValueError(f"x={x}: every grid point is below the log-density floor (outside support)")
    return t, logs


def _refine_map(model, x, t, logs, rounds=3):
    i = int(np.argmax(logs))
    best_t, best = t[i], logs[i]
    step = t[1] - t[0]
    for _ in range(rounds):
        cand = best_t + np.linspace(-step, step, 21)
        cl = model.log_density_raw(np.stack([cand, 2 * x - cand], axis=1))
        j = int(np.argmax(cl))
        if cl[j] > best:
            best_t, best = cand[j], cl[j]
        step /= 10
    return best_t, best


def _moments(t, logs):
    w = np.exp(logs - np.max(logs))
    w /= w.sum()
    mean = float(np.sum(w * t))
    cdf = np.cumsum(w)
    median = float(t[np.searchsorted(cdf, 0.5)])
    return mean, median


def _point(x, t):
    return np.array([t, 2 * x - t])


def map_oracle(model: KdeModel, x):
    """Highest-density point on the line y1 + y2 = 2x."""
    t, logs = _line_logs(model, x)
    best_t, _ = _refine_map(model, x, t, logs)
    return _point(x, best_t)


def posterior_moment_oracle(model: KdeModel, x, which="mean"):
    """Posterior mean or (coordinate-wise) median along the line y1 + y2 = 2x."""
    if which not in ("mean", "median"):
        raise ValueError(f"which must be 'mean' or 'median', got {which!r}")
    t, logs = _line_logs(model, x)
    mean, median = _moments(t, logs)
    return _point(x, mean if which == "mean" else median)


def oracle_sweep(model: KdeModel, xs):
    """MAP, mean and median oracles for every x (one line evaluation per x)."""
    out = {k: np.zeros((len(xs), 2)) for k in ("map", "mean", "median")}
    for i, x in enumerate(xs):
        t, logs = _line_logs(model, float(x))
        best_t, _ = _refine_map(model, float(x), t, logs)
        mean, median = _moments(t, logs)
        out["map"][i] = _point(x, best_t)
        out["mean"][i] = _point(x, mean)
        out["median"][i] = _point(x, median)
    return out


def x_grid(n=401, lo=-8.0, hi=8.0):
    return np.linspace(lo, hi, n)


def x_grid_weights(params: SwissRollParams, xs, n_samples=2_000_000, seed=12345):
    """Probability mass of p_X in the cell around each (evenly spaced) grid point."""
    xs = np.asarray(xs)
    step = xs[1] - xs[0]
    edges = np.concatenate([xs - step / 2, [xs[-1] + step / 2]])
    rng = np.random.default_rng(seed)
    counts = np.zeros(len(xs))
    for _ in range(n_samples // 500_000):
        x = observe(sample_swiss_roll(params, 500_000, rng))[:, 0]
        counts += np.histogram(x, bins=edges)[0]
    return counts / counts.sum()


def write_oracle_csv(path, xs, sweep: dict, model: KdeModel):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y1", "y2", "log_density", "oracle_name"])
        for name in sorted(sweep):
            logs = model.log_density(sweep[name])[0]
            for x, (y1, y2), lp in zip(xs, sweep[name], logs):
                w.writerow([f"{x:.6f}", f"{y1:.10g}", f"{y2:.10g}", f"{lp:.10g}", name])


# ---------------------------------------------------------------------------
# analytic references
# ---------------------------------------------------------------------------

def analytic_denoiser_gaussian(mu, s, sigma, y_noisy):
    """Bayes-optimal denoiser for p_Y = N(mu, s^2 I) under N(0, sigma^2 I) noise."""
    if s <= 0 or sigma < 0:
        raise ValueError("s must be positive and sigma non-negative")
    return (s ** 2 * np.asarray(y_noisy) + sigma ** 2 * np.asarray(mu)) / (s ** 2 + sigma ** 2)


def analytic_denoiser_mixture(weights, mus, ss, sigma, y_noisy):
    """E[y | y_noisy] for an isotropic Gaussian mixture prior."""
    y = np.atleast_2d(np.asarray(y_noisy, dtype=np.float64))
    mus = np.asarray(mus, dtype=np.float64).reshape(len(weights), -1)
    d = y.shape[1]
    logr = []
    for w, mu, s in zip(weights, mus, ss):
        v = s ** 2 + sigma ** 2
        logr.append(np.log(w) - 0.5 * d * np.log(2 * np.pi * v) - np.sum((y - mu) ** 2, axis=1) / (2 * v))
    logr = np.array(logr)
    r = np.exp(logr - logr.max(axis=0))
    r /= r.sum(axis=0)
    out = np.zeros_like(y)
    for k, (mu, s) in enumerate(zip(mus, ss)):
        out += r[k][:, None] * analytic_denoiser_gaussian(mu, s, sigma, y)
    return out


def analytic_kl_gaussians(mu0, s0, mu1, s1):
    """KL[N(mu0, s0^2) || N(mu1, s1^2)]."""
    if s0 <= 0 or s1 <= 0:
        raise ValueError("standard deviations must be positive")
    return math.log(s1 / s0) + (s0 ** 2 + (mu0 - mu1) ** 2) / (2 * s1 ** 2) - 0.5
