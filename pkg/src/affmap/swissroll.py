"""Swiss-roll benchmark: train every toy variant per seed and score it against the KDE prior.

Each trial trains a 1 -> 2 MLP generator on x = (y1 + y2) / 2 and is scored by
the KDE cross-entropy of its outputs on the evaluation x-grid. Results are
written as plain CSV with fixed float formatting so reruns are byte-identical.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import densities as D
from . import nn_core as nn
from . import objectives as obj
from .config import RunConfig
from .linops import AffineProjector, closed_form_pseudoinverse, toy_average
from .persist import save_bundle

log = logging.getLogger(__name__)

ORACLE_ROWS = {"map": "MAP", "mean": "MSE-oracle", "median": "MAE-oracle"}
TRIAL_HEADER = ("iteration", "d_loss", "g_loss", "sigma_instance", "cross_entropy", "consistency_mse")


@dataclass
class ToySetup:
    params: D.SwissRollParams
    kde: D.KdeModel
    xs: np.ndarray
    weights: np.ndarray
    projector: AffineProjector
    denoisers: list = field(default_factory=list)

    @property
    def down(self):
        return self.projector.down


@dataclass
class TrialResult:
    variant: str
    seed: int
    failed: bool
    cross_entropy: float = math.nan
    consistency: float = math.nan
    n_floored: int = 0
    saturated_steps: int = 0
    skipped_batches: int = 0
    reason: str = ""
    outputs: np.ndarray | None = None
    log_rows: list = field(default_factory=list)
    state: nn.NetState | None = None


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.10g}"


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------

def denoiser_net(hidden=256, seed=0):
    """Residual MLP denoiser: f(y) = y + g(y)."""
    layers = (nn.Dense(2, hidden), nn.ReLU(), nn.Dense(hidden, hidden), nn.ReLU(), nn.Dense(hidden, 2), nn.Skip(-1))
    return nn.NetSpec((2,), layers, seed=seed)


def build_setup(cfg: RunConfig) -> ToySetup:
    params = D.SwissRollParams()
    ev = cfg.eval
    kde = D.build_kde(params, n_ref=ev.kde_points, seed=ev.kde_seed)
    xs = D.x_grid(ev.grid_points, ev.grid_lo, ev.grid_hi)
    weights = D.x_grid_weights(params, xs, ev.grid_weight_samples)
    op = toy_average()
    setup = ToySetup(params, kde, xs, weights, AffineProjector(op, closed_form_pseudoinverse(op), tolerance=1e-10))
    if any(v.endswith("DG") for v in cfg.variants):
        setup.denoisers = pretrain_toy_denoisers(cfg, params)
    return setup


def pretrain_toy_denoisers(cfg: RunConfig, params: D.SwissRollParams):
    dc = cfg.denoiser
    schedule = obj.DenoiserSchedule.geometric(dc.sigma_start, dc.sigma_end, dc.levels)
    opt = nn.OptimConfig("adam", lr=dc.lr, batch_size=dc.batch_size, iterations=dc.iterations, seed=dc.seed)
    return obj.dae_pretrain(denoiser_net(dc.hidden, dc.seed), lambda n, r: D.sample_swiss_roll(params, n, r),
                            schedule, opt)


def guarded_score(denoisers, level, radius):
    """Score estimate from checkpoint ``level``, deferring to coarser ones off their training domain.

    A denoiser trained at noise ``s`` only ever saw inputs within a few ``s`` of
    the data. Where its displacement ``|f(y) - y|`` exceeds ``radius * s`` the
    point lies outside that domain, so the next coarser checkpoint is used.
    ``radius <= 0`` disables the fallback.
    """
    def score(y):
        g = obj.denoiser_gradient(denoisers[level], y)
        if radius <= 0:
            return g
        todo = np.arange(len(y))
        for j in range(level, 0, -1):
            s = denoisers[j].sigma
            far = np.linalg.norm(g[todo], axis=1) * s * s > radius * s
            if not far.any():
                break
            todo = todo[far]
            g[todo] = obj.denoiser_gradient(denoisers[j - 1], y[todo])
        return g
    return score


# ---------------------------------------------------------------------------
# one trial
# ---------------------------------------------------------------------------

def _generator(cfg: RunConfig, variant, seed, setup: ToySetup):
    m = cfg.model
    spec = nn.mlp([1] + [m.hidden] * m.layers + [2], seed=seed)
    state = nn.init_state(spec)
    if variant.startswith("Aff"):
        return obj.Generator(spec, state, projector=setup.projector)
    if variant.startswith("Soft"):
        return obj.Generator(spec, state, down=setup.down, soft_weight=m.soft_weight)
    return obj.Generator(spec, state, down=setup.down)


def evaluate(gen: obj.Generator, setup: ToySetup):
    """Cross-entropy and weighted LR-consistency MSE on the x-grid."""
    y = obj.predict_sr(gen, setup.xs[:, None])
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite generator output on the evaluation grid")
    ce, n_low = D.cross_entropy(setup.kde, y, setup.weights)
    resid = (y @ setup.down.matrix.T)[:, 0] - setup.xs
    cons = float(np.sum(setup.weights * resid ** 2))
    return y, ce, cons, n_low


def train_toy_variant(cfg: RunConfig, variant, seed, setup: ToySetup) -> TrialResult:
    cfg = cfg.for_variant(variant)
    o = cfg.optimizer
    opt = nn.OptimConfig(o.algorithm, lr=o.lr, betas=tuple(o.betas), batch_size=o.batch_size,
                         iterations=o.iterations, seed=seed)
    gen = _generator(cfg, variant, seed, setup)
    rng = np.random.default_rng([seed, 7919])
    res = TrialResult(variant, seed, failed=False)
    n, total = o.batch_size, o.iterations

    disc = noise = None
    if variant.endswith("GAN"):
        m = cfg.model
        dspec = nn.mlp([2] + [m.hidden] * m.layers + [1], seed=seed + 1000, out_act="sigmoid")
        disc = obj.Discriminator(dspec, nn.init_state(dspec))
        opt_d = nn.OptimConfig(o.algorithm, lr=m.disc_lr, betas=tuple(o.betas), batch_size=n, seed=seed)
        ic = cfg.instance_noise
        noise = obj.InstanceNoiseSchedule(ic.family, ic.sigma_start, ic.sigma_end, total, ic.target)
    scores = []
    if variant.endswith("DG"):
        scores = [guarded_score(setup.denoisers, i, cfg.denoiser.fallback_radius)
                  for i in range(len(setup.denoisers))]
        schedule = obj.DenoiserSchedule(tuple(d.sigma for d in setup.denoisers))

    d_loss = g_loss = sigma = math.nan
    try:
        for it in range(1, total + 1):
            if o.lr_decay == "linear":
                opt = dataclasses.replace(opt, lr=o.lr * (1 - (it - 1) / total))
            y = D.sample_swiss_roll(setup.params, n, rng)
            x = D.observe(y)
            if variant in ("MSE", "MAE"):
                g_loss = obj.pixel_step(gen, x, y, variant.lower(), opt)
            elif disc is not None:
                # real samples independent of the batch that produced x
                real = D.sample_swiss_roll(setup.params, n, rng)
                sigma = noise.value(it - 1)
                losses = obj.gan_step(gen, disc, real, x, sigma, cfg.model.k_d, opt, opt_d, rng)
                noise.update(losses.d_loss)
                d_loss, g_loss = losses.d_loss, losses.g_loss
                res.saturated_steps += losses.saturated > 0.5
            else:
                level = schedule.index_at(it - 1, total)
                sigma = schedule.sigmas[level]
                if not obj.denoiser_guided_step(gen, None, x, opt, score=scores[level]):
                    res.skipped_batches += 1
            if not math.isfinite(g_loss if not math.isnan(g_loss) else 0.0) or not math.isfinite(
                    d_loss if not math.isnan(d_loss) else 0.0):
                raise FloatingPointError(f"non-finite loss at iteration {it}")
            if it % cfg.eval.log_every == 0 or it == total:
                _, ce, cons, _ = evaluate(gen, setup)
                res.log_rows.append((it, d_loss, g_loss, sigma, ce, cons))
        res.outputs, res.cross_entropy, res.consistency, res.n_floored = evaluate(gen, setup)
    except FloatingPointError as exc:
        res.failed, res.reason = True, str(exc)
        log.warning("%s seed %d failed: %s", variant, seed, exc)
    res.state = gen.state
    return res


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

_WORKER = {}


def _init_worker(cfg, setup):
    _WORKER["cfg"], _WORKER["setup"] = cfg, setup


def _run_job(job):
    variant, seed = job
    return train_toy_variant(_WORKER["cfg"], variant, seed, _WORKER["setup"])


def worker_count(n_jobs):
    cap = int(os.environ.get("AFFMAP_THREADS", "0") or 0)
    avail = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
    return max(1, min(n_jobs, cap if cap > 0 else avail))


def run_trials(cfg: RunConfig, setup: ToySetup, jobs):
    """Results in ``jobs`` order regardless of the worker count."""
    workers = worker_count(len(jobs))
    if workers == 1:
        return [train_toy_variant(cfg, v, s, setup) for v, s in jobs]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cfg, setup)) as pool:
        return list(pool.map(_run_job, jobs))


def summarise(results, oracle_ce=None):
    """Table rows: model, mean/std cross-entropy and consistency, trial and failure counts."""
    rows = []
    for name in sorted(oracle_ce or {}, key=lambda k: list(ORACLE_ROWS.values()).index(k)):
        ce, cons = oracle_ce[name]
        rows.append((name, ce, 0.0, cons, 0.0, 1, 0))
    variants = list(dict.fromkeys(r.variant for r in results))
    for v in variants:
        ok = [r for r in results if r.variant == v and not r.failed]
        n_all = sum(r.variant == v for r in results)
        ce = np.array([r.cross_entropy for r in ok])
        cons = np.array([r.consistency for r in ok])
        stat = (lambda a, f: float(f(a)) if len(a) else math.nan)
        rows.append((v, stat(ce, np.mean), stat(ce, np.std), stat(cons, np.mean), stat(cons, np.std),
                     n_all, n_all - len(ok)))
    return rows


TABLE_HEADER = ("model", "cross_entropy_mean", "cross_entropy_std", "consistency_mean", "consistency_std",
                "n_trials", "n_failed")


def write_table(path, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for r in rows:
            w.writerow([r[0]] + [_fmt(v) for v in r[1:]])


def read_table(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return {r["model"]: {k: (float(v) if v else math.nan) for k, v in r.items() if k != "model"} for r in rows}


def write_trial(path, res: TrialResult):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_HEADER)
        for row in res.log_rows:
            w.writerow([_fmt(v) for v in row])


def write_sweep(path, xs, results, oracles=None):
    """Model outputs over the x-grid, one row per (model, seed, x)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", "x", "y1", "y2"])
        for name, pts in (oracles or {}).items():
            for x, (a, b) in zip(xs, pts):
                w.writerow([name, "", f"{x:.6f}", _fmt(a), _fmt(b)])
        for r in results:
            if r.outputs is None:
                continue
            for x, (a, b) in zip(xs, r.outputs):
                w.writerow([r.variant, r.seed, f"{x:.6f}", _fmt(a), _fmt(b)])


def write_trials_summary(path, results):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "seed", "status", "cross_entropy", "consistency_mse", "n_floored",
                    "saturated_steps", "skipped_batches", "reason"])
        for r in results:
            w.writerow([r.variant, r.seed, "failed" if r.failed else "ok", _fmt(r.cross_entropy),
                        _fmt(r.consistency), r.n_floored, r.saturated_steps, r.skipped_batches, r.reason])


def run_swissroll(cfg: RunConfig, setup: ToySetup | None = None, oracles=None):
    """Full sweep; writes table1.csv, trials.csv, sweep.csv, oracle.csv and per-trial logs.

    Returns ``(table_rows, results)``.
    """
    out = Path(cfg.output_dir)
    (out / "trials").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    setup = setup or build_setup(cfg)
    if oracles is None:
        oracles = D.oracle_sweep(setup.kde, setup.xs)
    D.write_oracle_csv(out / "oracle.csv", setup.xs, oracles, setup.kde)
    oracle_ce = {}
    for key, name in ORACLE_ROWS.items():
        ce = D.cross_entropy(setup.kde, oracles[key], setup.weights)[0]
        resid = (oracles[key] @ setup.down.matrix.T)[:, 0] - setup.xs
        oracle_ce[name] = (ce, float(np.sum(setup.weights * resid ** 2)))

    jobs = [(v, s) for v in cfg.variants for s in cfg.seeds]
    results = run_trials(cfg, setup, jobs)
    for r in results:
        write_trial(out / "trials" / f"{r.variant}_seed{r.seed}.csv", r)
        spec = _generator(cfg, r.variant, r.seed, setup).spec
        save_bundle(out / "checkpoints" / f"{r.variant}_seed{r.seed}.json",
                    {"spec": spec.to_dict(), "variant": r.variant, "seed": r.seed, "failed": r.failed},
                    nn.state_to_arrays(r.state), dtype="float64")
    rows = summarise(results, oracle_ce)
    write_table(out / "table1.csv", rows)
    write_trials_summary(out / "trials.csv", results)
    write_sweep(out / "sweep.csv", setup.xs, results, {ORACLE_ROWS[k]: v for k, v in oracles.items()})
    return rows, results
