"""Command-line entry point: ``affmap <command> <config.json>`` and ``affmap report <dir>``.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import images
from . import nn_core as nn
from . import objectives as obj
from .config import ConfigError, RunConfig, load_config
from .linops import (AffineProjector, PinvFitConfig, closed_form_pseudoinverse, fit_pseudoinverse,
                     gaussian_downsample, load_operator, save_operator, toy_average)
from .metrics import read_metrics_csv, write_metrics_csv

log = logging.getLogger("affmap")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


class Diverged(RuntimeError):
    pass


def _optim(cfg: RunConfig, seed=0):
    o = cfg.optimizer
    return nn.OptimConfig(o.algorithm, lr=o.lr, betas=tuple(o.betas), batch_size=o.batch_size,
                          iterations=o.iterations, seed=seed)


def _write_config(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def build_operator(cfg: RunConfig):
    oc = cfg.operator
    if oc.mode == "matrix":
        return toy_average()
    return gaussian_downsample((oc.image_size, oc.image_size), oc.stride, oc.kernel_size, oc.sigma_blur)


def fit_operator(cfg: RunConfig):
    oc = cfg.operator
    op = build_operator(cfg)
    fit = PinvFitConfig(sample_count=oc.pinv_samples, iterations=oc.pinv_iterations, lr=oc.pinv_lr,
                        momentum=oc.pinv_momentum, kernel_size=oc.pinv_kernel_size, seed=oc.pinv_seed)
    try:
        return op, fit_pseudoinverse(op, fit)
    except FloatingPointError as exc:
        raise Diverged(str(exc)) from None


def operator_for(cfg: RunConfig, out: Path):
    """Load ``operator.pinv_path`` if set, otherwise fit from the operator section and save it in ``out``."""
    path = cfg.operator.pinv_path
    if path:
        try:
            op, pinv = load_operator(path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"operator.pinv_path: cannot load {path}: {exc}") from None
        if pinv is None:
            raise ConfigError(f"{path}: no pseudoinverse stored")
        if op.in_shape != (cfg.operator.image_size, cfg.operator.image_size):
            raise ConfigError(f"{path}: operator is for {op.in_shape} images, config says {cfg.operator.image_size}")
        return op, pinv
    op, pinv = fit_operator(cfg)
    save_operator(out / "operator.json", op, pinv, seed=cfg.operator.pinv_seed, dtype=cfg.operator.blob_dtype)
    return op, pinv


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit_pinv(cfg: RunConfig):
    out = Path(cfg.output_dir)
    _write_config(cfg, out)
    op, pinv = fit_operator(cfg)
    save_operator(out / "operator.json", op, pinv, seed=cfg.operator.pinv_seed, dtype=cfg.operator.blob_dtype)
    print(f"fit loss (l1 + l2): {pinv.fit_loss:.6e}")
    if op.mode == "matrix":
        ref = closed_form_pseudoinverse(op).matrix
        print("B =", np.array2string(pinv.matrix.ravel(), precision=8))
        print(f"max |B - A^T (A A^T)^-1| = {np.max(np.abs(pinv.matrix - ref)):.3e}")
    return EXIT_OK


def cmd_swissroll(cfg: RunConfig):
    from .swissroll import run_swissroll
    out = Path(cfg.output_dir)
    _write_config(cfg, out)
    rows, results = run_swissroll(cfg)
    print(format_table(out / "table1.csv"))
    failed = [r for r in results if r.failed]
    if failed:
        print(f"{len(failed)} of {len(results)} trials diverged (see trials.csv)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _dataset(cfg: RunConfig, op):
    dc = cfg.data
    if dc.image_size != cfg.operator.image_size:
        raise ConfigError("data.image_size must equal operator.image_size")
    return images.ToyImageDataset.build(op, dc.n_images, dc.image_size, dc.data_seed, dc.source, cfg.dtype)


def cmd_mse_affine(cfg: RunConfig):
    if cfg.operator.mode != "conv":
        raise ConfigError("mse-affine needs a conv operator")
    out = Path(cfg.output_dir)
    _write_config(cfg, out)
    op, pinv = operator_for(cfg, out)
    data = _dataset(cfg, op)
    initial = []
    status = EXIT_OK
    for variant in cfg.variants:
        vcfg = cfg.for_variant(variant)
        for seed in cfg.seeds:
            try:
                res = images.run_mse_affine(variant, seed, data, op, pinv, _optim(vcfg, seed), vcfg.model.channels,
                                            vcfg.eval.log_every, cfg.dtype)
            except FloatingPointError as exc:
                log.error("%s seed %d diverged: %s", variant, seed, exc)
                status = EXIT_DIVERGED
                continue
            write_metrics_csv(out / "curves" / f"{variant}_seed{seed}.csv", res.rows, {"variant": variant})
            initial.append((variant, seed, res.rows[0].hr_mse, res.rows[-1].hr_mse,
                            max(r.lr_consistency for r in res.rows)))
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "initial_hr_mse", "final_hr_mse", "max_lr_consistency"])
        for v, s, a, b, c in initial:
            w.writerow([v, s, f"{a:.10g}", f"{b:.10g}", f"{c:.10g}"])
    print((out / "summary.csv").read_text(), end="")
    return status


def cmd_texture_gan(cfg: RunConfig):
    if cfg.operator.mode != "conv":
        raise ConfigError("texture-gan needs a conv operator")
    out = Path(cfg.output_dir)
    _write_config(cfg, out)
    op, pinv = operator_for(cfg, out)
    proj = AffineProjector(op, pinv, tolerance=1e-6)
    data = _dataset(cfg, op)
    status = EXIT_OK
    ic = cfg.instance_noise
    for variant in cfg.variants:
        vcfg = cfg.for_variant(variant)
        for seed in cfg.seeds:
            noise = obj.InstanceNoiseSchedule(ic.family, ic.sigma_start, ic.sigma_end, vcfg.optimizer.iterations,
                                              ic.target)
            res = images.run_texture(variant, seed, data, proj, _optim(vcfg, seed), noise, vcfg.model.channels,
                                     vcfg.model.k_d, vcfg.eval.log_every, cfg.dtype)
            tag = f"{variant}_seed{seed}"
            write_metrics_csv(out / "metrics" / f"{tag}.csv", res.rows, {"variant": variant})
            images.write_pgm(out / "samples" / f"{tag}.pgm", images.image_grid(np.clip(res.samples, 0, 1), cols=4))
            if res.d_losses:
                with (out / "metrics" / f"{tag}_d_loss.csv").open("w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["iteration", "d_loss"])
                    for i, d in enumerate(res.d_losses, 1):
                        w.writerow([i, f"{d:.10g}"])
            if res.diverged:
                status = EXIT_DIVERGED
    images.write_pgm(out / "samples" / "hr_reference.pgm", images.image_grid(data.hr[:16], cols=4))
    return status


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def format_table(path):
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def cmd_report(run_dir):
    """Print whatever results a run directory holds; never writes."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"{run_dir} is not a directory")
    shown = False
    for name in ("table1.csv", "summary.csv"):
        if (run_dir / name).exists():
            print(f"== {name}")
            print(format_table(run_dir / name))
            shown = True
    if (run_dir / "operator.json").exists():
        meta = json.loads((run_dir / "operator.json").read_text())["meta"]
        print(f"== operator: fit loss {meta['up']['fit_loss']:.6e}")
        shown = True
    for path in sorted((run_dir / "metrics").glob("*.csv")) if (run_dir / "metrics").is_dir() else []:
        if path.name.endswith("_d_loss.csv"):
            continue
        rows = read_metrics_csv(path)
        last = rows[-1]
        print(f"== {path.stem}: iteration {last.iteration} psnr {last.psnr:.3f} ssim {last.ssim:.4f} "
              f"lr_consistency {last.lr_consistency:.3e}")
        shown = True
    if not shown:
        raise ConfigError(f"{run_dir}: no recognised results")
    return EXIT_OK


COMMANDS = {"fit-pinv": cmd_fit_pinv, "swissroll": cmd_swissroll, "mse-affine": cmd_mse_affine,
            "texture-gan": cmd_texture_gan}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="affmap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name).add_argument("config")
    sub.add_parser("report").add_argument("run_dir")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        cfg = load_config(args.config)
        if cfg.experiment != args.command:
            raise ConfigError(f"config is for {cfg.experiment!r}, not {args.command!r}")
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
