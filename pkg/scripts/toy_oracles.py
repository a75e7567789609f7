"""Cross-entropy of the brute-force MAP / posterior-mean / posterior-median maps on the x-grid.

    python scripts/toy_oracles.py [--out oracle.csv] [--unweighted]
"""
import argparse

import numpy as np

from affmap import densities as D


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="")
    ap.add_argument("--points", type=int, default=401)
    ap.add_argument("--unweighted", action="store_true", help="also report the plain grid average")
    args = ap.parse_args()

    params = D.SwissRollParams()
    kde = D.build_kde(params, seed=0)
    xs = D.x_grid(args.points)
    w = D.x_grid_weights(params, xs)
    sweep = D.oracle_sweep(kde, xs)
    for name in ("map", "mean", "median"):
        ce, floored = D.cross_entropy(kde, sweep[name], w)
        line = f"{name:>7s}  H = {ce:8.4f} nats  (floored points: {floored})"
        if args.unweighted:
            line += f"  unweighted {D.cross_entropy(kde, sweep[name])[0]:8.3f}"
        print(line)
    gap = np.linalg.norm(sweep["mean"] - sweep["map"], axis=1)
    print(f"mean |posterior mean - MAP| over p_X: {np.sum(w * gap):.3f}")
    if args.out:
        D.write_oracle_csv(args.out, xs, sweep, kde)


if __name__ == "__main__":
    main()
