"""Smoke run of linear MomentumQ on a generated 32x32 map.

Uses per-cell tile features (tiles of one cell), a uniform behavior policy
that restarts from a uniformly drawn non-terminal cell, constant step size
and the averaged output, then prints the mean greedy return per checkpoint.
"""

from __future__ import annotations

import argparse

import numpy as np

from momentq.harness import ExperimentConfig, read_run_file, run_experiment


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--T", type=int, default=2_000_000)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--tile", type=int, default=1)
    p.add_argument("--checkpoints", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="results/smoke_32x32")
    args = p.parse_args()

    cfg = ExperimentConfig(
        env={"size": 32, "seed": 0, "density": 0.1, "gamma": 0.99},
        algos=[{"mode": "momentumq", "features": {"type": "tile", "tile": args.tile}, "alpha": args.alpha,
                "alpha_mode": "constant", "beta": 0.5, "lam": 0.9, "output_mode": "average"}],
        T=args.T,
        seeds=list(range(args.seeds)),
        metric="return",
        checkpoint_every=args.T // args.checkpoints,
        sampling="markovian",
        behavior={"type": "uniform", "restart": "uniform"},
        output_dir=args.out,
        workers=args.workers,
    )
    manifest = run_experiment(cfg)
    out = cfg.resolved_output()
    runs = [read_run_file(out / f) for f in manifest["run_files"]]
    ks = [row["k"] for row in runs[0]]
    curves = np.array([[row["value"] for row in rows] for rows in runs])
    for k, mean, std in zip(ks, curves.mean(axis=0), curves.std(axis=0)):
        print(f"k={k:>9}  mean return {mean:.4f}  std {std:.4f}")
    print(f"wrote {out} in {manifest['wall_time_s']:.1f} s")


if __name__ == "__main__":
    main()
