"""Compare Vanilla, SpeedyQ and MomentumQ on the 4x4 FrozenLake map.

Writes per-run CSVs, ``aggregate.csv`` and ``manifest.json`` under ``--out``
and prints the mean final sup-norm loss of each learner with its standard
error.
"""

from __future__ import annotations

import argparse

import numpy as np

from momentq.harness import ExperimentConfig, final_values, run_experiment


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--T", type=int, default=10_000)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.95)
    p.add_argument("--size", type=int, default=4, choices=(4, 8))
    p.add_argument("--out", default="results/tabular_comparison")
    args = p.parse_args()

    cfg = ExperimentConfig(
        env={"standard": args.size, "gamma": args.gamma},
        algos=[
            {"mode": "vanilla"},
            {"mode": "speedyq"},
            {"mode": "momentumq", "name": "momentumq_m1overgamma"},
            {"mode": "momentumq", "m": 10},
            {"mode": "momentumq", "m": 50},
        ],
        T=args.T,
        seeds=list(range(args.seeds)),
        output_dir=args.out,
    )
    manifest = run_experiment(cfg)
    out = cfg.resolved_output()
    finals = final_values(out / f for f in manifest["run_files"])
    print(f"{'algo':<24} {'mean loss':>12} {'std error':>12}")
    for algo, rows in finals.items():
        vals = np.array([row["value"] for row in rows.values()])
        se = vals.std(ddof=1) / np.sqrt(vals.size) if vals.size > 1 else 0.0
        print(f"{algo:<24} {vals.mean():>12.6f} {se:>12.6f}")
    print(f"wrote {out} in {manifest['wall_time_s']:.1f} s")


if __name__ == "__main__":
    main()
