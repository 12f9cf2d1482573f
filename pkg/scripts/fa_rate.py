"""Averaged-iterate error of linear MomentumQ under Markovian sampling.

Runs one-hot MomentumQ-FA with diminishing steps ``alpha / sqrt(k)`` on the
8x8 map and prints the mean squared distance of the averaged iterate to the
root of the mean TD direction at each checkpoint, next to the
diminishing-step bound evaluated with the measured margin and mixing
constants.
"""

from __future__ import annotations

import argparse

import numpy as np

from momentq.bounds import BoundDomainError, BoundInputs, bound_thm2, estimate_mixing
from momentq.frozenlake import GridSpec, behavior_chain, build_frozenlake, markovian_stream, uniform_behavior
from momentq.linear import FaSchedule, gbar_and_thetastar, onehot_features, run_fa


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--checkpoints", default="1000,10000,100000")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--lam", type=float, default=0.9)
    args = p.parse_args()

    marks = [int(k) for k in args.checkpoints.split(",")]
    mdp = build_frozenlake(GridSpec.standard(8), gamma=0.95)
    fmap = onehot_features(mdp.n_states, mdp.n_actions)
    beh = uniform_behavior(mdp)
    oracle = gbar_and_thetastar(mdp, fmap, beh, n_delta=2000)
    sched = FaSchedule(alpha=args.alpha, alpha_mode="diminishing", beta=args.beta, lam=args.lam,
                       output_mode="average")

    errs = []
    for seed in range(args.seeds):
        res = run_fa(markovian_stream(mdp, beh, seed), fmap, sched, marks[-1], mdp.gamma, checkpoints=marks,
                     eval_hook=lambda k, th: {"err": float(np.sum((th - oracle.theta_star) ** 2))})
        errs.append([row["err"] for row in res.metrics])
    errs = np.array(errs)

    sigma, rho = estimate_mixing(behavior_chain(mdp, beh))
    print(f"theta* norm {np.linalg.norm(oracle.theta_star):.4f}, sampled margin {oracle.delta_margin:.4g}, "
          f"mixing sigma {sigma:.3g} rho {rho:.4f}")
    print(f"{'T':>8} {'mean err':>12} {'std error':>12} {'bound':>12}")
    for j, T in enumerate(marks):
        try:
            inputs = BoundInputs(gamma=mdp.gamma, d_max=float(np.linalg.norm(oracle.theta_star)) * 2,
                                 delta_margin=oracle.delta_margin, sigma=sigma, rho=rho, kappa=1e-3,
                                 alpha=args.alpha, beta=args.beta, lam=args.lam, t_horizon=T)
            bound = f"{bound_thm2(inputs):12.4g}"
        except BoundDomainError as exc:
            bound = f"{'n/a':>12} ({exc})"
        col = errs[:, j]
        print(f"{T:>8} {col.mean():>12.5f} {col.std(ddof=1) / np.sqrt(col.size):>12.5f} {bound}")


if __name__ == "__main__":
    main()
