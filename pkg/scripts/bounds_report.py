"""Tabulate the finite-sample bounds over a range of horizons.

Prints the constant-step, diminishing-step and tabular high-probability
bounds for the inputs in ``--inputs`` (a BoundInputs JSON file, defaults
otherwise). The tabular bound needs ``dbar`` and ``v_max``; when they are
missing it uses ``dbar = R_max + 2 gamma V`` and ``v_max = R_max/(1-gamma)``
and reports the source as assumed.
"""

from __future__ import annotations

import argparse
from dataclasses import replace

from momentq.bounds import BoundDomainError, BoundInputs, bound_thm1, bound_thm1_floor, bound_thm2, bound_thm3, constants


def fmt(fn, inputs) -> str:
    try:
        return f"{fn(inputs):12.4g}"
    except BoundDomainError:
        return f"{'n/a':>12}"


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--inputs", help="BoundInputs JSON file")
    p.add_argument("--horizons", default="100,1000,10000,100000,1000000")
    args = p.parse_args()

    inputs = BoundInputs.load(args.inputs) if args.inputs else BoundInputs()
    if inputs.dbar is None or inputs.v_max is None:
        v = inputs.r_max / (1 - inputs.gamma)
        inputs = replace(inputs, dbar=inputs.r_max + 2 * inputs.gamma * v, v_max=v, dbar_source="assumed")
    c = constants(inputs)
    print(f"G_max {c.g_max:.4g}  eta1 {c.eta1:.4g}  eta2 {c.eta2:.4g}  h~ {c.h_tilde:.4g}  "
          f"dbar {inputs.dbar:.4g} ({inputs.dbar_source})")
    print(f"constant-step floor {fmt(bound_thm1_floor, inputs).strip()}")
    print(f"{'T':>9} {'const step':>12} {'dimin step':>12} {'tabular':>12} {'tab rate':>12}")
    for T in (int(t) for t in args.horizons.split(",")):
        at = replace(inputs, t_horizon=T)
        rate = fmt(lambda i: bound_thm3(i).rate, at)
        print(f"{T:>9} {fmt(bound_thm1, at)} {fmt(bound_thm2, at)} {fmt(lambda i: bound_thm3(i).bound, at)} {rate}")


if __name__ == "__main__":
    main()
