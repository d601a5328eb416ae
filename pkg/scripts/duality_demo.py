"""Lower and upper bounds on a volatile one-battery instance for k = 0, 1, 2.

The lower bound is the HJB feedback policy evaluated on the ensemble; the
upper bounds come from a coordinate search over a piecewise-constant
integrand, started from the perfect-information bound.
"""
import argparse

import numpy as np

from bess_control.dual_bound import MartingaleSpec, duality_gap, minimize_over_v, upper_bound
from bess_control.hjb_solver import StabilityError, StateGrid, evaluate_policy, solve
from bess_control.market_sim import log_gbm_spec, simulate
from bess_control.model_core import ModelParams, TimeGrid
from bess_control.smoothing import SmoothedModel


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--n-paths", type=int, default=4000)
    ap.add_argument("--budget", type=int, default=15)
    ap.add_argument("--threads", type=int, default=4)
    args = ap.parse_args()

    params = ModelParams(1.0, 2.0)
    spec = log_gbm_spec([np.log(2.0), 0.0], 0.0, [0.0, 0.5])
    tg = TimeGrid(1.0, 20)
    y0 = [0.5]
    sg = StateGrid.build(spec, tg, params, n_y=21, n_factor=21)
    model = SmoothedModel(params, 0.05)
    try:
        _, pol = solve(spec, sg, tg, model)
    except StabilityError as err:
        _, pol = solve(spec, sg, tg, model, substeps=err.required_substeps)
    ens = simulate(spec, tg, args.n_paths, seed=args.seed, threads=args.threads)
    low = evaluate_policy(pol, ens, y0, threads=args.threads)
    print(f"policy value        {low.mean:.5f} +- {low.se:.4f}")
    free = upper_bound(MartingaleSpec.zeros(1, 2, pieces=1), ens, y0, params,
                       threads=args.threads)
    print(f"perfect information {free.mean:.5f} +- {free.se:.4f}")
    for k in (0, 1, 2):
        fam = MartingaleSpec.zeros(1, 2, pieces=4, k=k)
        res = minimize_over_v(fam, ens, y0, params, budget=args.budget, threads=args.threads)
        gap = duality_gap(low, res.bound)
        print(f"k={k}: bound {res.bound.mean:.5f} +- {res.bound.se:.4f}, "
              f"gap {gap.gap:.5f} +- {gap.se:.4f}, {len(res.trace)} evaluations")


if __name__ == "__main__":
    main()
