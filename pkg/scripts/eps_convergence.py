"""Value at the start for a decreasing smoothing schedule on a boundary-active instance."""
import argparse

from bess_control.hjb_solver import StateGrid, eps_refine
from bess_control.market_sim import constant_spec
from bess_control.model_core import ModelParams, TimeGrid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-y", type=int, default=161)
    ap.add_argument("--N", type=int, default=160)
    ap.add_argument("--mollified", action="store_true")
    args = ap.parse_args()
    params = ModelParams(1.0, 1.0)
    # a rising spot price pushes the charge into the full face
    spec = constant_spec([0.0, 0.0], drift=[0.0, 0.5])
    tg = TimeGrid(1.0, args.N)
    sg = StateGrid.build(spec, tg, params, n_y=args.n_y)
    ref = eps_refine(spec, sg, tg, params, [0.2, 0.1, 0.05, 0.025], [0.8],
                     mollified=args.mollified)
    for e, v in zip(ref.eps, ref.values):
        print(f"eps={e:<6g} J={v:.8f}")
    print(f"extrapolated limit {ref.limit:.8f}, observed ratio {ref.observed_ratio:.3f}")
    for w in ref.warnings:
        print("warning:", w)


if __name__ == "__main__":
    main()
