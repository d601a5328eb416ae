"""Write the best bang-bang charge path and its running mean for plotting.

    python scripts/regime_figure.py --seed 0 --out runs/figure
"""
import argparse
from pathlib import Path

from bess_control.regime import ExperimentConfig, run_experiment, write_best_path_csv, write_summary_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-paths", type=int, default=2000)
    ap.add_argument("--v0", type=float, default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", default="runs/figure")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_experiment(ExperimentConfig(n_paths=args.n_paths, seed=args.seed, v0=args.v0),
                         args.threads)
    write_best_path_csv(out / "best_path.csv", res)
    write_summary_csv(out / "summary.csv", res)
    b = res.best
    print(f"candidate {b.index}: score {b.score:.6g}, {b.sign_changes} sign changes -> {out}")


if __name__ == "__main__":
    main()
