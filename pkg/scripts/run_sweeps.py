"""Success/help/set-size curves for every method and setting.

Writes one CSV per (setting, method) into the output directory.  The
conformal and simple-set curves sweep epsilon; the binary baseline has no
epsilon, so its curve sweeps the confidence threshold instead and stores
``1 - theta`` in the epsilon column to keep the CSV layout.
"""

import argparse
from pathlib import Path

import numpy as np

from conformal_planner.baselines import Method
from conformal_planner.harness import CurveRow, Experiment, ExperimentConfig, sweep_epsilon, write_curve
from conformal_planner.scorer import ScorerSpec

GRID = [0.3, 0.25, 0.2, 0.15, 0.1, 0.05, 0.02]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("results/curves"))
    p.add_argument("--settings", default="attribute,numeric,spatial,sorting")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--kappa", type=float, default=4.0)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.05)
    args = p.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    scorer = ScorerSpec(kappa=args.kappa, tau=args.tau, rho=args.rho)
    for setting in args.settings.split(","):
        n_cal = 600 if setting != "sorting" else 400
        exp = Experiment(ExperimentConfig(setting=setting, scorer=scorer, n_cal=n_cal, n_test=args.n_test,
                                          repeats=args.repeats, seed=args.seed))
        grid = GRID if setting != "sorting" else GRID[:-2]
        for kind in ("conformal", "simple"):
            rows = sweep_epsilon(exp, grid, Method(kind))
            write_curve(args.out / f"{setting}_{kind}.csv", rows)
            print(setting, kind, " ".join(f"{r.epsilon:.2f}:{r.success:.3f}/{r.help_step:.3f}" for r in rows))
        rows = []
        for theta in np.round(np.arange(0.1, 0.96, 0.05), 2):
            m = exp.evaluate(Method("binary", theta=float(theta)), 0.15)
            rows.append(CurveRow(1 - float(theta), m.plan_success_rate, m.help_rate_step, m.help_rate_trial,
                                 m.avg_set_size, m.coverage))
        write_curve(args.out / f"{setting}_binary.csv", rows)
        print(setting, "binary", f"{len(rows)} thresholds")


if __name__ == "__main__":
    main()
