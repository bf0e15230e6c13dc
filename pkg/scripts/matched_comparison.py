"""Help rate and set size of the simple-set baseline at the conformal operating point.

For each single-step setting the conformal method is run at ``--epsilon``;
the simple set is then tuned (by bisection on its own epsilon) to the same
plan success, and both are reported side by side.
"""

import argparse

from conformal_planner.baselines import Method
from conformal_planner.harness import Experiment, ExperimentConfig, NoMatchError, match_operating_point
from conformal_planner.scorer import ScorerSpec


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--epsilon", type=float, default=0.15)
    p.add_argument("--kappa", type=float, default=2.0)
    p.add_argument("--tau", type=float, default=3.0)
    p.add_argument("--rho", type=float, default=0.05)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--tol", type=float, default=0.0005)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    scorer = ScorerSpec(kappa=args.kappa, tau=args.tau, rho=args.rho)
    print("setting    success(cp/simple)  help(cp/simple)  size(cp/simple)  simple_eps")
    for setting in ("attribute", "numeric", "spatial"):
        exp = Experiment(ExperimentConfig(setting=setting, scorer=scorer, n_cal=400, n_test=args.n_test,
                                          repeats=args.repeats, seed=args.seed))
        ref = exp.evaluate(Method("conformal"), args.epsilon)
        try:
            match = match_operating_point(ref, Method("simple"), exp, tol=args.tol)
        except NoMatchError as e:
            print(f"{setting:<10} no match: {e}")
            continue
        s = exp.evaluate(Method("simple"), match.epsilon)
        print(f"{setting:<10} {ref.plan_success_rate:.4f}/{s.plan_success_rate:.4f}    "
              f"{ref.help_rate_step:.4f}/{s.help_rate_step:.4f}    "
              f"{ref.avg_set_size:.3f}/{s.avg_set_size:.3f}     {match.epsilon:.4f}")


if __name__ == "__main__":
    main()
