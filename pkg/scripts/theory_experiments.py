"""Monte-Carlo comparison of estimate-then-commit and uniform black-box search, plus the
source-only barrier sweep. Writes CSV files into ``--out``."""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from causal_evolve import theory


def etc_sweep(Ks, d, eps, delta, sigma, trials, seed):
    rows, scaling = [], []
    for K in Ks:
        etc = theory.etc_trials(d, K, eps, delta, sigma, trials, seed)
        bb = theory.blackbox_trials(K, eps, delta, sigma, etc.budget, trials, seed, d=d)
        rows += [etc.row(), bb.row()]
        needed = theory.required_uniform_budget(K, eps, sigma, 0.9, trials, seed)
        scaling.append(
            {"K": K, "etc_budget": etc.budget, "uniform_budget_for_0.9": needed,
             "lower_bound": round(theory.blackbox_lower_bound(K, eps, delta, sigma), 1)}
        )
        print(f"K={K:4d}  etc {etc.success_rate:.3f} @ {etc.budget}  uniform {bb.success_rate:.3f}  "
              f"uniform needs {needed}")
    slopes = (
        theory.loglog_slope(Ks, [s["etc_budget"] for s in scaling]),
        theory.loglog_slope(Ks, [s["uniform_budget_for_0.9"] for s in scaling]),
    )
    print(f"log-log slope in K: etc {slopes[0]:.3f}, uniform {slopes[1]:.3f}")
    return rows, scaling


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results/theory"))
    ap.add_argument("--d", type=int, default=4)
    ap.add_argument("--K", type=int, nargs="+", default=[8, 32, 64, 128])
    ap.add_argument("--epsilon", type=float, default=0.1)
    ap.add_argument("--delta", type=float, default=0.1)
    ap.add_argument("--sigma", type=float, default=1.0)
    ap.add_argument("--trials", type=int, default=1000)
    ap.add_argument("--margins", type=float, nargs="+", default=[0.1, 0.2, 0.4, 0.8])
    ap.add_argument("--budget", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()

    rows, scaling = etc_sweep(args.K, args.d, args.epsilon, args.delta, args.sigma, args.trials, args.seed)
    (args.out / "etc_vs_uniform.csv").write_text(theory.to_csv(rows))
    (args.out / "budget_scaling.csv").write_text(theory.to_csv(scaling, list(scaling[0])))

    barrier = []
    for margin in args.margins:
        results = theory.barrier_experiment(margin, args.budget, args.trials, seed=args.seed, sigma=args.sigma)
        for r in results:
            print(f"margin={margin:.2f}  {r.policy:16s} worst regret {r.worst_regret:.3f} "
                  f"(floor {margin / 2:.3f})")
        barrier += theory.barrier_rows(results)
    (args.out / "barrier.csv").write_text(theory.to_csv(barrier, theory.BARRIER_COLUMNS))
    print(f"wrote {args.out} in {time.monotonic() - start:.1f}s")


if __name__ == "__main__":
    main()
