#!/usr/bin/env python3
"""Reproduce the bias / standard deviation tables at desk scale.

Writes one CSV row per (model, n, estimator, parameter). Full-scale tables
use 2000 replications; the default here is 500, which reproduces the same
numbers within Monte Carlo error at a fraction of the runtime.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import pandas as pd

from smoothmd.simulation import DgpSpec, EstimatorSpec, run_monte_carlo


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", default="1,2,3", help="comma list of model ids")
    ap.add_argument("--sizes", default="250,500,1000", help="comma list of n")
    ap.add_argument("--reps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=20240101)
    ap.add_argument("--jobs", type=int, default=2)
    ap.add_argument("--out", default="results/bias_tables.csv")
    args = ap.parse_args()

    estimators = [
        EstimatorSpec(name="smoothmd", use_gamma=True),
        EstimatorSpec(name="smoothmd_nogamma", use_gamma=False),
        EstimatorSpec(name="nl2sls", kind="nl2sls"),
    ]
    rows = []
    for model in (int(m) for m in args.models.split(",")):
        for n in (int(v) for v in args.sizes.split(",")):
            report = run_monte_carlo(
                DgpSpec(model_id=model, n=n, seed=0),
                estimators,
                reps=args.reps,
                seed=args.seed + 97 * model + n,
                n_jobs=args.jobs,
            )
            rows.extend(report.bias_rows())
            print(
                f"model {model} n={n}: done in {report.runtime_seconds:.0f}s, "
                f"failures {report.failures}"
            )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(out, index=False)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
