#!/usr/bin/env python3
"""Generate a survey/census CSV pair from a builtin scenario, for trying the
command-line workflow end to end.

Example:

    python scripts/make_synthetic_data.py --scenario normal-small \
        --seed 7 --out data/demo
    saeforest fit --survey data/demo/survey.csv --census data/demo/census.csv \
        --out data/demo/run --trees 100 --seed 7
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from saeforest.simulation import BUILTIN_SCENARIOS, draw_sample, generate_population


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--scenario", default="normal-small",
                   choices=sorted(BUILTIN_SCENARIOS))
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="data/demo")
    p.add_argument("--districts", type=int, default=10,
                   help="number of districts for the aggregation mapping")
    args = p.parse_args()

    scenario = BUILTIN_SCENARIOS[args.scenario]()
    pop = generate_population(scenario, args.seed)
    sample = draw_sample(pop, scenario.allocation, args.seed + 1)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with open(out / "census.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "x1", "x2"])
        for i in range(pop.y.shape[0]):
            w.writerow([pop.area[i], repr(float(pop.x[i, 0])), repr(float(pop.x[i, 1]))])

    with open(out / "survey.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "x1", "x2", "y"])
        for i in sample.rows:
            w.writerow([pop.area[i], repr(float(pop.x[i, 0])),
                        repr(float(pop.x[i, 1])), pop.y[i]])

    with open(out / "mapping.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "district_id"])
        per = max(1, scenario.n_areas // args.districts)
        for a in range(scenario.n_areas):
            w.writerow([a, f"district-{a // per}"])

    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area_id", "true_proportion"])
        for a, t in enumerate(pop.area_truth()):
            w.writerow([a, repr(float(t))])

    print(f"wrote census ({pop.y.shape[0]} units), survey ({sample.rows.shape[0]} "
          f"units), mapping and truth under {out}/")


if __name__ == "__main__":
    main()
