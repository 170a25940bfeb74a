"""Convergence ladders for the derivative estimator: dt, N, eps and lambda.

    python3 scripts/convergence_studies.py [--threads K] [--out DIR]

The eps ladder uses the tanh model; for mean-field OU the finite difference
is exactly linear in eps and has no bias to fit.  Prints each ladder and its fitted log-log slope; writes convergence.csv per axis.
"""

import argparse
import json
import os

from mkv_bismut import cli
from mkv_bismut.scenario import parse_scenario

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

STUDIES = {
    "dt": {"axis": "dt", "ladder": [8, 16, 32, 64], "M_fine": 64},
    "N": {"axis": "N", "ladder": [250, 500, 1000, 2000]},
    "eps": {"axis": "eps", "ladder": [0.4, 0.2, 0.1, 0.05]},
    "lambda": {"axis": "lambda", "ladder": [0.25, 0.5, 1.0, 2.0]},
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=os.path.join(ROOT, "out", "convergence"))
    args = p.parse_args()
    with open(os.path.join(ROOT, "scenarios", "ou_study_N.json"), encoding="utf-8") as fh:
        base = json.load(fh)
    for name, study in STUDIES.items():
        raw = dict(base, name=f"ou_study_{name}", study=study)
        if name == "dt":
            raw["N"] = 20000
        if name == "eps":
            raw["model"] = {"name": "tanh_moment_noise",
                            "params": {"a": 1.0, "beta": 0.5, "s0": 0.3, "s1": 0.2, "lam": 0.5}}
        doc, files = cli.execute(parse_scenario(raw), args.threads)
        cli.write_outputs(os.path.join(args.out, name), doc, files)
        res = doc["results"]
        print(f"== {name}: slope {res.get('slope')}")
        print(files["convergence.csv"], end="")


if __name__ == "__main__":
    main()
