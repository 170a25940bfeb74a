"""Run every acceptance scenario and print one line per check.

    python3 scripts/run_acceptance.py [--threads K] [--out DIR]
"""

import argparse
import glob
import os
import time

from mkv_bismut import cli
from mkv_bismut.scenario import load_scenario

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=os.path.join(ROOT, "out", "acceptance"))
    args = p.parse_args()
    failed = 0
    for path in sorted(glob.glob(os.path.join(ROOT, "scenarios", "acc*.json"))):
        sc = load_scenario(path)
        start = time.perf_counter()
        doc, files = cli.execute(sc, args.threads)
        cli.write_outputs(os.path.join(args.out, sc.name), doc, files)
        secs = time.perf_counter() - start
        for c in doc["results"]["checks"]:
            status = {True: "PASS", False: "FAIL", None: "INFO"}[c["passed"]]
            failed += c["passed"] is False
            print(f"{sc.name:24s} {status}  {c['label']:40s} {secs:6.1f}s")
    print(f"{failed} failing checks")


if __name__ == "__main__":
    main()
