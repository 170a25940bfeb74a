"""Command-line runner for scenario files.

    mkv-bismut run <config.json> [--threads K] [--out DIR]
    mkv-bismut study <config.json>
    mkv-bismut validate <config.json>

Exit status: 0 on success, 2 when a validate task has a failing check, 1 on error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import os
import sys
from typing import Optional

import numpy as np

from . import __version__, parallel
from .bismut import extrinsic_derivative, sed_bound_report
from .errors import ConfigInvalidError, MkvBismutError
from .oracle import fd_derivative
from .scenario import Scenario, load_scenario
from .sim import solve_mkv
from .studies import clean, convergence_study, run_check

EXIT_OK, EXIT_ERROR, EXIT_VALIDATION = 0, 1, 2


def _csv(rows: list[dict], columns: Optional[list[str]] = None) -> str:
    columns = columns or sorted({k for r in rows for k in r})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else repr(r[c]) if isinstance(r.get(c), float) else r.get(c)
                    for c in columns])
    return buf.getvalue()


def run_simulate(sc: Scenario, threads, files: dict) -> dict:
    ens, _ = solve_mkv(sc.model, sc.mu, sc.sim_config(threads))
    k = sc.model.k
    out = []
    for t in sc.t_targets:
        m = sc.grid.node(t)
        mu_t = ens.measure_at(m)
        out.append(dict(t=t, mean=np.atleast_1d(mu_t.mean).tolist(), moment_k=mu_t.moment(k)))
    files["summary.csv"] = ens.summary_csv(k)
    if sc.raw.get("write_ensemble", False):
        files["ensemble.bin"] = ens.to_bytes()
    return {"targets": out}


def run_derivative(sc: Scenario, threads, files: dict) -> dict:
    cfg = sc.sim_config(threads)
    eta = sc.eta.__class__(**{**sc.eta.__dict__, "threads": threads})
    rows, out = [], []
    for t in sc.t_targets:
        est = extrinsic_derivative(sc.model, sc.f, sc.mu, sc.nu, t, cfg, eta)
        entry = {"estimate": est.to_dict()}
        row = dict(t=t, value=est.value, term1=est.term1, term2=est.term2, stderr=est.stderr)
        if sc.raw.get("oracle", False):
            fd = fd_derivative(sc.model, sc.f, sc.mu, sc.nu, t, sc.eps, cfg)
            entry["fd"] = fd.to_dict()
            row.update(fd_value=fd.value, fd_stderr=fd.stderr)
        if "sed_c" in sc.raw:
            sed = sed_bound_report(est, sc.model, sc.mu, sc.nu, float(sc.raw["sed_c"]))
            entry["sed"] = sed.__dict__
        out.append(entry)
        rows.append(row)
    files["derivatives.csv"] = _csv(rows, [c for c in ["t", "value", "term1", "term2", "stderr",
                                                       "fd_value", "fd_stderr"] if c in rows[0]])
    return {"targets": out}


def run_validate(sc: Scenario, threads, files: dict) -> dict:
    results = [run_check(sc, spec, threads) for spec in sc.checks]
    files["checks.csv"] = _csv([dict(label=r["label"], kind=r["kind"], passed=r["passed"])
                                for r in results], ["label", "kind", "passed"])
    failed = [r["label"] for r in results if r["passed"] is False]
    return {"checks": results, "passed": not failed, "failed": failed}


def run_convergence(sc: Scenario, threads, files: dict) -> dict:
    out = convergence_study(sc, None, threads)
    files["convergence.csv"] = _csv(clean(out["rows"]))
    return out


TASK_RUNNERS = {
    "simulate": run_simulate,
    "derivative": run_derivative,
    "validate": run_validate,
    "convergence": run_convergence,
}


def execute(sc: Scenario, threads: Optional[int] = None) -> tuple[dict, dict]:
    """Run a scenario; returns the results document and extra output files."""
    files: dict = {}
    results = TASK_RUNNERS[sc.task](sc, threads, files)
    doc = {
        "scenario": sc.name,
        "task": sc.task,
        "config_hash": sc.hash,
        "code_version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "results": results,
    }
    return clean(doc), files


def results_bytes(doc: dict) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


def write_outputs(out_dir: str, doc: dict, files: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.json"), "wb") as fh:
        fh.write(results_bytes(doc))
    for name, body in files.items():
        mode = "wb" if isinstance(body, bytes) else "w"
        with open(os.path.join(out_dir, name), mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as fh:
            fh.write(body)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mkv-bismut", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the scenario's task"),
                       ("study", "run the scenario as a convergence study"),
                       ("validate", "run the scenario's validation checks")):
        s = sub.add_parser(name, help=text)
        s.add_argument("config")
        s.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: ${parallel.THREADS_ENV} or 1)")
        s.add_argument("--out", default=None, help="output directory (default: the scenario's output)")
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else parallel.default_threads()
    try:
        sc = load_scenario(args.config)
        if args.command == "study" and sc.task != "convergence":
            raise ConfigInvalidError("study needs a scenario with task = convergence")
        if args.command == "validate" and sc.task != "validate":
            raise ConfigInvalidError("validate needs a scenario with task = validate")
        doc, files = execute(sc, threads)
        write_outputs(args.out or sc.output, doc, files)
    except ConfigInvalidError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (MkvBismutError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    res = doc["results"]
    if sc.task == "validate":
        for c in res["checks"]:
            status = {True: "PASS", False: "FAIL", None: "INFO"}[c["passed"]]
            print(f"{status}  {c['label']}")
        return EXIT_OK if res["passed"] else EXIT_VALIDATION
    print(f"wrote {os.path.join(args.out or sc.output, 'results.json')}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
