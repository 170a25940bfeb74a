"""Acceptance criteria, run from the scenario files in scenarios/acc*.json.

Each test records its outcome through the ``criterion`` fixture; the terminal
summary prints one PASS/FAIL line per criterion.
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import pytest

from mkv_bismut import cli
from mkv_bismut.scenario import load_scenario

SCENARIOS = sorted((Path(__file__).resolve().parents[1] / "scenarios").glob("acc*.json"))

pytestmark = pytest.mark.slow


def strip_created(data: bytes) -> bytes:
    return b"\n".join(l for l in data.splitlines() if b'"created"' not in l)


@pytest.fixture(scope="module")
def runs():
    out = {}
    for path in SCENARIOS:
        start = time.perf_counter()
        doc, _ = cli.execute(load_scenario(str(path)), threads=1)
        out[path.stem[:5]] = dict(path=path, doc=doc, bytes=cli.results_bytes(doc),
                                  seconds=time.perf_counter() - start)
    return out


def checks(runs, key, kind=None):
    found = [c for c in runs[key]["doc"]["results"]["checks"] if kind is None or c["kind"] == kind]
    assert found, f"{key} has no {kind} checks"
    return found


def test_criterion_01_closed_form_ou(runs, criterion):
    (c,) = checks(runs, "acc01", "closed_form_ou")
    secs = runs["acc01"]["seconds"]
    ok = c["gap"] <= c["tolerance"] and secs <= 300
    criterion(1, ok, f"gap {c['gap']:.4f} <= tol {c['tolerance']:.4f}, {secs:.1f}s")
    est = c["estimate"]
    assert c["tolerance"] == pytest.approx(max(0.05, 3 * est["stderr"] + 4 / est["steps"]))
    assert ok


def test_criterion_02_tanh_vs_fd(runs, criterion):
    (c,) = checks(runs, "acc02", "fd_oracle")
    ok = c["gap"] <= 3 * c["combined_stderr"] and c["gap"] <= 0.1
    criterion(2, ok, f"gap {c['gap']:.4f} <= 3*se {3 * c['combined_stderr']:.4f} and 0.1")
    assert ok


def test_criterion_03_null_direction(runs, criterion):
    for c in checks(runs, "acc03", "null_direction"):
        ok = c["eta_rms"] <= 1e-12 and c["value"] == 0.0
        criterion(3, ok, f"{c['label']} eta rms {c['eta_rms']:.1e} value {c['value']}")
        assert ok


def test_criterion_04_eta_uniqueness(runs, criterion):
    for c in checks(runs, "acc04", "eta_uniqueness"):
        criterion(4, c["passed"], f"{c['label']} {'PASS' if c['passed'] else 'FAIL'}")
        assert c["passed"]


def test_criterion_04_divergence_detector(runs, criterion):
    results = checks(runs, "acc04", "eta_divergence")
    for c in results:
        d = c["diagnostics"]
        assert {"residuals", "ratios", "lambda2_t"} <= set(d)
        criterion(4, c["fired"], f"{c['label']} fired={c['fired']} after {d['iterations']} iterations")
    assert all(c["fired"] for c in results)


def test_criterion_05_girsanov(runs, criterion):
    for c in checks(runs, "acc05", "girsanov"):
        gaps_ok = all(abs(g) <= 3 * ci for g, ci in zip(c["gap"], c["gap_stderr"]))
        r_ok = abs(c["mean_R"] - 1) <= 3 * c["mean_R_stderr"]
        worst = max(abs(g) / ci for g, ci in zip(c["gap"], c["gap_stderr"]))
        criterion(5, gaps_ok and r_ok, f"{c['label']} max |gap|/se {worst:.2f}, "
                                       f"|mean R - 1| {abs(c['mean_R'] - 1):.1e}")
        assert gaps_ok and r_ok


def test_criterion_06_ftc(runs, criterion):
    for c in checks(runs, "acc06", "ftc"):
        ok = c["residual"] <= 3 * c["stderr"]
        asserted = c["passed"] is not None
        criterion(6, ok if asserted else None,
                  f"{c['label']} residual {c['residual']:.4f} vs 3*se {3 * c['stderr']:.4f}"
                  + ("" if asserted else " (reported)"))
        assert math.isfinite(c["residual"]) and c["stderr"] > 0
        if asserted:
            assert ok


def test_criterion_07_orders(runs, criterion):
    (w,) = checks(runs, "acc07", "weak_order")
    (s,) = checks(runs, "acc07", "stderr_scaling")
    w_ok, s_ok = abs(w["slope"] - 1) <= 0.3, abs(s["slope"] + 0.5) <= 0.15
    criterion(7, w_ok, f"weak slope {w['slope']:.3f}")
    criterion(7, s_ok, f"stderr slope {s['slope']:.3f}")
    assert w_ok and s_ok


def test_criterion_08_perturbation(runs, criterion):
    for c in checks(runs, "acc08", "perturbation_lipschitz"):
        ok = c["slope"] >= 0.8
        criterion(8, ok, f"{c['label']} slope {c['slope']:.3f}")
        assert ok


def test_criterion_09_eta_eps(runs, criterion):
    oks = []
    for c in checks(runs, "acc09", "eta_eps"):
        rms = dict(zip(c["eps"], c["rms"]))
        ok = rms[0.05] <= 0.5 * rms[0.2]
        oks.append(criterion(9, ok, f"{c['label']} rms ratio {rms[0.05] / rms[0.2]:.3f} (need <= 0.5)"))
    assert all(oks)


def test_criterion_10_spde(runs, criterion):
    for c in checks(runs, "acc10", "spde_fd"):
        ok = c["gap"] <= c["tolerance"]
        criterion(10, ok, f"{c['label']} gap {c['gap']:.4f} <= {c['tolerance']:.4f}")
        assert ok
    (sg,) = checks(runs, "acc10", "spde_semigroup")
    criterion(10, sg["bitwise_repeated_factor"], "semigroup bitwise")
    assert sg["bitwise_repeated_factor"]


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem[:5])
def test_criterion_11_determinism(runs, criterion, path, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mkv_bismut", "validate", str(path),
                           "--threads", "4", "--out", str(tmp_path)], capture_output=True)
    assert proc.returncode in (0, 2), proc.stderr.decode()
    ok = strip_created((tmp_path / "results.json").read_bytes()) == strip_created(runs[path.stem[:5]]["bytes"])
    criterion(11, ok, f"{path.stem[:5]} {'identical' if ok else 'DIFFERS'}")
    assert ok
    doc = json.loads((tmp_path / "results.json").read_text())
    assert doc["config_hash"] == runs[path.stem[:5]]["doc"]["config_hash"]
