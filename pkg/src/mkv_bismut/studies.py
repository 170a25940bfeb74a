"""Convergence studies and the named validation checks run by scenario files.

Each check returns a plain dict with a ``passed`` entry (``None`` for
report-only checks) and the numbers behind the verdict.
"""

from __future__ import annotations

import math
from typing import Any, Callable

import numpy as np

from .bismut import extrinsic_derivative, ftc_check, sed_bound_report
from .errors import DivergedError, LadderTooShortError
from .eta import EtaConfig, solve_eta
from .measures import EmpiricalMeasure, TimeGrid
from .oracle import (
    eta_eps_convergence,
    fd_derivative,
    girsanov_identity_check,
    perturbation_lipschitz,
)
from .scenario import Scenario, build_measure, parse_grid, parse_model, test_function
from .sim import ROLE_MU, ROLE_NU, SimConfig, closed_form_ou_mean, loglog_slope, solve_decoupled, solve_mkv
from . import spde


def clean(obj: Any) -> Any:
    """JSON-ready copy: numpy scalars and arrays to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


class _Ctx:
    """Scenario values with per-check overrides applied."""

    def __init__(self, sc: Scenario, spec: dict, threads: int | None):
        self.model = parse_model(spec["model"], "check.model") if "model" in spec else sc.model
        dim = self.model.dim if self.model is not None else 1
        # Galerkin checks build their own measures in mode coordinates
        own = "galerkin" in spec
        self.mu = build_measure(spec["mu"], dim, "check.mu") if "mu" in spec and not own else sc.mu
        self.nu = build_measure(spec["nu"], dim, "check.nu") if "nu" in spec and not own else sc.nu
        self.grid = parse_grid(spec["grid"]) if "grid" in spec else sc.grid
        self.n = int(spec.get("N", sc.n_particles))
        self.seed = int(spec.get("seed", sc.seed))
        self.t = float(spec.get("t", sc.t_targets[0]))
        self.f_name = spec.get("f", sc.f_name)
        self.f = test_function(self.f_name)
        eps = spec.get("eps", sc.eps)
        self.eps = list(eps) if isinstance(eps, list) else list(sc.eps)
        self.eta = EtaConfig(**{**sc.eta.__dict__, **spec.get("eta", {}), "threads": threads})
        self.threads = threads

    def cfg(self, **kw) -> SimConfig:
        base = dict(n_particles=self.n, grid=self.grid, seed=self.seed, threads=self.threads)
        base.update(kw)
        return SimConfig(**base)


def _slope_fit(x, y) -> tuple[float, float]:
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    coef = np.polyfit(lx, ly, 1)
    resid = ly - np.polyval(coef, lx)
    return float(coef[0]), float(np.sqrt(np.mean(resid ** 2)))


def _pair_mean_stderr(values: np.ndarray, antithetic: bool) -> tuple[float, float]:
    if antithetic:
        h = values.size // 2
        values = 0.5 * (values[:h] + values[h:])
    return float(values.mean()), float(np.std(values, ddof=1) / math.sqrt(values.size))


def convergence_study(sc: Scenario, study: dict | None = None, threads: int | None = None) -> dict:
    """Ladder along one axis with a least-squares log-log slope.

    dt: weak error of E f(X_T) (closed form for mean-field OU with f = x, else
    Richardson from the two finest levels), one Brownian path across grids.
    N: standard error of the derivative estimate.  eps: finite-difference
    ladder.  lambda: derivative estimate, eta norm and bound envelope.
    """
    study = dict(sc.study if study is None else study)
    ladder = study.get("ladder", [])
    if len(ladder) < 3:
        raise LadderTooShortError("a convergence ladder needs at least 3 points")
    ctx = _Ctx(sc, study, threads)
    axis = study["axis"]
    rows: list[dict] = []
    if axis == "dt":
        fine = int(study.get("M_fine", max(ladder)))
        anti = bool(study.get("antithetic", True))
        T = ctx.grid.horizon
        for M in ladder:
            if fine % M:
                raise LadderTooShortError("every M must divide M_fine")
            cfg = ctx.cfg(grid=TimeGrid(T, M), noise_substeps=fine // M, antithetic=anti)
            ens, _ = solve_mkv(ctx.model, ctx.mu, cfg)
            est, se = _pair_mean_stderr(ctx.f(ens.states[:, M]), anti)
            rows.append(dict(M=M, dt=T / M, estimate=est, stderr=se,
                             initial_mean=float(ens.states[:, 0, 0].mean())))
        p = ctx.model.params
        if ctx.model.name == "mean_field_ou" and ctx.f_name == "x":
            ref = float(closed_form_ou_mean(p["a"], p["beta"], rows[0]["initial_mean"], T))
            reference = "closed_form"
        else:
            e_c, e_f = rows[-2]["estimate"], rows[-1]["estimate"]
            ref = 2 * e_f - e_c
            reference = "richardson"
        for r in rows:
            r["error"] = abs(r["estimate"] - ref)
        slope, res = _slope_fit([r["dt"] for r in rows], [r["error"] for r in rows])
        out = dict(axis=axis, reference=reference, reference_value=ref, slope=slope,
                   slope_residual=res, rows=rows)
    elif axis == "N":
        for n in ladder:
            ctx.n = int(n)
            est = extrinsic_derivative(ctx.model, ctx.f, ctx.mu, ctx.nu, ctx.t, ctx.cfg(), ctx.eta)
            rows.append(dict(N=int(n), estimate=est.value, stderr=est.stderr))
        slope, res = _slope_fit([r["N"] for r in rows], [r["stderr"] for r in rows])
        out = dict(axis=axis, slope=slope, slope_residual=res, rows=rows)
    elif axis == "eps":
        fd = fd_derivative(ctx.model, ctx.f, ctx.mu, ctx.nu, ctx.t, ladder, ctx.cfg())
        for j, e in enumerate(fd.eps):
            row = dict(eps=float(e), estimate=float(fd.raw[j]), stderr=float(fd.raw_stderr[j]))
            if j > 0:
                row["richardson"] = float(fd.richardson[j - 1])
                row["richardson_stderr"] = float(fd.richardson_stderr[j - 1])
            rows.append(row)
        rich = fd.richardson
        resid = np.abs(np.diff(rich)).tolist()
        slope, res = _slope_fit(fd.eps, np.maximum(np.abs(fd.raw - fd.value), 1e-300))
        out = dict(axis=axis, richardson_residuals=resid, slope=slope, slope_residual=res,
                   value=fd.value, rows=rows)
    elif axis == "lambda":
        for lam in ladder:
            model = ctx.model.with_lambda(float(lam))
            est = extrinsic_derivative(model, ctx.f, ctx.mu, ctx.nu, ctx.t, ctx.cfg(), ctx.eta)
            sed = sed_bound_report(est, model, ctx.mu, ctx.nu, float(study.get("c", 1.0)))
            rows.append(dict(lam=float(lam), estimate=est.value, stderr=est.stderr,
                             envelope=sed.envelope, ratio=sed.ratio))
        slope, res = _slope_fit([r["lam"] for r in rows], [r["envelope"] for r in rows])
        out = dict(axis=axis, slope=slope, slope_residual=res, rows=rows)
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return out


# ---- checks -----------------------------------------------------------------------------

def check_closed_form_ou(ctx: _Ctx, spec: dict) -> dict:
    p = ctx.model.params
    est = extrinsic_derivative(ctx.model, ctx.f, ctx.mu, ctx.nu, ctx.t, ctx.cfg(), ctx.eta)
    target = math.exp((p["beta"] - p["a"]) * ctx.t) * float(ctx.nu.mean[0] - ctx.mu.mean[0])
    tol = max(float(spec.get("abs_floor", 0.05)), 3 * est.stderr + 4 * ctx.grid.dt)
    gap = abs(est.value - target)
    return dict(estimate=est.to_dict(), target=target, gap=gap, tolerance=tol, passed=gap <= tol)


def check_fd_oracle(ctx: _Ctx, spec: dict) -> dict:
    est = extrinsic_derivative(ctx.model, ctx.f, ctx.mu, ctx.nu, ctx.t, ctx.cfg(), ctx.eta)
    fd = fd_derivative(ctx.model, ctx.f, ctx.mu, ctx.nu, ctx.t, ctx.eps, ctx.cfg())
    comb = float(np.std(est.contributions - fd.contributions, ddof=1) / math.sqrt(ctx.n))
    gap = abs(est.value - fd.value)
    k, cap = float(spec.get("k", 3.0)), float(spec.get("abs_max", 0.1))
    return dict(estimate=est.to_dict(), fd=fd.to_dict(), gap=gap, combined_stderr=comb,
                passed=bool(gap <= k * comb + 1e-15 and gap <= cap))


def check_null_direction(ctx: _Ctx, spec: dict) -> dict:
    cfg = ctx.cfg()
    mkv, flow = solve_mkv(ctx.model, ctx.mu, cfg)
    nu_dec = solve_decoupled(ctx.model, flow, ctx.mu, cfg, paired=mkv, role=ROLE_MU)
    m = ctx.grid.node(ctx.t)
    eta, diag = solve_eta(ctx.model, mkv, nu_dec, m, ctx.eta)
    rms = float(np.sqrt(np.mean(eta.values ** 2)))
    est = extrinsic_derivative(ctx.model, ctx.f, ctx.mu, ctx.mu, ctx.t, cfg, ctx.eta)
    return dict(eta_rms=rms, value=est.value, term1=est.term1, term2=est.term2,
                iterations=diag.iterations, passed=bool(rms <= 1e-12 and est.value == 0.0))


def check_eta_uniqueness(ctx: _Ctx, spec: dict) -> dict:
    tol = float(spec.get("tol", 1e-6))
    max_iter = int(spec.get("max_iter", 30))
    cfg_eta = EtaConfig(tol=tol, max_iter=max_iter, threads=ctx.threads, raise_on_max_iter=False)
    out = []
    for lam in spec.get("lambdas", [0.5, 1.0]):
        model = ctx.model.with_lambda(float(lam))
        cfg = ctx.cfg()
        mkv, flow = solve_mkv(model, ctx.mu, cfg)
        nu_dec = solve_decoupled(model, flow, ctx.nu, cfg, paired=mkv, role=ROLE_NU)
        m = ctx.grid.node(ctx.t)
        e0, d0 = solve_eta(model, mkv, nu_dec, m, cfg_eta)
        start = np.random.default_rng(int(spec.get("init_seed", 0))).standard_normal(e0.values.shape)
        e1, d1 = solve_eta(model, mkv, nu_dec, m, cfg_eta, eta0=start)
        diff = e0.values - e1.values
        gap = float(np.sqrt(np.einsum("imld,imld->m", diff, diff) / (diff.shape[0] * np.arange(1, m + 1))).max())
        out.append(dict(lam=float(lam), gap=gap, iterations_zero=d0.iterations,
                        iterations_random=d1.iterations, converged=bool(d0.converged and d1.converged),
                        passed=bool(gap <= 10 * tol and d0.converged and d1.converged)))
    return dict(runs=out, tol=tol, passed=all(r["passed"] for r in out))


def check_eta_divergence(ctx: _Ctx, spec: dict) -> dict:
    model = ctx.model.with_lambda(float(spec.get("lam", 0.05)))
    cfg = ctx.cfg()
    mkv, flow = solve_mkv(model, ctx.mu, cfg)
    nu_dec = solve_decoupled(model, flow, ctx.nu, cfg, paired=mkv, role=ROLE_NU)
    m = ctx.grid.node(ctx.t)
    eta_cfg = EtaConfig(tol=float(spec.get("tol", 1e-6)), max_iter=int(spec.get("max_iter", 30)),
                        threads=ctx.threads, raise_on_max_iter=False)
    try:
        _, diag = solve_eta(model, mkv, nu_dec, m, eta_cfg)
        return dict(fired=False, diagnostics=diag.to_dict(), passed=False)
    except DivergedError as exc:
        return dict(fired=True, message=str(exc), diagnostics=exc.diagnostics.to_dict(), passed=True)


def check_girsanov(ctx: _Ctx, spec: dict) -> dict:
    rep = girsanov_identity_check(ctx.model, ctx.mu, ctx.nu, float(spec.get("eps", 0.1)), ctx.t, ctx.cfg())
    k = float(spec.get("k", 3.0))
    return dict(**rep.to_dict(), passed=bool(rep.gaps_within(k) and rep.r_within(k)))


def check_ftc(ctx: _Ctx, spec: dict) -> dict:
    rep = ftc_check(ctx.model, ctx.f, ctx.mu, ctx.nu, ctx.t, int(spec.get("r_nodes", 3)), ctx.cfg(), ctx.eta)
    ok = rep.within(float(spec.get("k", 3.0)))
    return dict(lhs=rep.lhs, rhs=rep.rhs, residual=rep.residual, stderr=rep.stderr,
                integrand=rep.integrand, nodes=rep.nodes, within_3_stderr=ok,
                passed=ok if spec.get("assert", True) else None)


def check_weak_order(ctx: _Ctx, spec: dict, sc: Scenario) -> dict:
    study = {"axis": "dt", "ladder": spec.get("ladder", [16, 32, 64, 128]), **spec}
    out = convergence_study(sc, study, ctx.threads)
    target, width = float(spec.get("target", 1.0)), float(spec.get("width", 0.3))
    return dict(**out, passed=abs(out["slope"] - target) <= width)


def check_stderr_scaling(ctx: _Ctx, spec: dict, sc: Scenario) -> dict:
    study = {"axis": "N", "ladder": spec.get("ladder", [500, 1000, 2000, 4000]), **spec}
    out = convergence_study(sc, study, ctx.threads)
    target, width = float(spec.get("target", -0.5)), float(spec.get("width", 0.15))
    return dict(**out, passed=abs(out["slope"] - target) <= width)


def check_perturbation(ctx: _Ctx, spec: dict) -> dict:
    rep = perturbation_lipschitz(ctx.model, ctx.mu, ctx.nu, ctx.mu, ctx.t, ctx.eps, ctx.cfg())
    return dict(eps=rep.eps, distances=rep.distances, tv=rep.tv, wk=rep.wk, slope=rep.slope,
                passed=rep.passed)


def check_eta_eps(ctx: _Ctx, spec: dict) -> dict:
    rep = eta_eps_convergence(ctx.model, ctx.mu, ctx.nu, ctx.t, ctx.eps, ctx.cfg(), ctx.eta)
    return dict(eps=rep.eps, rms=rep.rms, rms_stderr=rep.rms_stderr, eta_norm=rep.eta_norm,
                ratio=float(rep.rms[-1] / rep.rms[0]) if rep.rms[0] > 0 else None, passed=rep.passed)


def _galerkin(spec: dict) -> spde.GalerkinModel:
    g = dict(spec.get("galerkin", {}))
    kind = g.pop("kind", "mean_field_modes")
    if kind == "pure_semigroup":
        return spde.pure_semigroup(g["a_spectrum"])
    return spde.mean_field_modes(**g)


def check_spde_fd(ctx: _Ctx, spec: dict) -> dict:
    gm = _galerkin(spec)
    mu = build_measure(spec["mu"], gm.modes, "check.mu") if "mu" in spec else ctx.mu
    nu = build_measure(spec["nu"], gm.modes, "check.nu") if "nu" in spec else ctx.nu
    f = lambda p: p[:, 0]
    rep = spde.fd_extrinsic_derivative_spde(gm, f, mu, nu, ctx.t, ctx.eps, ctx.cfg())
    p = gm.params
    target = math.exp((p["q"] * p["beta"] - gm.a_spectrum[0]) * ctx.t) * float(nu.mean[0] - mu.mean[0])
    tol = max(float(spec.get("abs_floor", 0.05)), 3 * rep.stderr + 4 * ctx.grid.dt)
    gap = abs(rep.value - target)
    return dict(fd=rep.to_dict(), target=target, gap=gap, tolerance=tol, passed=gap <= tol)


def check_spde_semigroup(ctx: _Ctx, spec: dict) -> dict:
    a = np.asarray(spec.get("a_spectrum", [1.0, 4.0, 9.0]), float)
    gm = spde.pure_semigroup(a)
    x0 = np.asarray(spec.get("x0", np.ones(a.size)), float)
    cfg = ctx.cfg()
    ens, _ = spde.solve_galerkin_mkv(gm, EmpiricalMeasure.dirac(x0), cfg)
    factor = gm.semigroup(cfg.grid.dt)
    ref = np.empty((cfg.grid.steps + 1, a.size))
    ref[0] = x0
    for m in range(cfg.grid.steps):
        ref[m + 1] = factor * ref[m]
    bitwise = bool(np.array_equal(ens.states[0], ref) and np.all(ens.states == ens.states[:1]))
    closed = np.exp(-np.outer(cfg.grid.times, a)) * x0
    rel = float(np.max(np.abs(ens.states[0] - closed) / np.abs(closed)))
    return dict(bitwise_repeated_factor=bitwise, max_rel_gap_closed_form=rel,
                passed=bool(bitwise and rel <= 1e-13))


CHECKS: dict[str, Callable] = {
    "closed_form_ou": check_closed_form_ou,
    "fd_oracle": check_fd_oracle,
    "null_direction": check_null_direction,
    "eta_uniqueness": check_eta_uniqueness,
    "eta_divergence": check_eta_divergence,
    "girsanov": check_girsanov,
    "ftc": check_ftc,
    "weak_order": check_weak_order,
    "stderr_scaling": check_stderr_scaling,
    "perturbation_lipschitz": check_perturbation,
    "eta_eps": check_eta_eps,
    "spde_fd": check_spde_fd,
    "spde_semigroup": check_spde_semigroup,
}
_NEEDS_SCENARIO = {"weak_order", "stderr_scaling"}


def run_check(sc: Scenario, spec: dict, threads: int | None = None) -> dict:
    kind = spec["kind"]
    if kind not in CHECKS:
        raise KeyError(f"unknown check kind {kind!r}")
    ctx = _Ctx(sc, spec, threads)
    fn = CHECKS[kind]
    res = fn(ctx, spec, sc) if kind in _NEEDS_SCENARIO else fn(ctx, spec)
    label = spec.get("label", kind if ctx.model is None else f"{kind}[{ctx.model.name}]")
    return clean({"kind": kind, "label": label, **res})
