"""Independent checks: mixture finite differences, the Girsanov coupling identity,
the perturbation-Lipschitz slope and the epsilon -> 0 ladder of eta.

None of these use the eta fixed point except :func:`eta_eps_convergence`, which
compares against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EpsilonOutOfRangeError, EpsListInvalidError, LambdaZeroError
from .eta import EtaConfig, eta_epsilon, solve_eta
from .measures import EmpiricalMeasure, weighted_tv_estimate, wk_distance
from .models import ModelSpec
from .sim import (
    INDEPENDENT_STREAM_OFFSET,
    ROLE_MU,
    ROLE_NU,
    PathEnsemble,
    SimConfig,
    loglog_slope,
    solve_decoupled,
    solve_mixture,
    solve_mkv,
)
from .bismut import per_stream
from .measures import same_measure

ROLE_GAMMA = 2


def validate_eps_list(eps_list, min_len: int = 2) -> np.ndarray:
    eps = np.asarray(eps_list, dtype=float)
    if (eps.ndim != 1 or eps.size < min_len or np.any(eps <= 0) or np.any(eps >= 1)
            or np.any(np.diff(eps) >= 0)):
        raise EpsListInvalidError(f"eps list must be strictly decreasing in (0, 1) with ≥ {min_len} entries")
    return eps


def _stderr(c: np.ndarray) -> float:
    return float(np.std(c, ddof=1) / math.sqrt(c.size))


@dataclass
class FDReport:
    eps: np.ndarray
    raw: np.ndarray
    raw_stderr: np.ndarray
    richardson: np.ndarray
    richardson_stderr: np.ndarray
    value: float
    stderr: float
    contributions: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"eps": self.eps.tolist(), "raw": self.raw.tolist(),
                "raw_stderr": self.raw_stderr.tolist(), "richardson": self.richardson.tolist(),
                "richardson_stderr": self.richardson_stderr.tolist(), "value": self.value,
                "stderr": self.stderr}


def fd_ladder(run: Callable[[float], PathEnsemble], f: Callable, m_star: int,
              eps_list: Sequence[float], n_streams: int) -> FDReport:
    """Forward differences of eps -> sum_i w_i(eps) f(X_i(eps)) with Richardson extrapolation.

    ``run(eps)`` must return ensembles whose particles share stream ids across
    eps; contributions are aggregated per stream for the error bars.
    """
    eps = validate_eps_list(eps_list)

    def per(ens: PathEnsemble) -> np.ndarray:
        fx = np.asarray(f(ens.states[:, m_star]), dtype=float)
        return n_streams * per_stream(ens.weights * fx, ens.streams, n_streams)

    base = per(run(0.0))
    contrib = np.array([(per(run(e)) - base) / e for e in eps])
    raw = contrib.mean(axis=1)
    rich_c = np.array([(eps[j] * contrib[j + 1] - eps[j + 1] * contrib[j]) / (eps[j] - eps[j + 1])
                       for j in range(eps.size - 1)])
    rich = rich_c.mean(axis=1)
    return FDReport(eps, raw, np.array([_stderr(c) for c in contrib]), rich,
                    np.array([_stderr(c) for c in rich_c]), float(rich[-1]), _stderr(rich_c[-1]),
                    rich_c[-1])


def fd_derivative(model: ModelSpec, f: Callable, mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                  t: float, eps_list: Sequence[float], cfg: SimConfig) -> FDReport:
    """Finite-difference derivative along (1 - eps) mu + eps nu with common random numbers."""
    m_star = cfg.grid.node(t)
    return fd_ladder(lambda e: solve_mixture(model, mu, nu, e, cfg), f, m_star, eps_list,
                     cfg.n_particles)


@dataclass
class CouplingRun:
    X1: np.ndarray  # (N, m0 + 1, d)
    X2: np.ndarray
    Y: np.ndarray
    R: np.ndarray  # (N,)
    log_R: np.ndarray
    phi: np.ndarray  # (N, m0, d)


@dataclass
class GirsanovReport:
    tests: list[str]
    lhs: np.ndarray  # E f(X2)
    rhs: np.ndarray  # E R f(X1)
    gap: np.ndarray
    gap_stderr: np.ndarray
    ci95: np.ndarray
    mean_R: float
    mean_R_stderr: float
    log_R_mean: float
    log_R_var: float
    log_R_mean_stderr: float
    n_eff: float
    weight_degenerate: bool
    y_terminal_gap: float
    run: CouplingRun = field(repr=False)

    def gaps_within(self, k: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.gap) <= k * self.gap_stderr + 1e-15))

    def r_within(self, k: float = 3.0) -> bool:
        return abs(self.mean_R - 1.0) <= k * self.mean_R_stderr + 1e-15

    def to_dict(self) -> dict:
        return {"tests": self.tests, "lhs": self.lhs.tolist(), "rhs": self.rhs.tolist(),
                "gap": self.gap.tolist(), "gap_stderr": self.gap_stderr.tolist(),
                "ci95": self.ci95.tolist(), "mean_R": self.mean_R,
                "mean_R_stderr": self.mean_R_stderr, "n_eff": self.n_eff,
                "weight_degenerate": self.weight_degenerate}


DEFAULT_GIRSANOV_TESTS = {
    "x": lambda p: p[:, 0],
    "x^2": lambda p: p[:, 0] ** 2,
    "cos x": lambda p: np.cos(p[:, 0]),
}


def girsanov_identity_check(model: ModelSpec, mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                            eps: float, t0: float, cfg: SimConfig,
                            tests: Optional[dict[str, Callable]] = None) -> GirsanovReport:
    """Reweight decoupled paths under the mu-flow to reproduce those under the pi_eps flow.

    X1 is driven by the mu-flow, X2 by the pi_eps flow, both with the same fresh
    noise (independent of the noise that produced the flows).  Y is the coupled
    process meeting X1 at t0 and R the discrete exponential density.
    """
    if model.lam == 0:
        raise LambdaZeroError("lambda must be non-zero")
    if not (0.0 <= eps < 1.0):
        raise EpsilonOutOfRangeError(f"eps={eps} outside [0, 1)")
    tests = DEFAULT_GIRSANOV_TESTS if tests is None else tests
    grid = cfg.grid
    m0 = grid.node(t0)
    cfg = cfg.replace(antithetic=False)
    base = solve_mixture(model, mu, nu, 0.0, cfg)
    pert = base if eps == 0.0 else solve_mixture(model, mu, nu, eps, cfg)
    fmu, fpi = base.flow(), pert.flow()
    x1 = solve_decoupled(model, fmu, mu, cfg, role=ROLE_MU, stream_offset=INDEPENDENT_STREAM_OFFSET)
    x2 = solve_decoupled(model, fpi, mu, cfg, paired=x1, role=ROLE_MU)
    n, d = x1.n, x1.dim
    dt, lam, times = grid.dt, model.lam, grid.times
    dW, dB = x1.dW, x1.dB
    xi_mu = np.zeros((n, d))
    xi_pi = np.zeros((n, d))
    for r in range(m0):
        xi_mu += dB[:, r] @ np.asarray(model.noise(times[r], fmu.at(r)), float).T
        xi_pi += dB[:, r] @ np.asarray(model.noise(times[r], fpi.at(r)), float).T
    shift = (xi_mu - xi_pi) / times[m0]
    Y = np.empty((n, m0 + 1, d))
    Y[:, 0] = x1.states[:, 0]
    phi = np.empty((n, m0, d))
    for m in range(m0):
        t = times[m]
        bx = model.drift(t, x1.states[:, m], fmu.at(m))
        phi[:, m] = model.drift(t, Y[:, m], fpi.at(m)) - bx - shift
        sig_pi = np.asarray(model.noise(t, fpi.at(m)), float)
        Y[:, m + 1] = Y[:, m] + (bx + shift) * dt + lam * dW[:, m] + dB[:, m] @ sig_pi.T
    u = phi / lam
    log_R = np.einsum("imd,imd->i", u, dW[:, :m0]) - 0.5 * np.einsum("imd,imd->i", u, u) * dt
    R = np.exp(log_R)
    X1, X2 = x1.states[:, m0], x2.states[:, m0]
    names, lhs, rhs, gap, se = [], [], [], [], []
    for name, f in tests.items():
        a = np.asarray(f(X2), float)
        b = R * np.asarray(f(X1), float)
        names.append(name)
        lhs.append(a.mean())
        rhs.append(b.mean())
        gap.append(a.mean() - b.mean())
        se.append(_stderr(a - b) if eps > 0 else 0.0)
    se = np.array(se)
    r = np.exp(log_R - log_R.max())  # scale-free, safe when R overflows
    n_eff = float(r.sum() ** 2 / np.sum(r ** 2))
    run = CouplingRun(x1.states[:, : m0 + 1], x2.states[:, : m0 + 1], Y, R, log_R, phi)
    return GirsanovReport(names, np.array(lhs), np.array(rhs), np.array(gap), se, 1.96 * se,
                          float(R.mean()), _stderr(R), float(log_R.mean()),
                          float(np.var(log_R, ddof=1)), _stderr(log_R), n_eff,
                          bool(n_eff < 0.1 * n), float(np.abs(Y[:, m0] - X1).max()), run)


@dataclass
class PerturbationReport:
    eps: np.ndarray
    distances: np.ndarray
    tv: np.ndarray
    wk: np.ndarray
    slope: float
    passed: bool


def perturbation_lipschitz(model: ModelSpec, mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                           gamma: EmpiricalMeasure, t: float, eps_list: Sequence[float],
                           cfg: SimConfig, k: Optional[float] = None,
                           min_slope: float = 0.8) -> PerturbationReport:
    """Distance between gamma transported under the pi_eps flow and under the mu flow, per eps."""
    eps = validate_eps_list(eps_list)
    k = model.k if k is None else k
    m = cfg.grid.node(t)
    cfg = cfg.replace(antithetic=False)
    fmu = solve_mixture(model, mu, nu, 0.0, cfg).flow()
    a = solve_decoupled(model, fmu, gamma, cfg, role=ROLE_GAMMA, stream_offset=INDEPENDENT_STREAM_OFFSET)
    tv, wk = [], []
    for e in eps:
        fpi = solve_mixture(model, mu, nu, float(e), cfg).flow()
        b = solve_decoupled(model, fpi, gamma, cfg, paired=a, role=ROLE_GAMMA)
        pa, pb = a.measure_at(m), b.measure_at(m)
        tv.append(weighted_tv_estimate(pa, pb, k))
        wk.append(wk_distance(pa, pb, k))
    tv, wk = np.array(tv), np.array(wk)
    dist = tv + wk
    if np.all(dist > 0):
        slope = loglog_slope(eps, dist)
    else:
        slope = float("nan")
    return PerturbationReport(eps, dist, tv, wk, slope, bool(slope >= min_slope))


@dataclass
class EtaLadderReport:
    eps: np.ndarray
    rms: np.ndarray
    rms_stderr: np.ndarray
    eta_norm: float
    passed: bool


def eta_eps_convergence(model: ModelSpec, mu: EmpiricalMeasure, nu: EmpiricalMeasure, t: float,
                        eps_list: Sequence[float], cfg: SimConfig,
                        eta_cfg: EtaConfig = EtaConfig()) -> EtaLadderReport:
    """RMS distance between the difference-quotient field and the fixed-point field per eps."""
    eps = validate_eps_list(eps_list)
    m = cfg.grid.node(t)
    cfg = cfg.replace(antithetic=False)
    mkv, flow = solve_mkv(model, mu, cfg)
    role = ROLE_MU if same_measure(mu, nu) else ROLE_NU
    nu_dec = solve_decoupled(model, flow, nu, cfg, paired=mkv, role=role)
    eta, _ = solve_eta(model, mkv, nu_dec, m, eta_cfg)
    ref = eta.terminal(m)
    base = solve_mixture(model, mu, nu, 0.0, cfg)
    rms, se = [], []
    for e in eps:
        field_ = eta_epsilon(model, mu, nu, float(e), m, cfg, base=base)
        per = np.mean(np.sum((field_ - ref) ** 2, axis=-1), axis=1)
        r = math.sqrt(per.mean())
        rms.append(r)
        se.append(_stderr(per) / (2 * r) if r > 0 else 0.0)
    rms = np.array(rms)
    passed = bool(rms[-1] < 0.5 * rms[0]) if rms[0] > 0 else bool(rms[-1] == 0)
    return EtaLadderReport(eps, rms, np.array(se), eta.norm(), passed)
