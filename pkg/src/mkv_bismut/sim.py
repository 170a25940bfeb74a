"""Euler-Maruyama particle solvers for the interacting and the decoupled equation.

The interacting system advances N (possibly weighted) particles, recomputing the
empirical measure at every node.  The decoupled system reads the measure from a
frozen flow instead.  Both share the same step so that a decoupled run under
the interacting run's own flow, with the same noise, reproduces it bitwise.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import rng
from .errors import GridMismatchError, NonFiniteStateError, ShapeMismatchError
from .measures import (
    EmpiricalMeasure,
    MeasureFlow,
    TimeGrid,
    flow_distance,
    resample as resample_measure,
    same_measure,
    weighted_sum,
    weighted_tv_estimate,
    wk_distance,
)
from .models import ModelSpec

ROLE_MU = 0
ROLE_NU = 1
# decoupled ensembles that must be independent of the flow's own noise
INDEPENDENT_STREAM_OFFSET = 1 << 40


@dataclass(frozen=True)
class SimConfig:
    """Particle count, grid, base seed and sampling options.

    ``noise_substeps`` builds each increment from that many finer ones, which
    keeps one Brownian path across grid refinements.  ``antithetic`` pairs
    particle i with particle i + N/2 driven by the negated noise.
    """

    n_particles: int
    grid: TimeGrid
    seed: int = 0
    scheme: str = "euler-maruyama"
    noise_substeps: int = 1
    antithetic: bool = False
    threads: Optional[int] = None

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("N must be ≥ 2")
        if self.scheme != "euler-maruyama":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if self.noise_substeps < 1:
            raise ValueError("noise_substeps must be ≥ 1")
        if self.antithetic and self.n_particles % 2:
            raise ValueError("antithetic sampling needs an even N")

    def replace(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    states: np.ndarray  # (N, M+1, d)
    dW: np.ndarray  # (N, M, d)
    dB: np.ndarray  # (N, M, d)
    weights: np.ndarray  # (N,)
    streams: np.ndarray  # (N,) stream id per particle
    seed: int
    signs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.signs is None:
            object.__setattr__(self, "signs", np.ones(self.n))

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def measure_at(self, m: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.states[:, m, :], self.weights)

    def flow(self) -> MeasureFlow:
        return MeasureFlow(self.grid, tuple(self.measure_at(m) for m in range(self.grid.steps + 1)))

    def summary_csv(self, k: float = 1.0) -> str:
        """Per-node weighted mean and k-th moment."""
        buf = io.StringIO()
        cols = ["t"] + [f"mean_{j + 1}" for j in range(self.dim)] + [f"moment_{k:g}"]
        buf.write(",".join(cols) + "\n")
        norms = np.linalg.norm(self.states, axis=2) ** k
        for m, t in enumerate(self.grid.times):
            row = [t, *np.atleast_1d(weighted_sum(self.states[:, m, :], self.weights)),
                   weighted_sum(norms[:, m], self.weights)]
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def to_bytes(self, kind: int = 0) -> bytes:
        """Binary layout documented in docs/formats.md."""
        n, m1, d = self.states.shape
        head = MAGIC_ENSEMBLE + struct.pack("<qqqqqd", n, m1 - 1, d, self.seed, kind, self.grid.horizon)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in (self.states, self.dW, self.dB, self.weights, self.signs))
        return head + body + np.ascontiguousarray(self.streams, dtype="<i8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PathEnsemble":
        if blob[:8] != MAGIC_ENSEMBLE:
            raise ValueError("not an ensemble file")
        n, m, d, seed, _kind, horizon = struct.unpack_from("<qqqqqd", blob, 8)
        off = 8 + struct.calcsize("<qqqqqd")

        def take(count, shape, dtype="<f8"):
            nonlocal off
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
            off += arr.nbytes
            return arr.astype(float if dtype == "<f8" else np.int64)

        states = take(n * (m + 1) * d, (n, m + 1, d))
        dW, dB = take(n * m * d, (n, m, d)), take(n * m * d, (n, m, d))
        weights, signs = take(n, (n,)), take(n, (n,))
        streams = take(n, (n,), "<i8")
        return cls(TimeGrid(horizon, m), states, dW, dB, weights, streams, seed, signs)


MAGIC_ENSEMBLE = b"MKVENS01"


def particle_streams(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    n = cfg.n_particles
    if cfg.antithetic:
        half = n // 2
        return np.arange(n) % half, np.concatenate([np.ones(half), -np.ones(half)])
    return np.arange(n), np.ones(n)


def draw_noise(cfg: SimConfig, dim: int, streams, signs=None) -> tuple[np.ndarray, np.ndarray]:
    g = cfg.grid
    dW = rng.increments(cfg.seed, streams, g.steps, dim, g.dt, rng.KIND_W, cfg.noise_substeps, signs)
    dB = rng.increments(cfg.seed, streams, g.steps, dim, g.dt, rng.KIND_B, cfg.noise_substeps, signs)
    return dW, dB


def initial_atoms(init: EmpiricalMeasure, cfg: SimConfig, role: int = ROLE_MU,
                  resample: Optional[bool] = None) -> np.ndarray:
    """N uniform atoms for the initial law.

    ``resample=None`` keeps the atoms of a uniform measure that already has N
    of them and resamples (seeded, with replacement) otherwise.
    """
    n = cfg.n_particles
    if resample is None:
        resample = not (init.size == n and init.is_uniform())
    if not resample:
        if init.size != n:
            raise ShapeMismatchError(f"init has {init.size} atoms, expected {n}")
        return np.array(init.points)
    return np.array(resample_measure(init, n, rng.init_rng(cfg.seed, role)).points)


def _check_finite(x: np.ndarray, m: int):
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError(m)


def euler_paths(model: ModelSpec, x0: np.ndarray, weights: np.ndarray, dW: np.ndarray,
                dB: np.ndarray, grid: TimeGrid, flow: Optional[MeasureFlow] = None
                ) -> tuple[np.ndarray, list[EmpiricalMeasure]]:
    """Euler-Maruyama paths; interacting when ``flow`` is None, frozen otherwise."""
    n, d = x0.shape
    states = np.empty((n, grid.steps + 1, d))
    states[:, 0] = x0
    measures = []
    dt, lam = grid.dt, model.lam
    for m in range(grid.steps):
        t = grid.times[m]
        x = states[:, m]
        mu = EmpiricalMeasure(x, weights) if flow is None else flow.at(m)
        measures.append(mu)
        sig = np.asarray(model.noise(t, mu), dtype=float)
        states[:, m + 1] = x + model.drift(t, x, mu) * dt + lam * dW[:, m] + dB[:, m] @ sig.T
        _check_finite(states[:, m + 1], m + 1)
    measures.append(EmpiricalMeasure(states[:, -1], weights) if flow is None else flow.at(grid.steps))
    return states, measures


def simulate_weighted(model: ModelSpec, x0: np.ndarray, weights: np.ndarray,
                      streams: np.ndarray, cfg: SimConfig, signs: Optional[np.ndarray] = None,
                      flow: Optional[MeasureFlow] = None, noise=None) -> PathEnsemble:
    """Low-level driver: explicit atoms, weights and stream ids."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 2 or x0.shape[1] != model.dim:
        raise ShapeMismatchError("initial atoms must have shape (n, model.dim)")
    _check_finite(x0, 0)
    signs = np.ones(len(streams)) if signs is None else signs
    dW, dB = draw_noise(cfg, model.dim, streams, signs) if noise is None else noise
    states, _ = euler_paths(model, x0, weights, dW, dB, cfg.grid, flow)
    return PathEnsemble(cfg.grid, states, dW, dB, np.asarray(weights, dtype=float),
                        np.asarray(streams), cfg.seed, np.asarray(signs, dtype=float))


def solve_mkv(model: ModelSpec, init: EmpiricalMeasure, cfg: SimConfig,
              resample: Optional[bool] = None, role: int = ROLE_MU
              ) -> tuple[PathEnsemble, MeasureFlow]:
    """Interacting particle system started from N atoms of ``init``."""
    if init.dim != model.dim:
        raise ShapeMismatchError("init dimension differs from the model's")
    x0 = initial_atoms(init, cfg, role, resample)
    streams, signs = particle_streams(cfg)
    n = cfg.n_particles
    ens = simulate_weighted(model, x0, np.full(n, 1.0 / n), streams, cfg, signs)
    return ens, ens.flow()


def solve_mixture(model: ModelSpec, mu: EmpiricalMeasure, nu: EmpiricalMeasure, eps: float,
                  cfg: SimConfig, r_mu: Optional[float] = None) -> PathEnsemble:
    """Interacting system started from (1 - eps) mu_N + eps nu_N on 2N weighted particles.

    Particle j of the mu block and particle j of the nu block share stream j,
    so runs at different eps differ only through the weights.  With eps = 0
    the mu block reproduces :func:`solve_mkv` on mu_N bitwise.  When nu is mu
    the mixture is mu itself and the run is the eps = 0 run for every eps.
    """
    n = cfg.n_particles
    plain = cfg.replace(antithetic=False)
    xm = initial_atoms(mu, plain, ROLE_MU)
    if same_measure(mu, nu):
        xn, eps = xm, 0.0
    else:
        xn = initial_atoms(nu, plain, ROLE_NU)
    w = np.concatenate([np.full(n, (1.0 - eps) / n), np.full(n, eps / n)])
    streams = np.concatenate([np.arange(n), np.arange(n)])
    return simulate_weighted(model, np.vstack([xm, xn]), w, streams, plain)


def solve_decoupled(model: ModelSpec, flow: MeasureFlow, init: EmpiricalMeasure, cfg: SimConfig,
                    paired: Optional[PathEnsemble] = None, resample: Optional[bool] = None,
                    role: int = ROLE_NU, stream_offset: int = 0) -> PathEnsemble:
    """Particles driven by a frozen flow.

    With ``paired`` the donor's increments for particles 0..N-1 are reused
    (common random numbers); otherwise fresh streams shifted by
    ``stream_offset`` are drawn.
    """
    if flow.grid != cfg.grid:
        raise GridMismatchError("flow grid differs from the configured grid")
    x0 = initial_atoms(init, cfg, role, resample)
    n = cfg.n_particles
    if paired is not None:
        if paired.n < n or paired.grid != cfg.grid:
            raise ShapeMismatchError("paired ensemble is too small or on another grid")
        noise = (paired.dW[:n], paired.dB[:n])
        streams, signs = paired.streams[:n], paired.signs[:n]
    else:
        streams, signs = particle_streams(cfg)
        streams = streams + stream_offset
        noise = None
    return simulate_weighted(model, x0, np.full(n, 1.0 / n), streams, cfg, signs, flow, noise)


@dataclass
class PicardDiagnostics:
    residuals: list[float]
    converged: bool
    theta: float

    @property
    def iterations(self) -> int:
        return len(self.residuals)


def picard_flow(model: ModelSpec, init: EmpiricalMeasure, cfg: SimConfig, theta: float = 0.0,
                tol: float = 1e-10, max_iter: int = 50, k: Optional[float] = None
                ) -> tuple[MeasureFlow, PicardDiagnostics]:
    """Iterate flow -> empirical law of the decoupled system under flow, with frozen noise.

    Starts from the constant flow at the initial law.  The residual of
    iteration n is the weighted distance between iterates n and n - 1.
    """
    k = model.k if k is None else k
    x0 = initial_atoms(init, cfg, ROLE_MU)
    n = cfg.n_particles
    w = np.full(n, 1.0 / n)
    streams, signs = particle_streams(cfg)
    dW, dB = draw_noise(cfg, model.dim, streams, signs)
    flow = MeasureFlow.constant(cfg.grid, EmpiricalMeasure(x0, w))
    residuals: list[float] = []
    for _ in range(max_iter):
        states, measures = euler_paths(model, x0, w, dW, dB, cfg.grid, flow)
        new = MeasureFlow(cfg.grid, tuple(EmpiricalMeasure(states[:, m], w)
                                          for m in range(cfg.grid.steps + 1)))
        residuals.append(flow_distance(new, flow, k, theta))
        flow = new
        if residuals[-1] <= tol:
            return flow, PicardDiagnostics(residuals, True, theta)
    return flow, PicardDiagnostics(residuals, False, theta)


@dataclass
class StabilityReport:
    times: np.ndarray
    input_wk: np.ndarray
    input_tv: np.ndarray
    output_wk: np.ndarray
    output_tv: np.ndarray

    @property
    def ratios(self) -> np.ndarray:
        inp = self.input_wk + self.input_tv
        out = self.output_wk + self.output_tv
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(inp > 0, out / inp, 0.0)


def stability_probe(model: ModelSpec, flow1: MeasureFlow, flow2: MeasureFlow,
                    init: EmpiricalMeasure, cfg: SimConfig, k: Optional[float] = None
                    ) -> StabilityReport:
    """Distances between decoupled laws under two flows, same noise, per node."""
    if flow1.grid != cfg.grid or flow2.grid != cfg.grid:
        raise GridMismatchError("flows must live on the configured grid")
    k = model.k if k is None else k
    a = solve_decoupled(model, flow1, init, cfg, role=ROLE_MU)
    b = solve_decoupled(model, flow2, init, cfg, paired=a, role=ROLE_MU)
    rows = []
    for m in range(cfg.grid.steps + 1):
        f1, f2 = flow1.at(m), flow2.at(m)
        o1, o2 = a.measure_at(m), b.measure_at(m)
        rows.append((wk_distance(f1, f2, k), weighted_tv_estimate(f1, f2, k),
                     wk_distance(o1, o2, k), weighted_tv_estimate(o1, o2, k)))
    r = np.array(rows)
    return StabilityReport(cfg.grid.times.copy(), r[:, 0], r[:, 1], r[:, 2], r[:, 3])


@dataclass
class StabilityLadder:
    shifts: np.ndarray
    output_wk_T: np.ndarray
    slope: float
    passed: bool


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(x, y, 1)[0])


def stability_ladder(model: ModelSpec, flow: MeasureFlow, init: EmpiricalMeasure, cfg: SimConfig,
                     shifts: Sequence[float] = (0.2, 0.1, 0.05), k: Optional[float] = None,
                     min_slope: float = 0.8) -> StabilityLadder:
    """Output distance at T against shrinking mean shifts of the input flow."""
    out = []
    for h in shifts:
        rep = stability_probe(model, flow, flow.shifted(h), init, cfg, k)
        out.append(rep.output_wk[-1])
    out = np.array(out)
    slope = loglog_slope(shifts, out)
    return StabilityLadder(np.asarray(shifts, float), out, slope, bool(slope >= min_slope))


@dataclass
class MomentReport:
    p: float
    moments: np.ndarray
    c: float
    c_pathwise: float


def moment_check(ens: PathEnsemble, p: float) -> MomentReport:
    """Fitted constant in sup_m (1 + E|X_m|^p) <= c (1 + E|X_0|^p).

    ``c_pathwise`` uses E[sup_m |X_m|^p] instead, the stronger pathwise form.
    """
    if p < 1:
        raise ValueError("p must be ≥ 1")
    norms = np.linalg.norm(ens.states, axis=2) ** p
    moments = np.array([weighted_sum(norms[:, m], ens.weights) for m in range(norms.shape[1])])
    base = 1.0 + moments[0]
    c = float((1.0 + moments.max()) / base)
    c_path = float((1.0 + weighted_sum(norms.max(axis=1), ens.weights)) / base)
    return MomentReport(p, moments, c, c_path)


def closed_form_ou_mean(a: float, beta: float, m0, t):
    """Mean of the mean-field OU law: exp((beta - a) t) m0."""
    return np.exp((beta - a) * np.asarray(t)) * np.asarray(m0)


def closed_form_ou_decoupled_mean(a: float, beta: float, m_mu, m_nu, t):
    """Mean at t of the decoupled OU started from nu under the mu-flow.

    Solves m' = -a m + beta exp((beta - a) t) m_mu with m(0) = m_nu.
    """
    t = np.asarray(t, dtype=float)
    if beta == 0:
        return np.exp(-a * t) * m_nu
    return np.exp(-a * t) * m_nu + m_mu * np.exp(-a * t) * (np.exp(beta * t) - 1.0)


def ensemble_stderr(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1) / math.sqrt(values.shape[0]))
