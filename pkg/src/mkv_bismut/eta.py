"""Fixed-point solver for the Malliavin weight field eta and its epsilon-construction.

For a base ensemble X (samples of the mu-system) and a direction ensemble
(samples of nu transported under the mu-flow), the field eta[i, m, l] with
terminal node m and start node l < m solves

    eta[i][m][l] = J[i][l] + Jb(X^i_l) (H[i][l] - (t_l / t_m) H[i][m]) + H[i][m] / t_m

where J and H depend on eta through the Ito integrals
I[i][m] = sum_{l<m} <eta[i][m][l], dW^i_l> / lam:

    J[i][l] = sum_j v_j deb(X^i_l)(Y_j) - sum_j w_j deb(X^i_l)(X^j_l)
              + sum_{j != i} w_j deb(X^i_l)(X^j_l) I[j][l] / (1 - w_i)
    G[r]    = sum_j v_j desigma(Y_j) - sum_j w_j desigma(X^j_r) + sum_j w_j desigma(X^j_r) I[j][r]
    H[i][m] = sum_{r<m} G[r] dB^i_r

with w the base weights and v the direction weights.  The map is strictly
causal in the terminal index (terminal m only reads integrals with terminal
r < m), so Picard iteration terminates in at most M sweeps.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import parallel
from .errors import (
    DivergedError,
    EpsilonOutOfRangeError,
    GridMismatchError,
    LambdaZeroError,
    MaxIterExceededError,
    NodeOutOfRangeError,
    ShapeMismatchError,
)
from .measures import EmpiricalMeasure, TimeGrid, weighted_sum
from .models import ModelSpec, contract_deb, jac_b_eval
from .sim import PathEnsemble, SimConfig, solve_mixture

MAGIC_ETA = b"MKVETA01"


@dataclass(frozen=True)
class EtaConfig:
    tol: float = 1e-10
    max_iter: int = 100
    damping: float = 1.0
    n_inner: Optional[int] = None  # subsample size for the inner expectation in J
    inner_seed: int = 0
    raise_on_max_iter: bool = True
    divergence_window: int = 3
    threads: Optional[int] = None

    def __post_init__(self):
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be ≥ 1")


@dataclass(frozen=True, eq=False)
class EtaField:
    """Lower-triangular field; ``values[i, m - 1, l]`` holds eta[i][m][l] for l < m."""

    grid: TimeGrid
    values: np.ndarray  # (N, m_max, m_max, d)
    lam: float

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m_max(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[3]

    def terminal(self, m: int) -> np.ndarray:
        """eta[:, m, :m], shape (N, m, d)."""
        if not (1 <= m <= self.m_max):
            raise NodeOutOfRangeError(f"terminal node {m} outside 1..{self.m_max}")
        return self.values[:, m - 1, :m]

    def norm(self) -> float:
        """max_m dt sum_l mean_i |eta[i][m][l]|^2."""
        sq = np.einsum("imld,imld->ml", self.values, self.values) / self.n
        return float((sq.sum(axis=1) * self.grid.dt).max())

    def to_bytes(self) -> bytes:
        """Header, index table of per-terminal offsets, then the flattened triangle."""
        n, mm, _, d = self.values.shape
        head = MAGIC_ETA + struct.pack("<qqqqdd", n, mm, d, self.grid.steps, self.grid.horizon, self.lam)
        offsets = np.array([n * d * (m * (m - 1) // 2) for m in range(1, mm + 1)], dtype="<i8")
        tri = b"".join(np.ascontiguousarray(self.values[:, m - 1, :m], dtype="<f8").tobytes()
                       for m in range(1, mm + 1))
        return head + offsets.tobytes() + tri

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EtaField":
        if blob[:8] != MAGIC_ETA:
            raise ValueError("not an eta file")
        n, mm, d, steps, horizon, lam = struct.unpack_from("<qqqqdd", blob, 8)
        off = 8 + struct.calcsize("<qqqqdd") + 8 * mm
        values = np.zeros((n, mm, mm, d))
        for m in range(1, mm + 1):
            cnt = n * m * d
            values[:, m - 1, :m] = np.frombuffer(blob, "<f8", cnt, off).reshape(n, m, d)
            off += 8 * cnt
        return cls(TimeGrid(horizon, steps), values, lam)


@dataclass(frozen=True, eq=False)
class ItoIntegrals:
    values: np.ndarray  # (N, m_max + 1), column 0 is zero


@dataclass(frozen=True, eq=False)
class EtaSources:
    J: np.ndarray  # (N, m_max, d)
    G: np.ndarray  # (m_max, d, d)
    H: np.ndarray  # (N, m_max + 1, d)


@dataclass
class EtaDiagnostics:
    residuals: list[float] = field(default_factory=list)
    converged: bool = False
    lam: float = float("nan")
    t_max: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    @property
    def ratios(self) -> list[float]:
        r = self.residuals
        return [r[j] / r[j - 1] if r[j - 1] > 0 else 0.0 for j in range(1, len(r))]

    def to_dict(self) -> dict:
        return {"residuals": self.residuals, "ratios": self.ratios, "converged": self.converged,
                "iterations": self.iterations, "lambda": self.lam, "t_max": self.t_max,
                "lambda2_t": self.lam ** 2 * self.t_max}


def ito_integrals(eta: EtaField, dW: np.ndarray) -> ItoIntegrals:
    """Left-point sums I[i][m] = sum_{l<m} <eta[i][m][l], dW^i_l> / lam."""
    if eta.lam == 0:
        raise LambdaZeroError("lambda must be non-zero")
    n, mm, _, d = eta.values.shape
    if dW.shape[0] != n or dW.shape[1] < mm or dW.shape[2] != d:
        raise ShapeMismatchError("dW does not match the eta field")
    out = np.zeros((n, mm + 1))
    out[:, 1:] = np.einsum("imld,ild->im", eta.values, dW[:, :mm]) / eta.lam
    return ItoIntegrals(out)


class _Context:
    """Eta-independent pieces: Jacobians, pairing sums, kernel diagonals."""

    def __init__(self, model: ModelSpec, base: PathEnsemble, direction: PathEnsemble,
                 m_max: int, cfg: EtaConfig):
        if model.lam == 0:
            raise LambdaZeroError("lambda must be non-zero")
        if base.grid != direction.grid:
            raise GridMismatchError("base and direction ensembles use different grids")
        if base.dim != direction.dim or base.dim != model.dim:
            raise ShapeMismatchError("ensemble dimensions disagree")
        if not (1 <= m_max <= base.grid.steps):
            raise NodeOutOfRangeError(f"terminal node {m_max} outside 1..{base.grid.steps}")
        self.model, self.base, self.m_max, self.cfg = model, base, m_max, cfg
        grid = base.grid
        n, d = base.n, base.dim
        w = base.weights
        v = direction.weights
        self.measures = [base.measure_at(l) for l in range(m_max)]
        self.times = grid.times
        self.Jb = np.empty((n, m_max, d, d))
        self.pairing = np.empty((n, m_max, d))
        self.kdiag = np.empty((n, m_max, d))
        self.G0 = np.empty((m_max, d, d))
        self.dsig = np.empty((m_max, n, d, d))
        # inner subsample for the J feedback term
        if cfg.n_inner is None or cfg.n_inner >= n:
            self.inner = np.arange(n)
        else:
            g = np.random.default_rng(cfg.inner_seed)
            self.inner = np.sort(g.choice(n, size=cfg.n_inner, replace=False))
        wi = w[self.inner]
        self.inner_w = wi / wi.sum()
        self.self_w = np.zeros(n)
        self.self_w[self.inner] = self.inner_w
        for l in range(m_max):
            t, mu = self.times[l], self.measures[l]
            x = base.states[:, l]
            y = direction.states[:, l]
            self.Jb[:, l] = jac_b_eval(model, t, x, mu)
            self.pairing[:, l] = (contract_deb(model, t, x, mu, y, v, cfg.threads)
                                  - contract_deb(model, t, x, mu, x, w, cfg.threads))
            self.kdiag[:, l] = model.deb(t, x, mu, x)
            ds_dir = np.asarray(model.desigma(t, mu, y), dtype=float)
            self.dsig[l] = np.asarray(model.desigma(t, mu, x), dtype=float)
            self.G0[l] = weighted_sum(ds_dir, v) - weighted_sum(self.dsig[l], w)
        self.dB = base.dB[:, :m_max]
        self.dW = base.dW[:, :m_max]

    def sources(self, I: np.ndarray) -> EtaSources:
        model, base = self.model, self.base
        n, d = base.n, base.dim
        w = base.weights
        J = np.empty((n, self.m_max, d))
        G = np.empty((self.m_max, d, d))
        xi = base.states[self.inner]
        for l in range(self.m_max):
            t, mu = self.times[l], self.measures[l]
            c = self.inner_w * I[self.inner, l]
            fb = contract_deb(model, t, base.states[:, l], mu, xi[:, l], c, self.cfg.threads)
            fb = (fb - (self.self_w * I[:, l])[:, None] * self.kdiag[:, l]) / (1.0 - self.self_w)[:, None]
            J[:, l] = self.pairing[:, l] + fb
            G[l] = self.G0[l] + weighted_sum(self.dsig[l], w * I[:, l])
        H = np.zeros((n, self.m_max + 1, d))
        H[:, 1:] = np.cumsum(np.einsum("rab,irb->ira", G, self.dB), axis=1)
        return EtaSources(J, G, H)

    def apply(self, src: EtaSources) -> np.ndarray:
        mm = self.m_max
        t = self.times[: mm + 1]
        H = src.H
        A = src.J + np.einsum("ilab,ilb->ila", self.Jb, H[:, :mm])
        B = np.einsum("ilab,imb->imla", self.Jb, H[:, 1:])
        ratio = t[None, :mm] / t[1:, None]  # [m-1, l] = t_l / t_m
        out = A[:, None] - ratio[None, :, :, None] * B + (H[:, 1:] / t[1:, None])[:, :, None, :]
        mask = np.tril(np.ones((mm, mm), dtype=bool), k=0)  # row m-1 keeps l <= m-1
        out *= mask[None, :, :, None]
        return out


def _rms_residual(delta: np.ndarray) -> float:
    mm = delta.shape[1]
    per_m = np.einsum("imld,imld->m", delta, delta)
    counts = delta.shape[0] * np.arange(1, mm + 1)
    return float(np.sqrt(per_m / counts).max())


def compute_sources(model: ModelSpec, mkv: PathEnsemble, nu_dec: PathEnsemble, eta: EtaField,
                    cfg: EtaConfig = EtaConfig()) -> tuple[EtaSources, ItoIntegrals]:
    """J, G, H for a given field; the mu-flow is the base ensemble's own empirical flow."""
    ctx = _Context(model, mkv, nu_dec, eta.m_max, cfg)
    I = ito_integrals(eta, mkv.dW)
    return ctx.sources(I.values), I


def solve_eta(model: ModelSpec, mkv: PathEnsemble, nu_dec: PathEnsemble,
              m_target: Optional[int] = None, cfg: EtaConfig = EtaConfig(),
              eta0: Optional[np.ndarray] = None) -> tuple[EtaField, EtaDiagnostics]:
    """Picard iteration for eta over terminal nodes 1..m_target (default M)."""
    mm = mkv.grid.steps if m_target is None else m_target
    if model.lam == 0:
        raise LambdaZeroError("lambda must be non-zero")
    ctx = _Context(model, mkv, nu_dec, mm, cfg)
    shape = (mkv.n, mm, mm, mkv.dim)
    if eta0 is None:
        eta = np.zeros(shape)
    else:
        if eta0.shape != shape:
            raise ShapeMismatchError(f"eta0 must have shape {shape}")
        eta = eta0 * np.tril(np.ones((mm, mm)))[None, :, :, None]
    diag = EtaDiagnostics(lam=model.lam, t_max=float(mkv.grid.times[mm]))
    win = cfg.divergence_window
    for _ in range(cfg.max_iter):
        field_ = EtaField(mkv.grid, eta, model.lam)
        I = ito_integrals(field_, ctx.dW)
        new = ctx.apply(ctx.sources(I.values))
        if cfg.damping < 1.0:
            new = (1.0 - cfg.damping) * eta + cfg.damping * new
        res = _rms_residual(new - eta)
        diag.residuals.append(res)
        eta = new
        if not np.all(np.isfinite(eta)):
            raise DivergedError("eta became non-finite", diag)
        if res <= cfg.tol:
            diag.converged = True
            return EtaField(mkv.grid, eta, model.lam), diag
        r = diag.residuals
        if len(r) > win and all(r[-j] > r[-j - 1] for j in range(1, win + 1)):
            raise DivergedError(
                f"residual grew for {win} consecutive iterations "
                f"(lambda={model.lam}, t={diag.t_max}, lambda^2 t={model.lam ** 2 * diag.t_max:g})",
                diag)
    if cfg.raise_on_max_iter:
        raise MaxIterExceededError(f"no convergence in {cfg.max_iter} iterations", diag)
    return EtaField(mkv.grid, eta, model.lam), diag


def noise_integral(model: ModelSpec, ens: PathEnsemble, dB: np.ndarray, upto: int) -> np.ndarray:
    """xi[i, m] = sum_{r<m} sigma(t_r, flow_r) dB^i_r for m = 0..upto."""
    n, d = dB.shape[0], dB.shape[2]
    xi = np.zeros((n, upto + 1, d))
    for r in range(upto):
        sig = np.asarray(model.noise(ens.grid.times[r], ens.measure_at(r)), dtype=float)
        xi[:, r + 1] = xi[:, r] + dB[:, r] @ sig.T
    return xi


def eta_epsilon(model: ModelSpec, mu: EmpiricalMeasure, nu: EmpiricalMeasure, eps: float,
                m_star: int, cfg: SimConfig, base: Optional[PathEnsemble] = None,
                pert: Optional[PathEnsemble] = None) -> np.ndarray:
    """Difference-quotient field (1/eps) phi[i][l], l < m_star, shape (N, m_star, d).

    phi = b(Y, pi_eps flow) - b(X, mu flow) + (xi_pi(t*) - xi_mu(t*)) / t*, where
    Y is the coupled process that meets X at t* and xi_rho = int sigma(rho_r) dB.
    ``base``/``pert`` are mixture runs at eps = 0 and eps; built when omitted.
    """
    if not (0.0 < eps < 1.0):
        raise EpsilonOutOfRangeError(f"eps={eps} outside (0, 1)")
    if not (1 <= m_star <= cfg.grid.steps):
        raise NodeOutOfRangeError(f"m*={m_star} outside 1..{cfg.grid.steps}")
    base = solve_mixture(model, mu, nu, 0.0, cfg) if base is None else base
    pert = solve_mixture(model, mu, nu, eps, cfg) if pert is None else pert
    n = cfg.n_particles
    X = base.states[:n]
    dB = base.dB[:n]
    times = cfg.grid.times
    t_star = times[m_star]
    xi_mu = noise_integral(model, base, dB, m_star)
    xi_pi = noise_integral(model, pert, dB, m_star)
    gap = xi_pi[:, m_star] - xi_mu[:, m_star]
    out = np.empty((n, m_star, model.dim))
    for l in range(m_star):
        t = times[l]
        y = X[:, l] - (t / t_star) * gap + (xi_pi[:, l] - xi_mu[:, l])
        out[:, l] = (model.drift(t, y, pert.measure_at(l)) - model.drift(t, X[:, l], base.measure_at(l))
                     + gap / t_star) / eps
    return out


def eta_rms_gap(eta: EtaField, eta_eps: np.ndarray, m_star: int) -> float:
    """sqrt(mean_{i,l} |eta_eps - eta|^2) at terminal m_star over the first len(eta_eps) particles."""
    ref = eta.terminal(m_star)[: eta_eps.shape[0]]
    return math.sqrt(float(np.mean(np.sum((eta_eps - ref) ** 2, axis=-1))))
