"""Spectral-Galerkin truncation of a semilinear distribution-dependent SPDE.

The state holds the first n coefficients in an eigenbasis of A = diag(-a_1..-a_n).
Steps use the exponential-Euler (mild) form

    X_{m+1} = exp(A dt) (X_m + b(t_m, X_m, mu_m) dt + Q(t_m, X_m) dW_m),

with b = b0 + Q b1.  Derivatives in the measure are obtained by mixture finite
differences, the same protocol as :func:`mkv_bismut.oracle.fd_derivative`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .errors import NonFiniteStateError, ShapeMismatchError
from .measures import EmpiricalMeasure, MeasureFlow, same_measure
from .oracle import FDReport, fd_ladder
from .sim import ROLE_MU, ROLE_NU, PathEnsemble, SimConfig, initial_atoms


@dataclass(frozen=True)
class GalerkinModel:
    modes: int
    a_spectrum: np.ndarray
    b0: Callable  # (t, x) -> x.shape
    b1: Callable  # (t, x, mu) -> x.shape
    Q: Callable  # (t, x) -> x.shape + (n,)
    k: float = 1.0
    name: str = "galerkin"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.a_spectrum, dtype=float)
        if a.shape != (self.modes,) or np.any(a <= 0):
            raise ValueError("a_spectrum needs one strictly positive entry per mode")
        a.setflags(write=False)
        object.__setattr__(self, "a_spectrum", a)

    def drift(self, t, x, mu):
        return self.b0(t, x) + np.einsum("...ab,...b->...a", self.Q(t, x), self.b1(t, x, mu))

    def semigroup(self, dt: float) -> np.ndarray:
        return np.exp(-self.a_spectrum * dt)


def _zeros(t, x, mu=None):
    return np.zeros(np.shape(x))


def pure_semigroup(a_spectrum: Sequence[float]) -> GalerkinModel:
    """b = 0 and Q = 0: every mode decays deterministically."""
    a = np.asarray(a_spectrum, dtype=float)
    n = a.size
    return GalerkinModel(n, a, _zeros, _zeros, lambda t, x: np.zeros(np.shape(x) + (n,)),
                         name="pure_semigroup", params=dict(a_spectrum=a.tolist()))


def mean_field_modes(modes: int = 1, a_spectrum: Optional[Sequence[float]] = None,
                     beta: float = 0.5, decay: float = 0.5, q: float = 1.0) -> GalerkinModel:
    """Mode-1 mean interaction fed into every mode with weights beta decay^(i-1), Q = q I.

    Mode 1 evolves independently of the truncation level, so its mean obeys
    m' = (q beta - a_1) m for every n.
    """
    a = np.arange(1, modes + 1, dtype=float) ** 2 if a_spectrum is None else np.asarray(a_spectrum, float)
    coef = beta * decay ** np.arange(modes)
    eye = q * np.eye(modes)

    def b1(t, x, mu):
        return np.broadcast_to(coef * mu.mean[0], np.shape(x)).copy()

    def Q(t, x):
        return np.broadcast_to(eye, np.shape(x) + (modes,))

    return GalerkinModel(modes, a, _zeros, b1, Q, name="mean_field_modes",
                         params=dict(modes=modes, a_spectrum=a.tolist(), beta=beta, decay=decay, q=q))


def galerkin_paths(gm: GalerkinModel, x0: np.ndarray, weights: np.ndarray, dW: np.ndarray,
                   cfg: SimConfig) -> np.ndarray:
    grid = cfg.grid
    n = x0.shape[0]
    states = np.empty((n, grid.steps + 1, gm.modes))
    states[:, 0] = x0
    decay = gm.semigroup(grid.dt)
    for m in range(grid.steps):
        t = grid.times[m]
        x = states[:, m]
        mu = EmpiricalMeasure(x, weights)
        noise = np.einsum("iab,ib->ia", np.broadcast_to(gm.Q(t, x), (n, gm.modes, gm.modes)), dW[:, m])
        states[:, m + 1] = decay * (x + gm.drift(t, x, mu) * grid.dt + noise)
        if not np.all(np.isfinite(states[:, m + 1])):
            raise NonFiniteStateError(m + 1)
    return states


def simulate_galerkin(gm: GalerkinModel, x0: np.ndarray, weights: np.ndarray, streams: np.ndarray,
                      cfg: SimConfig) -> PathEnsemble:
    if x0.ndim != 2 or x0.shape[1] != gm.modes:
        raise ShapeMismatchError("initial atoms must have one column per mode")
    g = cfg.grid
    dW = rng.increments(cfg.seed, streams, g.steps, gm.modes, g.dt, rng.KIND_W, cfg.noise_substeps)
    states = galerkin_paths(gm, x0, weights, dW, cfg)
    return PathEnsemble(g, states, dW, np.zeros_like(dW), np.asarray(weights, float),
                        np.asarray(streams), cfg.seed)


def solve_galerkin_mkv(gm: GalerkinModel, init: EmpiricalMeasure, cfg: SimConfig
                       ) -> tuple[PathEnsemble, MeasureFlow]:
    if init.dim != gm.modes:
        raise ShapeMismatchError("init dimension must equal the number of modes")
    n = cfg.n_particles
    x0 = initial_atoms(init, cfg, ROLE_MU)
    ens = simulate_galerkin(gm, x0, np.full(n, 1.0 / n), np.arange(n), cfg)
    return ens, ens.flow()


def solve_galerkin_mixture(gm: GalerkinModel, mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                           eps: float, cfg: SimConfig) -> PathEnsemble:
    """2N weighted particles started from (1 - eps) mu_N + eps nu_N, streams shared across blocks."""
    n = cfg.n_particles
    xm = initial_atoms(mu, cfg, ROLE_MU)
    if same_measure(mu, nu):
        xn, eps = xm, 0.0
    else:
        xn = initial_atoms(nu, cfg, ROLE_NU)
    w = np.concatenate([np.full(n, (1.0 - eps) / n), np.full(n, eps / n)])
    return simulate_galerkin(gm, np.vstack([xm, xn]), w, np.concatenate([np.arange(n)] * 2), cfg)


def fd_extrinsic_derivative_spde(gm: GalerkinModel, f: Callable, mu: EmpiricalMeasure,
                                 nu: EmpiricalMeasure, t: float, eps_list: Sequence[float],
                                 cfg: SimConfig) -> FDReport:
    m_star = cfg.grid.node(t)
    return fd_ladder(lambda e: solve_galerkin_mixture(gm, mu, nu, e, cfg), f, m_star, eps_list,
                     cfg.n_particles)
