"""Coefficient specifications, built-in models and numerical derivative checks.

Callback conventions (all vectorised with numpy broadcasting over the
leading axes, last axis = coordinate):

* ``drift(t, x, mu)`` -> same shape as ``x``
* ``noise(t, mu)`` -> (d, d)
* ``jac_b(t, x, mu)`` -> ``x.shape + (d,)``, entry [..., a, b] = d b_a / d x_b
* ``deb(t, x, mu, y)`` -> broadcast shape of x and y; the extrinsic derivative
  of the drift in the measure, evaluated at direction point y, centred so that
  its mu-integral in y vanishes
* ``desigma(t, mu, y)`` -> ``y.shape + (d,)``, same convention for the noise

``deb_contract(t, x, mu, y, c)`` is an optional fast path returning
sum_j c_j deb(t, x_i, mu, y_j) for every row x_i.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import parallel
from .errors import LadderInvalidError
from .measures import (
    EmpiricalMeasure,
    mix,
    weighted_sum,
    weighted_tv_estimate,
    wk_distance,
)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    dim: int
    lam: float
    drift: Callable
    noise: Callable
    deb: Callable
    desigma: Callable
    k: float = 1.0
    jac_b: Optional[Callable] = None
    deb_contract: Optional[Callable] = None
    lipschitz_K: Optional[float] = None
    modulus_alpha: Optional[Callable[[float], float]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("model dimension must be at least 1")
        if not np.isfinite(self.lam):
            raise ValueError("lambda must be finite")

    def with_lambda(self, lam: float) -> "ModelSpec":
        from dataclasses import replace
        return replace(self, lam=float(lam), params={**self.params, "lam": float(lam)})


def _identity_noise(d: int, s: float):
    mat = s * np.eye(d)
    mat.setflags(write=False)
    return mat


def mean_field_ou(a: float = 1.0, beta: float = 0.5, s0: float = 0.3, lam: float = 0.5,
                  dim: int = 1) -> ModelSpec:
    """b = -a x + beta mean(mu), sigma = s0 I."""
    noise_mat = _identity_noise(dim, s0)

    def drift(t, x, mu):
        return -a * x + beta * mu.mean

    def jac_b(t, x, mu):
        return np.broadcast_to(-a * np.eye(dim), np.shape(x) + (dim,)).copy()

    def deb(t, x, mu, y):
        shape = np.broadcast_shapes(np.shape(x), np.shape(y))
        return np.broadcast_to(beta * (y - mu.mean), shape).copy()

    def deb_contract(t, x, mu, y, c):
        s = weighted_sum(y, c) - weighted_sum(np.ones(len(c)), c) * mu.mean
        return np.broadcast_to(beta * s, np.shape(x)).copy()

    def desigma(t, mu, y):
        return np.zeros(np.shape(y) + (dim,))

    return ModelSpec("mean_field_ou", dim, float(lam), drift, lambda t, mu: noise_mat, deb,
                     desigma, k=1.0, jac_b=jac_b, deb_contract=deb_contract,
                     lipschitz_K=max(abs(a), abs(beta), abs(s0)),
                     params=dict(a=a, beta=beta, s0=s0, lam=lam, dim=dim))


def _tanhavg(p):
    return np.tanh(p).mean(axis=-1)


def tanh_moment_noise(a: float = 1.0, beta: float = 0.5, s0: float = 0.3, s1: float = 0.2,
                      lam: float = 0.5, dim: int = 1) -> ModelSpec:
    """Mean-field OU drift with sigma(mu) = (s0 + s1 mu(tanh avg)) I."""
    base = mean_field_ou(a, beta, s0, lam, dim)
    eye = np.eye(dim)

    def noise(t, mu):
        return (s0 + s1 * mu.integrate(_tanhavg)) * eye

    def desigma(t, mu, y):
        c = s1 * (_tanhavg(np.asarray(y, dtype=float)) - mu.integrate(_tanhavg))
        return c[..., None, None] * eye

    return ModelSpec("tanh_moment_noise", dim, float(lam), base.drift, noise, base.deb, desigma,
                     k=1.0, jac_b=base.jac_b, deb_contract=base.deb_contract,
                     lipschitz_K=max(abs(a), abs(beta), abs(s0) + abs(s1)),
                     params=dict(a=a, beta=beta, s0=s0, s1=s1, lam=lam, dim=dim))


def const_noise_generic(drift: Optional[Callable] = None, deb: Optional[Callable] = None,
                        s0: float = 0.3, lam: float = 0.5, dim: int = 1,
                        jac_b: Optional[Callable] = None, a: float = 1.0,
                        beta: float = 0.5) -> ModelSpec:
    """Constant noise s0 I with a user drift.

    Without a user drift the model uses b = -a x + beta mu(tanh), a bounded
    nonlinear interaction.  A user drift without ``deb`` is taken to be
    measure-independent.
    """
    noise_mat = _identity_noise(dim, s0)
    params = dict(s0=s0, lam=lam, dim=dim)
    contract = None
    if drift is None:
        params.update(a=a, beta=beta)

        def drift(t, x, mu):
            return -a * x + beta * mu.integrate(np.tanh)

        def deb(t, x, mu, y):
            shape = np.broadcast_shapes(np.shape(x), np.shape(y))
            return np.broadcast_to(beta * (np.tanh(y) - mu.integrate(np.tanh)), shape).copy()

        def contract(t, x, mu, y, c):
            s = weighted_sum(np.tanh(y), c) - weighted_sum(np.ones(len(c)), c) * mu.integrate(np.tanh)
            return np.broadcast_to(beta * s, np.shape(x)).copy()

        def jac_b(t, x, mu):
            return np.broadcast_to(-a * np.eye(dim), np.shape(x) + (dim,)).copy()
    elif deb is None:
        def deb(t, x, mu, y):
            return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y)))

        def contract(t, x, mu, y, c):
            return np.zeros(np.shape(x))

    return ModelSpec("const_noise", dim, float(lam), drift, lambda t, mu: noise_mat, deb,
                     lambda t, mu, y: np.zeros(np.shape(y) + (dim,)), k=1.0, jac_b=jac_b,
                     deb_contract=contract, params=params)


BUILTINS = {
    "mean_field_ou": mean_field_ou,
    "tanh_moment_noise": tanh_moment_noise,
    "const_noise": const_noise_generic,
}


def build_model(name: str, params: dict[str, Any]) -> ModelSpec:
    if name not in BUILTINS:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(BUILTINS)}")
    return BUILTINS[name](**params)


def contract_deb(model: ModelSpec, t: float, x: np.ndarray, mu: EmpiricalMeasure,
                 y: np.ndarray, c: np.ndarray, threads: int | None = None) -> np.ndarray:
    """sum_j c_j deb(t, x_i, mu, y_j) for each row of x, shape (n, d)."""
    if model.deb_contract is not None:
        return model.deb_contract(t, x, mu, y, c)

    def rows(s):
        return np.einsum("rkd,k->rd", model.deb(t, x[s, None, :], mu, y[None, :, :]), c)

    return parallel.map_rows(rows, x.shape[0], threads)


def jac_b_eval(model: ModelSpec, t: float, x, mu: EmpiricalMeasure,
               force_fd: bool = False) -> np.ndarray:
    """Jacobian of the drift in x; central differences when no analytic one is given.

    Accepts a single point (d,) or a batch (n, d).
    """
    x = np.asarray(x, dtype=float)
    if model.jac_b is not None and not force_fd:
        return np.asarray(model.jac_b(t, x, mu), dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    h = 1e-6 * (1.0 + np.linalg.norm(xb, axis=1))
    out = np.empty(xb.shape + (model.dim,))
    for c in range(model.dim):
        step = np.zeros_like(xb)
        step[:, c] = h
        diff = model.drift(t, xb + step, mu) - model.drift(t, xb - step, mu)
        out[:, :, c] = diff / (2 * h[:, None])
    return out[0] if single else out


@dataclass
class ExtrinsicCheckReport:
    eps: np.ndarray
    fd_values: np.ndarray
    target: np.ndarray
    gaps: np.ndarray
    slopes: np.ndarray
    final_gap: float
    tolerance: float
    passed: bool


def _validate_ladder(eps_ladder) -> np.ndarray:
    eps = np.asarray(eps_ladder, dtype=float)
    if eps.ndim != 1 or eps.size < 1 or np.any(eps <= 0) or np.any(eps >= 1) or np.any(np.diff(eps) >= 0):
        raise LadderInvalidError("eps ladder must be strictly decreasing within (0, 1)")
    return eps


def check_extrinsic_derivative(F: Callable, dF: Callable, mu: EmpiricalMeasure, y,
                               eps_ladder: Sequence[float] = (0.1, 0.05, 0.025, 0.0125),
                               rtol: float = 1e-3, atol: float = 1e-6) -> ExtrinsicCheckReport:
    """Compare a claimed extrinsic derivative with forward differences along mixtures."""
    eps = _validate_ladder(eps_ladder)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    target = np.atleast_1d(np.asarray(dF(mu, y), dtype=float)).ravel()
    base = np.atleast_1d(np.asarray(F(mu), dtype=float)).ravel()
    dirac = EmpiricalMeasure.dirac(y)
    fd = np.array([(np.ravel(F(mix(mu, dirac, e))) - base) / e for e in eps])
    gaps = np.abs(fd - target).max(axis=1)
    tol = rtol * float(np.abs(target).max()) + atol
    with np.errstate(divide="ignore", invalid="ignore"):
        slopes = np.diff(np.log(gaps)) / np.diff(np.log(eps))
    if np.all(gaps <= tol):
        passed = True  # exact up to rounding, order is meaningless
    else:
        finite = slopes[np.isfinite(slopes)]
        passed = bool(gaps[-1] <= tol and finite.size > 0 and finite.min() >= 0.9)
    return ExtrinsicCheckReport(eps, fd, target, gaps, slopes, float(gaps[-1]), tol, passed)


@dataclass
class H1Report:
    b_in_x: float
    b_in_var: float
    sigma_in_wk: float
    trials: int
    lipschitz_K: Optional[float]
    within_K: Optional[bool]
    note: str = "sampled ratios; the TV and sliced distances are lower bounds, so ratios may overstate"


def default_sampler(dim: int, n_atoms: int = 64):
    def sample(rng: np.random.Generator):
        mu = EmpiricalMeasure.uniform(rng.normal(rng.normal(), 1.0, (n_atoms, dim)))
        nu = EmpiricalMeasure.uniform(rng.normal(rng.normal(), 1.0 + rng.random(), (n_atoms, dim)))
        x, y = rng.normal(0, 2, dim), rng.normal(0, 2, dim)
        return mu, nu, x, y, float(rng.random())
    return sample


def probe_h1(model: ModelSpec, sampler=None, trials: int = 50, seed: int = 0) -> H1Report:
    """Largest sampled Lipschitz ratios of the coefficients."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    sampler = default_sampler(model.dim) if sampler is None else sampler
    rng = np.random.default_rng(seed)
    rx = rv = rs = 0.0
    for _ in range(trials):
        mu, nu, x, y, t = sampler(rng)
        dx = np.linalg.norm(x - y)
        if dx > 0:
            bx = model.drift(t, x[None], mu) - model.drift(t, y[None], mu)
            rx = max(rx, float(np.linalg.norm(bx)) / dx)
        tv = weighted_tv_estimate(mu, nu, model.k)
        if tv > 0:
            bv = model.drift(t, x[None], mu) - model.drift(t, x[None], nu)
            rv = max(rv, float(np.linalg.norm(bv)) / tv)
        wk = wk_distance(mu, nu, model.k)
        if wk > 0:
            ds = np.asarray(model.noise(t, mu)) - np.asarray(model.noise(t, nu))
            rs = max(rs, float(np.linalg.norm(ds, 2)) / wk)
    K = model.lipschitz_K
    within = None if K is None else bool(max(rx, rs) <= K * (1 + 1e-9))
    return H1Report(rx, rv, rs, trials, K, within)
