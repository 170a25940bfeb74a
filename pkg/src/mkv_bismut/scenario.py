"""Scenario files: parsing, validation, measure specs, test functions, config hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ConfigInvalidError
from .eta import EtaConfig
from .measures import EmpiricalMeasure, TimeGrid, mix
from .models import BUILTINS, ModelSpec, build_model
from .sim import SimConfig

TASKS = ("simulate", "derivative", "validate", "convergence")

TEST_FUNCTIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], float]] = {
    # name -> (vectorised f, growth order k with |f| <= c (1 + |x|^k))
    "x": (lambda p: p[:, 0], 1.0),
    "x2": (lambda p: p[:, 0] ** 2, 2.0),
    "cos": (lambda p: np.cos(p[:, 0]), 0.0),
    "sin": (lambda p: np.sin(p[:, 0]), 0.0),
    "tanh": (lambda p: np.tanh(p[:, 0]), 0.0),
    "norm": (lambda p: np.linalg.norm(p, axis=1), 1.0),
}


def test_function(name: str) -> Callable[[np.ndarray], np.ndarray]:
    if name not in TEST_FUNCTIONS:
        raise ConfigInvalidError(f"f must be one of {sorted(TEST_FUNCTIONS)}, got {name!r}")
    return TEST_FUNCTIONS[name][0]


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigInvalidError(message)


def build_measure(spec: dict, dim: int, key: str) -> EmpiricalMeasure:
    """gaussian{mean, sd, n_atoms, seed} | dirac{x} | atoms{points, weights?} | mixture{components, weights}."""
    _require(isinstance(spec, dict) and "type" in spec, f"{key}.type is required")
    kind = spec["type"]
    if kind == "gaussian":
        for f in ("mean", "sd", "n_atoms", "seed"):
            _require(f in spec, f"{key}.{f} is required for a gaussian measure")
        mean = np.broadcast_to(np.asarray(spec["mean"], float), (dim,))
        sd = np.broadcast_to(np.asarray(spec["sd"], float), (dim,))
        _require(int(spec["n_atoms"]) >= 1, f"{key}.n_atoms must be ≥ 1")
        _require(bool(np.all(sd >= 0)), f"{key}.sd must be non-negative")
        g = np.random.default_rng(int(spec["seed"]))
        return EmpiricalMeasure.uniform(mean + sd * g.standard_normal((int(spec["n_atoms"]), dim)))
    if kind == "dirac":
        _require("x" in spec, f"{key}.x is required for a dirac measure")
        x = np.atleast_1d(np.asarray(spec["x"], float))
        _require(x.shape == (dim,), f"{key}.x must have {dim} coordinates")
        return EmpiricalMeasure.dirac(x)
    if kind == "atoms":
        _require("points" in spec, f"{key}.points is required")
        pts = np.asarray(spec["points"], float).reshape(-1, dim)
        _require(pts.shape[0] >= 1, f"{key}.points must not be empty")
        if "weights" in spec:
            return EmpiricalMeasure(pts, np.asarray(spec["weights"], float))
        return EmpiricalMeasure.uniform(pts)
    if kind == "mixture":
        comps = spec.get("components")
        wts = spec.get("weights")
        _require(isinstance(comps, list) and len(comps) == 2, f"{key}.components must list two measures")
        _require(isinstance(wts, list) and len(wts) == 2, f"{key}.weights must list two weights")
        a = build_measure(comps[0], dim, f"{key}.components[0]")
        b = build_measure(comps[1], dim, f"{key}.components[1]")
        _require(abs(sum(wts) - 1.0) < 1e-12, f"{key}.weights must sum to 1")
        return mix(a, b, float(wts[1]))
    raise ConfigInvalidError(f"{key}.type must be gaussian, dirac, atoms or mixture")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(raw: dict) -> str:
    body = {k: v for k, v in raw.items() if k != "output"}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


@dataclass
class Scenario:
    raw: dict
    name: str
    task: str
    model: ModelSpec | None
    mu: EmpiricalMeasure | None
    nu: EmpiricalMeasure | None
    grid: TimeGrid
    n_particles: int
    t_targets: list[float]
    seed: int
    f_name: str
    eta: EtaConfig
    eps: list[float]
    study: dict = field(default_factory=dict)
    checks: list[dict] = field(default_factory=list)
    output: str = "out"

    @property
    def f(self):
        return test_function(self.f_name)

    def sim_config(self, threads: int | None = None, **kw) -> SimConfig:
        base = dict(n_particles=self.n_particles, grid=self.grid, seed=self.seed, threads=threads)
        base.update(kw)
        return SimConfig(**base)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def parse_model(spec: Any, key: str = "model") -> ModelSpec:
    _require(isinstance(spec, dict) and "name" in spec, f"{key}.name is required")
    _require(spec["name"] in BUILTINS, f"{key}.name must be one of {sorted(BUILTINS)}")
    params = spec.get("params", {})
    _require(isinstance(params, dict), f"{key}.params must be an object")
    try:
        model = build_model(spec["name"], params)
    except TypeError as exc:
        raise ConfigInvalidError(f"{key}.params: {exc}") from None
    return model


def parse_grid(spec: Any) -> TimeGrid:
    _require(isinstance(spec, dict), "grid must be an object with T and M")
    _require("M" in spec, "grid.M is required")
    _require("T" in spec, "grid.T is required")
    M, T = spec["M"], spec["T"]
    _require(isinstance(M, int) and not isinstance(M, bool) and M >= 1, "grid.M must be ≥ 1")
    _require(isinstance(T, (int, float)) and T > 0, "grid.T must be > 0")
    return TimeGrid(float(T), M)


def parse_scenario(raw: dict) -> Scenario:
    _require(isinstance(raw, dict), "the scenario must be a JSON object")
    raw = copy.deepcopy(raw)
    task = raw.get("task")
    _require(task in TASKS, f"task must be one of {list(TASKS)}")
    grid = parse_grid(raw.get("grid"))
    N = raw.get("N")
    _require(isinstance(N, int) and not isinstance(N, bool) and N >= 2, "N must be an integer ≥ 2")
    seeds = raw.get("seeds")
    _require(isinstance(seeds, dict) and isinstance(seeds.get("sim"), int), "seeds.sim must be an explicit integer")
    model = parse_model(raw["model"]) if "model" in raw else None
    dim = model.dim if model is not None else raw.get("dim", 1)
    mu = build_measure(raw["mu"], dim, "mu") if "mu" in raw else None
    nu = build_measure(raw["nu"], dim, "nu") if "nu" in raw else None
    t_targets = raw.get("t", [grid.horizon])
    _require(isinstance(t_targets, list) and len(t_targets) >= 1, "t must be a non-empty list")
    for j, t in enumerate(t_targets):
        try:
            m = grid.node(float(t))
        except ValueError:
            raise ConfigInvalidError(f"t[{j}]={t} is not a node of the grid") from None
        _require(m >= 1, f"t[{j}] must be > 0")
    f_name = raw.get("f", "x")
    test_function(f_name)
    eta_raw = raw.get("eta", {})
    _require(isinstance(eta_raw, dict), "eta must be an object")
    try:
        eta = EtaConfig(**eta_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalidError(f"eta: {exc}") from None
    eps = raw.get("eps", [0.2, 0.1, 0.05])
    _require(isinstance(eps, list) and len(eps) >= 2 and all(0 < e < 1 for e in eps)
             and all(a > b for a, b in zip(eps, eps[1:])), "eps must be a decreasing list in (0, 1)")
    if task in ("simulate", "derivative", "convergence"):
        _require(model is not None, "model is required for this task")
        _require(mu is not None, "mu is required for this task")
    if task in ("derivative",):
        _require(nu is not None, "nu is required for the derivative task")
    study = raw.get("study", {})
    if task == "convergence":
        _require(isinstance(study, dict) and study.get("axis") in ("dt", "N", "eps", "lambda"),
                 "study.axis must be one of dt, N, eps, lambda")
    checks = raw.get("checks", [])
    if task == "validate":
        _require(isinstance(checks, list) and len(checks) >= 1, "checks must list at least one check")
        for j, c in enumerate(checks):
            _require(isinstance(c, dict) and "kind" in c, f"checks[{j}].kind is required")
    return Scenario(raw, raw.get("name", "scenario"), task, model, mu, nu, grid, N,
                    [float(t) for t in t_targets], int(seeds["sim"]), f_name, eta, eps, study,
                    checks, raw.get("output", "out"))


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigInvalidError(f"invalid JSON: {exc}") from None
    return parse_scenario(raw)
