import math

import numpy as np
import pytest

from mkv_bismut import measures as M
from mkv_bismut.errors import EpsListInvalidError
from mkv_bismut.models import const_noise_generic, mean_field_ou, tanh_moment_noise
from mkv_bismut.oracle import (
    eta_eps_convergence,
    fd_derivative,
    girsanov_identity_check,
    perturbation_lipschitz,
    validate_eps_list,
)
from mkv_bismut.sim import SimConfig

GRID = M.TimeGrid(1.0, 16)
MU = M.from_samples(0.5 * np.random.default_rng(2024).standard_normal((2000, 1)))
NU = M.EmpiricalMeasure.dirac([1.0])
X = lambda p: p[:, 0]
EPS = [0.2, 0.1, 0.05]


def test_eps_list_validation():
    validate_eps_list(EPS)
    for bad in ([0.1], [0.1, 0.2], [1.0, 0.5], [0.2, 0.0]):
        with pytest.raises(EpsListInvalidError):
            validate_eps_list(bad)


# ---- finite differences -------------------------------------------------------

def test_fd_null_direction_is_zero():
    rep = fd_derivative(tanh_moment_noise(), X, MU, MU, 1.0, EPS, SimConfig(200, GRID, seed=1))
    assert np.all(rep.raw == 0) and rep.value == 0.0


def test_fd_linear_model_is_eps_independent_and_matches_mean_ode():
    a, beta, M_ = 1.0, 0.5, 64
    cfg = SimConfig(50, M.TimeGrid(1.0, M_), seed=2)
    rep = fd_derivative(mean_field_ou(a=a, beta=beta), X, M.EmpiricalMeasure.dirac([0.0]), NU, 1.0,
                        EPS, cfg)
    np.testing.assert_allclose(rep.raw, rep.raw[0], rtol=1e-10)
    assert rep.value == pytest.approx((1 + (beta - a) / M_) ** M_, rel=1e-10)
    assert abs(rep.value - math.exp(-0.5)) <= 4 / M_


def test_fd_tanh_ladder_is_self_consistent():
    cfg = SimConfig(1000, GRID, seed=3)
    model = tanh_moment_noise()
    a = fd_derivative(model, X, MU, NU, 1.0, [0.2, 0.1], cfg)
    b = fd_derivative(model, X, MU, NU, 1.0, [0.2, 0.1, 0.05, 0.025], cfg)
    se = np.std(a.contributions - b.contributions, ddof=1) / math.sqrt(cfg.n_particles)
    assert abs(a.value - b.value) <= 3 * se + 1e-12


# ---- girsanov -----------------------------------------------------------------

def test_girsanov_zero_eps_is_trivial():
    rep = girsanov_identity_check(mean_field_ou(), MU, NU, 0.0, 1.0, SimConfig(200, GRID, seed=4))
    assert np.all(rep.run.R == 1.0) and np.all(rep.gap == 0.0) and np.all(rep.run.phi == 0.0)


@pytest.mark.parametrize("model", [mean_field_ou(), tanh_moment_noise()], ids=lambda m: m.name)
def test_girsanov_identity_and_density(model):
    cfg = SimConfig(3000, M.TimeGrid(1.0, 32), seed=5)
    rep = girsanov_identity_check(model, MU, NU, 0.1, 1.0, cfg)
    assert rep.gaps_within(3.0) and rep.r_within(3.0)
    assert abs(rep.log_R_mean + 0.5 * rep.log_R_var) <= 3 * rep.log_R_mean_stderr
    assert rep.y_terminal_gap <= 10 * cfg.grid.dt
    assert not rep.weight_degenerate


def test_girsanov_identity_holds_on_coarse_and_fine_grids():
    model = tanh_moment_noise()
    for steps in (16, 128):
        rep = girsanov_identity_check(model, MU, NU, 0.2, 1.0, SimConfig(2000, M.TimeGrid(1.0, steps), seed=7))
        assert rep.gaps_within(3.0)


def test_girsanov_flags_weight_degeneracy():
    model = mean_field_ou(lam=0.02)
    rep = girsanov_identity_check(model, MU, M.EmpiricalMeasure.dirac([8.0]), 0.9, 1.0,
                                  SimConfig(500, GRID, seed=7))
    assert rep.weight_degenerate and rep.n_eff < 50


# ---- perturbation -------------------------------------------------------------

def test_perturbation_null_direction():
    rep = perturbation_lipschitz(tanh_moment_noise(), MU, MU, MU, 1.0, EPS, SimConfig(200, GRID, seed=8))
    assert np.all(rep.distances == 0)


@pytest.mark.parametrize("model,lo,hi", [(mean_field_ou(), 0.8, 1.2), (tanh_moment_noise(), 0.8, np.inf)],
                         ids=["ou", "tanh"])
def test_perturbation_slope(model, lo, hi):
    rep = perturbation_lipschitz(model, MU, NU, MU, 1.0, EPS, SimConfig(500, GRID, seed=9))
    assert lo <= rep.slope <= hi and rep.passed


# ---- eta^eps ------------------------------------------------------------------

def test_eta_eps_null_direction():
    rep = eta_eps_convergence(tanh_moment_noise(), MU, MU, 0.5, EPS, SimConfig(100, GRID, seed=10))
    assert np.all(rep.rms == 0) and rep.passed


def test_eta_eps_linear_model_quotient_is_eps_independent():
    rep = eta_eps_convergence(mean_field_ou(), MU, NU, 0.5, EPS, SimConfig(200, GRID, seed=11))
    np.testing.assert_allclose(rep.rms, rep.rms[0], rtol=1e-8)
    assert rep.rms[0] > 0 and math.isfinite(rep.eta_norm)


def test_eta_eps_constant_noise_reports_ladder():
    rep = eta_eps_convergence(const_noise_generic(), MU, NU, 0.5, EPS, SimConfig(200, GRID, seed=12))
    assert rep.rms.shape == (3,) and np.all(np.isfinite(rep.rms)) and np.all(rep.rms_stderr >= 0)
