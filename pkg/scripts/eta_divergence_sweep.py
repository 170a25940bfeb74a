"""Picard residual histories for the eta equation at small lambda across grids.

    python3 scripts/eta_divergence_sweep.py

For each (T, M) the eta solve runs at lambda = 0.05 with terminal node
t = 0.0625 and prints the residual sequence and whether the
divergence detector fired.
"""

import numpy as np

from mkv_bismut import measures as M
from mkv_bismut.errors import DivergedError
from mkv_bismut.eta import EtaConfig, solve_eta
from mkv_bismut.models import mean_field_ou, tanh_moment_noise
from mkv_bismut.sim import ROLE_NU, SimConfig, solve_decoupled, solve_mkv

MU = M.from_samples(0.5 * np.random.default_rng(2024).standard_normal((2000, 1)))
NU = M.EmpiricalMeasure.dirac([1.0])


def main():
    for model in (mean_field_ou(lam=0.05), tanh_moment_noise(lam=0.05)):
        for T, steps in ((1.0, 16), (1.0, 64), (0.0625, 4), (0.0625, 16), (0.0625, 64)):
            grid = M.TimeGrid(T, steps)
            cfg = SimConfig(1000, grid, seed=17)
            mkv, flow = solve_mkv(model, MU, cfg)
            nu_dec = solve_decoupled(model, flow, NU, cfg, paired=mkv, role=ROLE_NU)
            m = grid.node(0.0625)
            try:
                _, diag = solve_eta(model, mkv, nu_dec, m, EtaConfig(tol=1e-6, max_iter=30, raise_on_max_iter=False))
                fired = False
            except DivergedError as exc:
                diag, fired = exc.diagnostics, True
            res = " ".join(f"{r:.1e}" for r in diag.residuals)
            print(f"{model.name:18s} T={T:<7g} M={steps:<3d} m={m:<3d} fired={fired!s:5s} residuals {res}")


if __name__ == "__main__":
    main()
