"""Counter-based Gaussian noise keyed by (seed, stream, kind).

Every particle owns one Philox stream per noise kind.  Increments for node m
are a fixed block of that stream, so a particle's noise never depends on how
many other particles exist, on the thread count, or on which node is being
computed.  Normals are laid out dimension-major (all steps of coordinate 0,
then coordinate 1, ...), so adding coordinates leaves the leading ones intact.
"""

from __future__ import annotations

import numpy as np

KIND_W = 0  # idiosyncratic noise
KIND_B = 1  # common-coefficient noise
KIND_INIT = 2  # initial resampling
_KINDS = 8
_MASK = (1 << 64) - 1


def philox(seed: int, stream: int, kind: int) -> np.random.Generator:
    key = np.array([seed & _MASK, (stream * _KINDS + kind) & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def increments(seed: int, streams: np.ndarray, steps: int, dim: int, dt: float,
               kind: int, substeps: int = 1, signs: np.ndarray | None = None) -> np.ndarray:
    """Brownian increments of shape (n, steps, dim) over steps of length dt.

    With ``substeps > 1`` each increment is the sum of ``substeps`` finer
    increments, so grids M and M * substeps see the same Brownian path when
    the finest resolution is held fixed.
    """
    streams = np.asarray(streams, dtype=np.int64)
    out = np.empty((streams.size, steps, dim))
    scale = np.sqrt(dt / substeps)
    for row, s in enumerate(streams):
        z = philox(seed, int(s), kind).standard_normal(dim * steps * substeps)
        out[row] = z.reshape(dim, steps, substeps).sum(axis=2).T * scale
    if signs is not None:
        out *= np.asarray(signs, dtype=float)[:, None, None]
    return out


def init_rng(seed: int, role: int = 0) -> np.random.Generator:
    """Generator for seeded resampling of initial measures; role separates mu and nu."""
    return philox(seed, role, KIND_INIT)
