"""Brownian increments on a time grid.

Each path draws from its own Philox stream keyed by the seed, with the path
index in the top counter word, so any subset of paths can be generated in
any order (or in parallel) and still match the full ensemble bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import TimeGrid

__all__ = ["NoiseEnsemble", "sample_noise", "path_normals"]


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    grid: TimeGrid
    dW: np.ndarray  # (n_paths, n_steps, dim_l)
    seed: int
    antithetic: bool = False

    def __post_init__(self):
        dW = np.asarray(self.dW, dtype=float)
        if dW.ndim != 3 or dW.shape[1] != self.grid.n_steps:
            raise ValueError(f"increments must have shape (paths, {self.grid.n_steps}, l), got {dW.shape}")
        dW.setflags(write=False)
        object.__setattr__(self, "dW", dW)

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def dim_l(self) -> int:
        return self.dW.shape[2]

    @property
    def W(self) -> np.ndarray:
        """Brownian paths at the grid nodes, shape ``(n_paths, n_steps + 1, l)``, ``W_s = 0``."""
        W = np.zeros((self.n_paths, self.grid.n_steps + 1, self.dim_l))
        np.cumsum(self.dW, axis=1, out=W[:, 1:])
        return W

    def prefix(self, i: int) -> np.ndarray:
        """Brownian path values at nodes ``0..i`` (the information available at ``t_i``)."""
        W = np.zeros((self.n_paths, i + 1, self.dim_l))
        if i > 0:
            np.cumsum(self.dW[:, :i], axis=1, out=W[:, 1:])
        return W

    def subset(self, paths) -> "NoiseEnsemble":
        return NoiseEnsemble(self.grid, self.dW[paths], self.seed, antithetic=False)


def path_normals(seed: int, index: int, size: int) -> np.ndarray:
    """Standard normals for one path; depends only on ``(seed, index)``."""
    bitgen = np.random.Philox(key=int(seed) & (2**64 - 1), counter=[0, 0, 0, int(index)])
    return np.random.Generator(bitgen).standard_normal(size)


def sample_noise(grid: TimeGrid, n_paths: int, dim_l: int = 1, seed: int = 0,
                 antithetic: bool = False) -> NoiseEnsemble:
    """Gaussian increments with variance exactly ``grid.dt`` per component.

    With ``antithetic=True`` path ``2k+1`` is the negation of path ``2k``
    (``n_paths`` must then be even).
    """
    if int(n_paths) != n_paths or n_paths < 1:
        raise ValueError(f"n_paths must be a positive integer, got {n_paths}")
    if int(dim_l) != dim_l or dim_l < 1:
        raise ValueError(f"dim_l must be a positive integer, got {dim_l}")
    if antithetic and n_paths % 2:
        raise ValueError("antithetic sampling needs an even number of paths")
    n_paths, dim_l = int(n_paths), int(dim_l)
    size = grid.n_steps * dim_l
    scale = np.sqrt(grid.dt)
    dW = np.empty((n_paths, grid.n_steps, dim_l))
    if antithetic:
        for k in range(n_paths // 2):
            z = path_normals(seed, k, size).reshape(grid.n_steps, dim_l) * scale
            dW[2 * k] = z
            dW[2 * k + 1] = -z
    else:
        for p in range(n_paths):
            dW[p] = path_normals(seed, p, size).reshape(grid.n_steps, dim_l) * scale
    return NoiseEnsemble(grid, dW, int(seed), antithetic=antithetic)
