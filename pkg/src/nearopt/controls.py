"""Admissible control representations on a time grid.

Regular controls are piecewise constant on grid cells. Singular controls
are atomic: ``increments[p, i]`` is the mass placed at the left endpoint of
cell ``i``. Both store a leading path axis of length ``n_paths`` or ``1``
(deterministic controls broadcast over the ensemble).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .noise import NoiseEnsemble
from .problem import Box, TimeGrid

__all__ = ["RegularControl", "SingularControl", "ControlPair"]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _rows(out, P: int, m: int) -> np.ndarray:
    # scalar, per-path (P,) when m == 1, or (P, m)
    out = np.asarray(out, dtype=float)
    if out.ndim == 1:
        if m != 1:
            raise ValueError(f"rule returned shape {out.shape}; expected (P, {m})")
        out = out[:, None]
    return np.broadcast_to(out, (P, m))


@dataclass(frozen=True, eq=False)
class RegularControl:
    grid: TimeGrid
    values: np.ndarray  # (P or 1, n_steps, m)
    name: str = "u"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3 or v.shape[1] != self.grid.n_steps:
            raise ValueError(f"control values must have shape (P, {self.grid.n_steps}, m), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("control values must be finite")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def dim_m(self) -> int:
        return self.values.shape[2]

    @property
    def deterministic(self) -> bool:
        return self.values.shape[0] == 1

    def at(self, i: int, n_paths: int) -> np.ndarray:
        """Values on cell ``i`` broadcast to ``(n_paths, m)``."""
        return np.broadcast_to(self.values[:, i], (n_paths, self.dim_m))

    def in_box(self, box: Box) -> bool:
        return box.contains(self.values)

    @classmethod
    def constant(cls, grid: TimeGrid, value, box: Optional[Box] = None, name: Optional[str] = None):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        if box is not None:
            value = box.project(value)
        vals = np.broadcast_to(value, (1, grid.n_steps, value.size))
        return cls(grid, vals, name or f"const({','.join(f'{v:g}' for v in value)})")

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[float], np.ndarray], box: Optional[Box] = None,
                      name: str = "u"):
        """Deterministic open-loop control ``u(t_i) = fn(t_i)``."""
        vals = np.stack([np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in grid.nodes[:-1]])
        if box is not None:
            vals = box.project(vals)
        return cls(grid, vals[None], name)

    @classmethod
    def adapted(cls, noise: NoiseEnsemble, rule: Callable[[int, float, np.ndarray], np.ndarray],
                box: Box, name: str = "u"):
        """Build ``u_i = rule(i, t_i, W[:, :i+1])`` and project onto ``box``.

        The rule only ever sees the Brownian path up to the current node, so
        the result is adapted by construction.
        """
        grid = noise.grid
        W = noise.W
        vals = np.empty((noise.n_paths, grid.n_steps, box.dim))
        for i, t in enumerate(grid.nodes[:-1]):
            out = rule(i, float(t), W[:, : i + 1])
            vals[:, i] = box.project(_rows(out, noise.n_paths, box.dim))
        return cls(grid, vals, name)

    def with_values(self, values, name: Optional[str] = None) -> "RegularControl":
        return RegularControl(self.grid, values, name or self.name)


@dataclass(frozen=True, eq=False)
class SingularControl:
    grid: TimeGrid
    increments: np.ndarray  # (P or 1, n_steps, m), all >= 0
    name: str = "eta"

    def __post_init__(self):
        d = np.asarray(self.increments, dtype=float)
        if d.ndim != 3 or d.shape[1] != self.grid.n_steps:
            raise ValueError(f"singular increments must have shape (P, {self.grid.n_steps}, m), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("singular increments must be finite")
        if np.any(d < 0):
            raise ValueError("singular increments must be nonnegative (eta is nondecreasing)")
        object.__setattr__(self, "increments", _frozen(d))

    @property
    def dim_m(self) -> int:
        return self.increments.shape[2]

    @property
    def deterministic(self) -> bool:
        return self.increments.shape[0] == 1

    def cumulative(self) -> np.ndarray:
        """Left-continuous path at the nodes: ``eta[:, i] = sum of increments in cells j < i``."""
        P, N, m = self.increments.shape
        out = np.zeros((P, N + 1, m))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def total(self) -> np.ndarray:
        return self.increments.sum(axis=1)

    def within_cap(self, cap) -> bool:
        if cap is None:
            return True
        return bool(np.all(self.total() <= np.asarray(cap) + 1e-12))

    @classmethod
    def zero(cls, grid: TimeGrid, dim_m: int = 1, name: str = "none"):
        return cls(grid, np.zeros((1, grid.n_steps, dim_m)), name)

    @classmethod
    def ramp(cls, grid: TimeGrid, mass=1.0, dim_m: int = 1, name: Optional[str] = None):
        """Mass spread evenly over all cells: ``eta_t`` grows linearly to ``mass`` at ``T``."""
        mass = np.broadcast_to(np.asarray(mass, dtype=float), (dim_m,))
        inc = np.broadcast_to(mass / grid.n_steps, (1, grid.n_steps, dim_m))
        return cls(grid, inc, name or f"ramp({','.join(f'{v:g}' for v in mass)})")

    @classmethod
    def jump(cls, grid: TimeGrid, t0: float, mass=1.0, dim_m: int = 1, name: Optional[str] = None):
        """Single atom of size ``mass`` in the cell containing ``t0``."""
        mass = np.broadcast_to(np.asarray(mass, dtype=float), (dim_m,))
        inc = np.zeros((1, grid.n_steps, dim_m))
        inc[0, grid.cell_of(t0)] = mass
        return cls(grid, inc, name or f"jump({t0:g})")

    @classmethod
    def adapted(cls, noise: NoiseEnsemble, rule: Callable[[int, float, np.ndarray], np.ndarray],
                dim_m: int = 1, name: str = "eta"):
        """Build ``d(eta)_i = max(rule(i, t_i, W[:, :i+1]), 0)`` from the noise prefix."""
        grid = noise.grid
        W = noise.W
        inc = np.empty((noise.n_paths, grid.n_steps, dim_m))
        for i, t in enumerate(grid.nodes[:-1]):
            inc[:, i] = np.maximum(_rows(rule(i, float(t), W[:, : i + 1]), noise.n_paths, dim_m), 0.0)
        return cls(grid, inc, name)


@dataclass(frozen=True, eq=False)
class ControlPair:
    u: RegularControl
    eta: SingularControl
    name: Optional[str] = None

    def __post_init__(self):
        if self.u.grid != self.eta.grid:
            raise ValueError("regular and singular parts must share a time grid")
        if self.u.dim_m != self.eta.dim_m:
            raise ValueError(f"control dimension mismatch: u has {self.u.dim_m}, eta has {self.eta.dim_m}")
        pu, pe = self.u.values.shape[0], self.eta.increments.shape[0]
        if pu != 1 and pe != 1 and pu != pe:
            raise ValueError(f"path counts differ: u has {pu}, eta has {pe}")
        if self.name is None:
            object.__setattr__(self, "name", f"{self.u.name}|{self.eta.name}")

    @property
    def grid(self) -> TimeGrid:
        return self.u.grid

    @property
    def n_paths(self) -> int:
        return max(self.u.values.shape[0], self.eta.increments.shape[0])

    def check_against(self, noise: NoiseEnsemble) -> None:
        if noise.grid != self.grid:
            raise ValueError("control pair and noise ensemble are on different grids")
        for what, P in (("u", self.u.values.shape[0]), ("eta", self.eta.increments.shape[0])):
            if P not in (1, noise.n_paths):
                raise ValueError(f"{what} has {P} paths but the noise ensemble has {noise.n_paths}")
