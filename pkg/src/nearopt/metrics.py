"""Distances on admissible controls.

``d1`` is the ``P x dt`` measure of the set where two regular controls
differ, ``d2`` the root-mean-square sup distance between singular paths,
and ``weighted_d1`` the adjoint-weighted L1 distance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import ControlPair, RegularControl, SingularControl

__all__ = ["WeightEnsemble", "d1", "d2", "d", "weighted_d1", "l1_distance"]


def _broadcast_pair(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"{what} shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0]):
        raise ValueError(f"{what} path counts differ: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def d1(u: RegularControl, v: RegularControl) -> float:
    """Path-averaged time measure of ``{u != v}``; equality is bitwise."""
    if u.grid != v.grid:
        raise ValueError("controls live on different grids")
    a, b = _broadcast_pair(u.values, v.values, "regular control")
    differs = np.any(a != b, axis=-1)  # (P, N)
    return float(np.mean(differs.sum(axis=1) * u.grid.dt))


def d2(eta: SingularControl, xi: SingularControl) -> float:
    """``sqrt(E max_i |eta_i - xi_i|^2)`` over the grid nodes."""
    if eta.grid != xi.grid:
        raise ValueError("controls live on different grids")
    a, b = _broadcast_pair(eta.increments, xi.increments, "singular control")
    diff = a - b
    path = np.zeros((diff.shape[0], diff.shape[1] + 1, diff.shape[2]))
    np.cumsum(diff, axis=1, out=path[:, 1:])
    sup = np.linalg.norm(path, axis=-1).max(axis=1)
    return float(np.sqrt(np.mean(sup**2)))


def d(pair_a: ControlPair, pair_b: ControlPair) -> float:
    return d1(pair_a.u, pair_b.u) + d2(pair_a.eta, pair_b.eta)


@dataclass(frozen=True, eq=False)
class WeightEnsemble:
    """Per-cell weights ``1 + |Psi| + |K| + |Q| + |R|`` (Frobenius norms), shape ``(P, N)``."""

    values: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.values, dtype=float)
        if w.ndim != 2:
            raise ValueError(f"weights must have shape (P, N), got {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 1.0):
            raise ValueError("corrupt weight ensemble: every weight must be finite and >= 1")
        object.__setattr__(self, "values", w)

    @classmethod
    def from_adjoints(cls, adjoints) -> "WeightEnsemble":
        first, second = adjoints.first, adjoints.second
        N = first.K.shape[1]

        def norm(a):
            return np.linalg.norm(a.reshape(a.shape[0], a.shape[1], -1), axis=-1)

        w = 1.0 + norm(first.psi[:, :N]) + norm(first.K) + norm(second.Q[:, :N]) + norm(second.R)
        return cls(w)


def weighted_d1(u: RegularControl, v: RegularControl, weights: WeightEnsemble) -> float:
    """``E sum_i dt * w_i * |u_i - v_i|``."""
    if u.grid != v.grid:
        raise ValueError("controls live on different grids")
    a, b = _broadcast_pair(u.values, v.values, "regular control")
    w = weights.values
    if w.shape[1] != u.grid.n_steps:
        raise ValueError(f"weights cover {w.shape[1]} cells, grid has {u.grid.n_steps}")
    gap = np.linalg.norm(a - b, axis=-1)  # (P', N)
    return float(np.mean((w * gap).sum(axis=1) * u.grid.dt))


def l1_distance(u: RegularControl, v: RegularControl) -> float:
    """Unweighted ``E int |u - v| dt``."""
    a, b = _broadcast_pair(u.values, v.values, "regular control")
    return float(np.mean(np.linalg.norm(a - b, axis=-1).sum(axis=1) * u.grid.dt))
