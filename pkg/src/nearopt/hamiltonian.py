"""Hamiltonian, the second-order corrected functional and Clarke intervals.

Sign and contraction conventions: ``H = -p.f - q:sigma - ell`` with
``q:sigma = sum_ij q_ij sigma_ij``.  The corrected functional along a
reference pair ``(x^e, u^e)`` with adjoints ``(Psi, K, Q)`` is

    scrH(t, u) = H(t, x^e, u, Psi, K - Q sigma(t, x^e, u^e))
                 - 1/2 sum_j sigma_.j(t, x^e, u)^T Q sigma_.j(t, x^e, u)

so ``u`` enters the quadratic term but the reference control sits in the
``q`` slot. Differentiating the difference ``scrH(u) - scrH(u^e)`` then
recovers ``-1/2 (sigma(u) - sigma(u^e))^T Q (sigma(u) - sigma(u^e))`` plus
the first-order part, which is the spike-variation integrand.

All evaluators are vectorised over a leading path axis; passing unbatched
``x`` of shape ``(n,)`` returns a float.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .problem import ProblemSpec

__all__ = [
    "hamiltonian",
    "HamiltonianFrame",
    "script_H",
    "GradientInterval",
    "clarke_interval",
    "clarke_box",
    "tilde_H",
    "tilde_H_interval",
    "concavity_defect",
]


def _batched(a, ndim: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=float)
    if a.ndim == ndim - 1:
        return a[None], True
    return a, False


def hamiltonian(t: float, x, u, p, q, problem: ProblemSpec):
    """``-p.f(t,x,u) - q:sigma(t,x,u) - ell(t,x,u)``.

    ``x`` is ``(P, n)``, ``u`` ``(P, m)``, ``p`` ``(P, n)``, ``q`` ``(P, n, l)``;
    drop the leading axis everywhere for a single point.
    """
    x, single = _batched(x, 2)
    P = x.shape[0]
    u = np.broadcast_to(np.asarray(u, dtype=float).reshape(-1, problem.dim_m) if np.ndim(u) <= 1
                        else np.asarray(u, dtype=float), (P, problem.dim_m))
    p = np.broadcast_to(np.asarray(p, dtype=float), (P, problem.dim_n))
    q = np.asarray(q, dtype=float)
    if q.shape[-2:] != (problem.dim_n, problem.dim_l):
        raise ValueError(f"q must end in shape ({problem.dim_n}, {problem.dim_l}), got {q.shape}")
    q = np.broadcast_to(q, (P, problem.dim_n, problem.dim_l))
    if x.shape[1] != problem.dim_n:
        raise ValueError(f"x has dimension {x.shape[1]}, problem expects {problem.dim_n}")
    f = np.asarray(problem.f(t, x, u), dtype=float)
    s = np.asarray(problem.sigma(t, x, u), dtype=float)
    ell = np.asarray(problem.ell(t, x, u), dtype=float)
    out = -(p * f).sum(axis=1) - (q * s).sum(axis=(1, 2)) - ell
    return float(out[0]) if single else out


@dataclass(frozen=True, eq=False)
class HamiltonianFrame:
    """Adjoint values and the reference point at one node, batched over paths."""

    t: float
    x: np.ndarray  # (P, n)
    u_ref: np.ndarray  # (P, m)
    psi: np.ndarray  # (P, n)
    K: np.ndarray  # (P, n, l)
    Q: np.ndarray  # (P, n, n)

    # unbatched rank of each field; a frame built from single-point data gets P = 1
    _RANK = {"x": 1, "u_ref": 1, "psi": 1, "K": 2, "Q": 2}

    def __post_init__(self):
        single = np.ndim(self.x) == 1
        vals = {}
        for name, rank in self._RANK.items():
            a = np.asarray(getattr(self, name), dtype=float)
            if single:
                a = a[None]
            if a.ndim != rank + 1:
                raise ValueError(f"frame field {name} has shape {a.shape}, expected rank {rank + 1}")
            vals[name] = a
        P, n = vals["x"].shape
        expect = {"psi": (n,), "K": (n, None), "Q": (n, n)}
        for name, tail in expect.items():
            got = vals[name].shape[1:]
            if any(e is not None and e != g for e, g in zip(tail, got)):
                raise ValueError(f"frame field {name} has shape {vals[name].shape}, state dimension is {n}")
        for name, a in vals.items():
            object.__setattr__(self, name, np.broadcast_to(a, (P,) + a.shape[1:]))

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    def path(self, p: int) -> "HamiltonianFrame":
        sl = slice(p, p + 1)
        return HamiltonianFrame(self.t, self.x[sl], self.u_ref[sl], self.psi[sl], self.K[sl], self.Q[sl])

    @classmethod
    def from_adjoints(cls, sol, i: int, paths=None) -> "HamiltonianFrame":
        """Frame at cell ``i`` of an adjoint solution along its own reference pair."""
        N = sol.grid.n_steps
        if not 0 <= i < N:
            raise IndexError(f"cell index {i} outside 0..{N - 1}")
        P = sol.states.n_paths
        sel = slice(None) if paths is None else paths
        u = sol.states.pair.u.at(i, P)
        return cls(
            t=float(sol.grid.nodes[i]),
            x=sol.states.x[sel, i],
            u_ref=np.asarray(u)[sel],
            psi=sol.first.psi[sel, i],
            K=sol.first.K[sel, i],
            Q=sol.second.Q[sel, i],
        )


def _bmm(a, b):
    # batched small-matrix product; beats matmul when the batch is huge and matrices are tiny
    return (a[:, :, :, None] * b[:, None, :, :]).sum(axis=2)


def script_H(t: float, u, frame: HamiltonianFrame, problem: ProblemSpec) -> np.ndarray:
    """Corrected functional at control ``u`` (``(m,)`` or ``(P, m)``); returns ``(P,)``."""
    P = frame.n_paths
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (problem.dim_m,) and not (u.ndim == 0 and problem.dim_m == 1):
        raise ValueError(f"control has shape {u.shape}, problem expects trailing dimension {problem.dim_m}")
    u = np.broadcast_to(u.reshape(-1, problem.dim_m), (P, problem.dim_m))
    s_ref = np.asarray(problem.sigma(t, frame.x, frame.u_ref), dtype=float)
    s_u = np.asarray(problem.sigma(t, frame.x, u), dtype=float)
    q = frame.K - _bmm(frame.Q, s_ref)
    corr = 0.5 * (s_u * _bmm(frame.Q, s_u)).sum(axis=(1, 2))
    return hamiltonian(t, frame.x, u, frame.psi, q, problem) - corr


@dataclass(frozen=True)
class GradientInterval:
    """Componentwise box ``[lower, upper]`` standing in for a Clarke gradient set."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("interval bounds must have the same shape")
        if np.any(lo > hi):
            raise ValueError(f"interval lower bound exceeds upper bound: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def is_singleton(self) -> bool:
        return bool(np.all(self.lower == self.upper))

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, v, atol: float = 0.0) -> bool:
        v = np.broadcast_to(np.asarray(v, dtype=float), self.lower.shape)
        return bool(np.all(v >= self.lower - atol) and np.all(v <= self.upper + atol))

    def contains_interval(self, other: "GradientInterval", atol: float = 0.0) -> bool:
        return bool(np.all(other.lower >= self.lower - atol) and np.all(other.upper <= self.upper + atol))

    def __add__(self, other: "GradientInterval") -> "GradientInterval":
        return GradientInterval(self.lower + other.lower, self.upper + other.upper)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


def clarke_interval(fn: Callable[[float], float], x: float, half_width_hint: Optional[float] = None,
                    n_scales: int = 8, rtol: float = 1e-5) -> GradientInterval:
    """Finite-difference enclosure of the generalized gradient of a scalar function.

    One-sided quotients are taken at ``n_scales`` halvings of the base scale
    (default ``1e-6 (1 + |x|)``). If they agree to ``rtol`` the point is
    treated as differentiable and the central difference is returned as a
    singleton; otherwise the hull of all quotients is returned.
    """
    x = float(x)
    h0 = float(half_width_hint) if half_width_hint else 1e-6 * (1.0 + abs(x))
    if not h0 > 0:
        raise ValueError("difference scale must be positive")
    f0 = float(fn(x))
    quots = []
    for k in range(n_scales):
        h = h0 / 2.0**k
        for step in (h, -h):
            xs = x + step
            fs = float(fn(xs))
            if not (np.isfinite(fs) and np.isfinite(f0)):
                raise FloatingPointError(f"non-finite sample of fn near {x}")
            quots.append((fs - f0) / (xs - x))
    q = np.array(quots)
    if q.max() - q.min() <= rtol * (1.0 + np.abs(q).max()):
        xp, xm = x + h0, x - h0
        c = (float(fn(xp)) - float(fn(xm))) / (xp - xm)
        return GradientInterval(c, c)
    return GradientInterval(q.min(), q.max())


def clarke_box(fn: Callable[[np.ndarray], float], x, half_width_hint: Optional[float] = None) -> GradientInterval:
    """Per-component ``clarke_interval`` of a function of a vector argument."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lo, hi = np.empty(x.size), np.empty(x.size)
    for j in range(x.size):
        def partial(s, j=j):
            y = x.copy()
            y[j] = s
            return fn(y)

        iv = clarke_interval(partial, x[j], half_width_hint)
        lo[j], hi[j] = iv.lower[0], iv.upper[0]
    return GradientInterval(lo, hi)


def tilde_H(t: float, u, frame: HamiltonianFrame, problem: ProblemSpec, u_bar, epsilon: float,
            varsigma) -> np.ndarray:
    """``scrH(t, u) - sqrt(eps) * varsigma * |u - u_bar|_1``; returns ``(P,)``."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    P = frame.n_paths
    u_arr = np.broadcast_to(np.asarray(u, dtype=float).reshape(-1, problem.dim_m), (P, problem.dim_m))
    ub = np.broadcast_to(np.asarray(u_bar, dtype=float).reshape(-1, problem.dim_m), (P, problem.dim_m))
    vs = np.broadcast_to(np.asarray(varsigma, dtype=float), (P,))
    if np.any(vs < 1.0):
        raise ValueError("varsigma must be >= 1")
    return script_H(t, u_arr, frame, problem) - np.sqrt(epsilon) * vs * np.abs(u_arr - ub).sum(axis=-1)


def tilde_H_interval(t: float, u, frame: HamiltonianFrame, problem: ProblemSpec, u_bar, epsilon: float,
                     varsigma: float, half_width_hint: Optional[float] = None) -> GradientInterval:
    """Box enclosure of the generalized gradient in ``u`` of ``tilde_H`` on a single-path frame.

    Built by the sum rule: numeric interval of ``scrH`` plus the exact set of
    the penalty, which is ``[-r, r]`` where ``u_j = u_bar_j`` and
    ``-r sign(u_j - u_bar_j)`` elsewhere, with ``r = sqrt(eps) varsigma``.
    """
    if frame.n_paths != 1:
        raise ValueError("interval evaluation needs a single-path frame; use frame.path(p)")
    if varsigma < 1.0:
        raise ValueError("varsigma must be >= 1")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    ub = np.broadcast_to(np.asarray(u_bar, dtype=float), u.shape)
    base = clarke_box(lambda v: float(script_H(t, v, frame, problem)[0]), u, half_width_hint)
    r = np.sqrt(epsilon) * varsigma
    at_centre = u == ub
    s = np.sign(u - ub)
    pen = GradientInterval(np.where(at_centre, -r, -r * s), np.where(at_centre, r, -r * s))
    return base + pen


def concavity_defect(fn: Callable[[np.ndarray], np.ndarray], grid: np.ndarray) -> float:
    """Largest positive second difference of ``fn`` along each axis of a 1-d ``grid``.

    ``fn`` maps an array of grid points to values; 0 means no detected
    violation of concavity.
    """
    grid = np.asarray(grid, dtype=float)
    vals = np.asarray(fn(grid), dtype=float)
    if vals.shape[0] < 3:
        return 0.0
    sec = vals[2:] - 2.0 * vals[1:-1] + vals[:-2]
    return float(max(sec.max(), 0.0))
