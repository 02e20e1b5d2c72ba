"""Control problem data model and the built-in problem registry.

Coefficient callbacks are vectorised over paths. For ``P`` paths the
conventions are::

    f(t, x, u)      -> (P, n)
    sigma(t, x, u)  -> (P, n, l)
    ell(t, x, u)    -> (P,)
    h(x)            -> (P,)
    G(t)            -> (n, m)
    k(t)            -> (m,)

with ``t`` a float, ``x`` of shape ``(P, n)`` and ``u`` of shape ``(P, m)``.
Derivatives follow numpy index order: ``f_x[p, i, j] = df_i/dx_j``,
``sigma_x[p, i, j, k] = dsigma_ij/dx_k`` and so on, one trailing axis per
differentiation variable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np

__all__ = [
    "Box",
    "TimeGrid",
    "DerivativeBundle",
    "ProblemSpec",
    "NonFiniteError",
    "register_problem",
    "get_problem",
    "problem_names",
    "unregister_problem",
    "example1",
    "zero_problem",
    "linear_problem",
    "nonlinear2d_problem",
]


class NonFiniteError(FloatingPointError):
    """A coefficient callback produced NaN or inf."""

    def __init__(self, what: str, t: float, x: np.ndarray, u: Optional[np.ndarray]):
        self.what, self.t, self.x, self.u = what, t, x, u
        super().__init__(f"non-finite {what} output at t={t!r}, x={x!r}, u={u!r}")


@dataclass(frozen=True)
class Box:
    """Closed box ``[lower, upper]`` in R^m (bounds may be infinite)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError(f"box bounds must be 1-d of equal length, got {lo.shape} and {hi.shape}")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ValueError("box bounds must not be NaN")
        if np.any(lo > hi):
            raise ValueError(f"empty box: lower {lo} exceeds upper {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, u, atol: float = 0.0) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(u >= self.lower - atol) and np.all(u <= self.upper + atol))

    def project(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)

    def grid(self, n_per_dim: int = 101, max_points: int = 10_000) -> np.ndarray:
        """Equispaced tensor grid, shape ``(G, m)``; thinned so that ``G <= max_points``."""
        if not self.bounded:
            raise ValueError("a u-grid needs a bounded control box; pass an explicit grid instead")
        m = self.dim
        per = max(2, min(n_per_dim, int(math.floor(max_points ** (1.0 / m)))))
        axes = [np.linspace(lo, hi, per) if hi > lo else np.array([lo]) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=-1)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[s, T]`` into ``n_steps`` cells."""

    s: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.s) and math.isfinite(self.T)):
            raise ValueError("grid endpoints must be finite")
        if self.s < 0:
            raise ValueError(f"start time must be >= 0, got {self.s}")
        if not self.T > self.s:
            raise ValueError(f"end time {self.T} must exceed start time {self.s}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return (self.T - self.s) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.s, self.T, self.n_steps + 1)

    @property
    def length(self) -> float:
        return self.T - self.s

    def cell_of(self, t: float) -> int:
        """Index of the cell ``[t_i, t_{i+1})`` containing ``t`` (``T`` maps to the last cell)."""
        if t < self.s or t > self.T:
            raise ValueError(f"time {t} outside [{self.s}, {self.T}]")
        return min(int(math.floor((t - self.s) / self.dt + 1e-9)), self.n_steps - 1)


Deriv = Optional[Callable[..., np.ndarray]]


@dataclass(frozen=True)
class DerivativeBundle:
    f_x: Deriv = None
    sigma_x: Deriv = None
    ell_x: Deriv = None
    f_xx: Deriv = None
    sigma_xx: Deriv = None
    ell_xx: Deriv = None
    h_x: Deriv = None
    h_xx: Deriv = None
    f_u: Deriv = None
    sigma_u: Deriv = None
    ell_u: Deriv = None
    mode: str = "analytic"

    _NAMES = ("f_x", "sigma_x", "ell_x", "f_xx", "sigma_xx", "ell_xx", "h_x", "h_xx", "f_u", "sigma_u", "ell_u")

    @classmethod
    def finite_difference(cls, f, sigma, ell, h, step: float = 1e-5, step2: float = 1e-4) -> "DerivativeBundle":
        """Central-difference derivatives of the raw coefficients."""
        return cls(
            f_x=_fd_x(f, step),
            sigma_x=_fd_x(sigma, step),
            ell_x=_fd_x(ell, step),
            f_xx=_fd_xx(f, step2),
            sigma_xx=_fd_xx(sigma, step2),
            ell_xx=_fd_xx(ell, step2),
            h_x=_fd_terminal(h, step),
            h_xx=_fd_terminal2(h, step2),
            f_u=_fd_u(f, step),
            sigma_u=_fd_u(sigma, step),
            ell_u=_fd_u(ell, step),
            mode="finite-difference",
        )

    def completed(self, f, sigma, ell, h) -> "DerivativeBundle":
        """Fill missing entries with finite differences."""
        fd = DerivativeBundle.finite_difference(f, sigma, ell, h)
        missing = {name: getattr(fd, name) for name in self._NAMES if getattr(self, name) is None}
        if not missing:
            return self
        mode = "finite-difference" if len(missing) == len(self._NAMES) else self.mode
        return replace(self, mode=mode, **missing)


def _shift(a: np.ndarray, k: int, delta) -> np.ndarray:
    b = np.array(a, dtype=float, copy=True)
    b[:, k] += delta
    return b


def _per_row(step, diff):
    return np.reshape(step, (-1,) + (1,) * (diff.ndim - 1))


def _fd_x(fn, step):
    def d(t, x, u):
        x = np.asarray(x, dtype=float)
        cols = []
        for k in range(x.shape[1]):
            hk = step * (1.0 + np.abs(x[:, k]))
            diff = fn(t, _shift(x, k, hk), u) - fn(t, _shift(x, k, -hk), u)
            cols.append(diff / _per_row(2.0 * hk, diff))
        return np.stack(cols, axis=-1)

    return d


def _fd_u(fn, step):
    def d(t, x, u):
        u = np.asarray(u, dtype=float)
        cols = []
        for k in range(u.shape[1]):
            hk = step * (1.0 + np.abs(u[:, k]))
            diff = fn(t, x, _shift(u, k, hk)) - fn(t, x, _shift(u, k, -hk))
            cols.append(diff / _per_row(2.0 * hk, diff))
        return np.stack(cols, axis=-1)

    return d


def _fd_xx(fn, step):
    def d(t, x, u):
        x = np.asarray(x, dtype=float)
        n = x.shape[1]
        rows = []
        for j in range(n):
            cols = []
            for k in range(n):
                pp = _shift(_shift(x, j, step), k, step)
                pm = _shift(_shift(x, j, step), k, -step)
                mp = _shift(_shift(x, j, -step), k, step)
                mm = _shift(_shift(x, j, -step), k, -step)
                cols.append((fn(t, pp, u) - fn(t, pm, u) - fn(t, mp, u) + fn(t, mm, u)) / (4.0 * step * step))
            rows.append(np.stack(cols, axis=-1))
        return np.stack(rows, axis=-2)

    return d


def _fd_terminal(h, step):
    inner = _fd_x(lambda t, x, u: h(x), step)
    return lambda x: inner(0.0, x, np.zeros((x.shape[0], 1)))


def _fd_terminal2(h, step):
    inner = _fd_xx(lambda t, x, u: h(x), step)
    return lambda x: inner(0.0, x, np.zeros((x.shape[0], 1)))


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients, derivatives and control domains of a singular control problem.

    ``eta_cap`` bounds the cumulative singular control componentwise
    (``None`` means ``A2 = [0, inf)^m``). ``eta_total`` is an optional
    total-mass constraint ``eta_T = eta_total`` used to build comparison
    families. ``closed_form`` optionally maps ``(problem, pair, states)`` to
    an exact adjoint solution.
    """

    name: str
    dim_n: int
    dim_m: int
    dim_l: int
    f: Callable
    sigma: Callable
    ell: Callable
    h: Callable
    G: Callable
    k: Callable
    A1: Box
    y: np.ndarray
    derivs: DerivativeBundle = field(default_factory=DerivativeBundle)
    eta_cap: Optional[np.ndarray] = None
    eta_total: Optional[np.ndarray] = None
    closed_form: Optional[Callable] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("dim_n", "dim_m", "dim_l"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be >= 1")
        if not isinstance(self.A1, Box):
            raise ValueError("A1 must be a convex Box")
        if self.A1.dim != self.dim_m:
            raise ValueError(f"A1 has dimension {self.A1.dim}, expected {self.dim_m}")
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if y.shape != (self.dim_n,):
            raise ValueError(f"initial state has shape {y.shape}, expected ({self.dim_n},)")
        object.__setattr__(self, "y", y)
        for attr in ("eta_cap", "eta_total"):
            val = getattr(self, attr)
            if val is not None:
                val = np.broadcast_to(np.asarray(val, dtype=float), (self.dim_m,)).copy()
                if np.any(val < 0):
                    raise ValueError(f"{attr} must be nonnegative")
                object.__setattr__(self, attr, val)
        if self.eta_cap is not None and self.eta_total is not None and np.any(self.eta_total > self.eta_cap):
            raise ValueError("eta_total exceeds eta_cap")
        object.__setattr__(self, "derivs", self.derivs.completed(self.f, self.sigma, self.ell, self.h))

    def check_singular_price(self, times) -> None:
        for t in np.atleast_1d(times):
            kt = np.asarray(self.k(float(t)), dtype=float)
            if kt.shape != (self.dim_m,):
                raise ValueError(f"k(t) has shape {kt.shape}, expected ({self.dim_m},)")
            if np.any(kt < 0) or not np.all(np.isfinite(kt)):
                raise ValueError(f"singular price k has a negative or non-finite component at t={t}: {kt}")
            Gt = np.asarray(self.G(float(t)), dtype=float)
            if Gt.shape != (self.dim_n, self.dim_m):
                raise ValueError(f"G(t) has shape {Gt.shape}, expected ({self.dim_n}, {self.dim_m})")


# ---------------------------------------------------------------- registry

_REGISTRY: dict[str, Callable[..., ProblemSpec]] = {}


def register_problem(spec, name: str, sample_times=None) -> str:
    """Register a ``ProblemSpec`` (or a factory returning one) under ``name``.

    Returns the name, which is the registry handle.
    """
    if not name or not isinstance(name, str):
        raise ValueError("problem name must be a non-empty string")
    if name in _REGISTRY:
        raise ValueError(f"duplicate problem name {name!r}")
    if isinstance(spec, ProblemSpec):
        times = np.linspace(0.0, 1.0, 11) if sample_times is None else sample_times
        spec.check_singular_price(times)
        _REGISTRY[name] = lambda **kw: spec
    elif callable(spec):
        _REGISTRY[name] = spec
    else:
        raise TypeError("expected a ProblemSpec or a factory callable")
    return name


def get_problem(name: str, **params: Any) -> ProblemSpec:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(**params)


def unregister_problem(name: str) -> None:
    _REGISTRY.pop(name, None)


def problem_names() -> list[str]:
    return sorted(_REGISTRY)


# ---------------------------------------------------------------- built-ins


def _zeros(*shape):
    return lambda t, x, u: np.zeros((x.shape[0],) + shape)


def example1(k: float = 0.0, epsilon: float = 0.04, **_: Any) -> ProblemSpec:
    """One-dimensional example: dx = u dW + d(eta), cost 1/2 x_1^2 - int u dt + int k d(eta)."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    derivs = DerivativeBundle(
        f_x=_zeros(1, 1),
        sigma_x=_zeros(1, 1, 1),
        ell_x=_zeros(1),
        f_xx=_zeros(1, 1, 1),
        sigma_xx=_zeros(1, 1, 1, 1),
        ell_xx=_zeros(1, 1),
        h_x=lambda x: np.array(x, dtype=float),
        h_xx=lambda x: np.ones((x.shape[0], 1, 1)),
        f_u=_zeros(1, 1),
        sigma_u=lambda t, x, u: np.ones((x.shape[0], 1, 1, 1)),
        ell_u=lambda t, x, u: -np.ones((x.shape[0], 1)),
    )
    from .adjoint import example1_closed_form

    return ProblemSpec(
        name="example1",
        dim_n=1,
        dim_m=1,
        dim_l=1,
        f=lambda t, x, u: np.zeros_like(x, dtype=float),
        sigma=lambda t, x, u: np.asarray(np.broadcast_to(u, (x.shape[0], 1)), dtype=float)[:, :, None],
        ell=lambda t, x, u: -np.asarray(np.broadcast_to(u, (x.shape[0], 1))[:, 0], dtype=float),
        h=lambda x: 0.5 * x[:, 0] ** 2,
        G=lambda t: np.ones((1, 1)),
        k=lambda t: np.full(1, float(k)),
        A1=Box([0.0], [1.0]),
        y=np.zeros(1),
        derivs=derivs,
        eta_cap=np.ones(1),
        eta_total=np.ones(1),
        closed_form=example1_closed_form,
        params={"k": float(k), "epsilon": float(epsilon)},
    )


def zero_problem(**_: Any) -> ProblemSpec:
    z1 = lambda x: np.zeros(x.shape[0])
    derivs = DerivativeBundle(
        f_x=_zeros(1, 1), sigma_x=_zeros(1, 1, 1), ell_x=_zeros(1),
        f_xx=_zeros(1, 1, 1), sigma_xx=_zeros(1, 1, 1, 1), ell_xx=_zeros(1, 1),
        h_x=lambda x: np.zeros((x.shape[0], 1)), h_xx=lambda x: np.zeros((x.shape[0], 1, 1)),
        f_u=_zeros(1, 1), sigma_u=_zeros(1, 1, 1), ell_u=_zeros(1),
    )
    from .adjoint import zero_closed_form

    return ProblemSpec(
        name="zero",
        dim_n=1, dim_m=1, dim_l=1,
        f=lambda t, x, u: np.zeros((x.shape[0], 1)),
        sigma=lambda t, x, u: np.zeros((x.shape[0], 1, 1)),
        ell=lambda t, x, u: np.zeros(x.shape[0]),
        h=z1,
        G=lambda t: np.ones((1, 1)),
        k=lambda t: np.zeros(1),
        A1=Box([0.0], [1.0]),
        y=np.zeros(1),
        derivs=derivs,
        closed_form=zero_closed_form,
    )


def linear_problem(a: float = 0.5, c: float = 1.0, sigma0: float = 0.3, terminal: str = "linear",
                   y: float = 1.0, **_: Any) -> ProblemSpec:
    """Scalar benchmark ``dx = a x dt + sigma0 dW``.

    ``terminal="linear"`` uses ``h = c x`` (so ``h_x = c``);
    ``terminal="quadratic"`` uses ``h = c x^2 / 2`` (so ``h_xx = c``).
    """
    if terminal == "linear":
        h = lambda x: c * x[:, 0]
        h_x = lambda x: np.full((x.shape[0], 1), float(c))
        h_xx = lambda x: np.zeros((x.shape[0], 1, 1))
    elif terminal == "quadratic":
        h = lambda x: 0.5 * c * x[:, 0] ** 2
        h_x = lambda x: c * np.asarray(x, dtype=float)
        h_xx = lambda x: np.full((x.shape[0], 1, 1), float(c))
    else:
        raise ValueError(f"terminal must be 'linear' or 'quadratic', got {terminal!r}")
    derivs = DerivativeBundle(
        f_x=lambda t, x, u: np.full((x.shape[0], 1, 1), float(a)),
        sigma_x=_zeros(1, 1, 1), ell_x=_zeros(1),
        f_xx=_zeros(1, 1, 1), sigma_xx=_zeros(1, 1, 1, 1), ell_xx=_zeros(1, 1),
        h_x=h_x, h_xx=h_xx,
        f_u=_zeros(1, 1), sigma_u=_zeros(1, 1, 1), ell_u=_zeros(1),
    )
    from .adjoint import linear_closed_form

    return ProblemSpec(
        name="linear",
        dim_n=1, dim_m=1, dim_l=1,
        f=lambda t, x, u: a * np.asarray(x, dtype=float),
        sigma=lambda t, x, u: np.full((x.shape[0], 1, 1), float(sigma0)),
        ell=lambda t, x, u: np.zeros(x.shape[0]),
        h=h,
        G=lambda t: np.ones((1, 1)),
        k=lambda t: np.zeros(1),
        A1=Box([0.0], [1.0]),
        y=np.full(1, float(y)),
        derivs=derivs,
        closed_form=linear_closed_form,
        params={"a": float(a), "c": float(c), "sigma0": float(sigma0), "terminal": terminal},
    )


def nonlinear2d_problem(**_: Any) -> ProblemSpec:
    """Two-dimensional state, two noises, scalar control; smooth Lipschitz coefficients."""

    def f(t, x, u):
        x1, x2, v = x[:, 0], x[:, 1], u[:, 0]
        return np.stack([-0.5 * x1 + v * np.sin(x2), -x2 + 0.1 * np.cos(x1)], axis=-1)

    def f_x(t, x, u):
        x1, x2, v = x[:, 0], x[:, 1], u[:, 0]
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = -0.5
        out[:, 0, 1] = v * np.cos(x2)
        out[:, 1, 0] = -0.1 * np.sin(x1)
        out[:, 1, 1] = -1.0
        return out

    def f_xx(t, x, u):
        x1, x2, v = x[:, 0], x[:, 1], u[:, 0]
        out = np.zeros((x.shape[0], 2, 2, 2))
        out[:, 0, 1, 1] = -v * np.sin(x2)
        out[:, 1, 0, 0] = -0.1 * np.cos(x1)
        return out

    def f_u(t, x, u):
        out = np.zeros((x.shape[0], 2, 1))
        out[:, 0, 0] = np.sin(x[:, 1])
        return out

    def sigma(t, x, u):
        x1, x2, v = x[:, 0], x[:, 1], u[:, 0]
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = 0.2 + 0.1 * np.sin(x1)
        out[:, 0, 1] = 0.05 * v
        out[:, 1, 1] = 0.15 * np.cos(x2) + 0.05 * v
        return out

    def sigma_x(t, x, u):
        x1, x2 = x[:, 0], x[:, 1]
        out = np.zeros((x.shape[0], 2, 2, 2))
        out[:, 0, 0, 0] = 0.1 * np.cos(x1)
        out[:, 1, 1, 1] = -0.15 * np.sin(x2)
        return out

    def sigma_xx(t, x, u):
        x1, x2 = x[:, 0], x[:, 1]
        out = np.zeros((x.shape[0], 2, 2, 2, 2))
        out[:, 0, 0, 0, 0] = -0.1 * np.sin(x1)
        out[:, 1, 1, 1, 1] = -0.15 * np.cos(x2)
        return out

    def sigma_u(t, x, u):
        out = np.zeros((x.shape[0], 2, 2, 1))
        out[:, 0, 1, 0] = 0.05
        out[:, 1, 1, 0] = 0.05
        return out

    def ell(t, x, u):
        return 0.5 * u[:, 0] ** 2 + np.log(np.cosh(x[:, 0]))

    def ell_x(t, x, u):
        return np.stack([np.tanh(x[:, 0]), np.zeros(x.shape[0])], axis=-1)

    def ell_xx(t, x, u):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = 1.0 / np.cosh(x[:, 0]) ** 2
        return out

    def h(x):
        return np.log(np.cosh(x[:, 0])) + 0.5 * np.sqrt(1.0 + x[:, 1] ** 2)

    def h_x(x):
        return np.stack([np.tanh(x[:, 0]), 0.5 * x[:, 1] / np.sqrt(1.0 + x[:, 1] ** 2)], axis=-1)

    def h_xx(x):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = 1.0 / np.cosh(x[:, 0]) ** 2
        out[:, 1, 1] = 0.5 / (1.0 + x[:, 1] ** 2) ** 1.5
        return out

    derivs = DerivativeBundle(
        f_x=f_x, sigma_x=sigma_x, ell_x=ell_x, f_xx=f_xx, sigma_xx=sigma_xx, ell_xx=ell_xx,
        h_x=h_x, h_xx=h_xx, f_u=f_u, sigma_u=sigma_u,
        ell_u=lambda t, x, u: np.asarray(u, dtype=float).copy(),
    )
    return ProblemSpec(
        name="nonlinear2d",
        dim_n=2, dim_m=1, dim_l=2,
        f=f, sigma=sigma, ell=ell, h=h,
        G=lambda t: np.array([[1.0], [0.5]]),
        k=lambda t: np.array([0.1 + 0.05 * t]),
        A1=Box([-1.0], [1.0]),
        y=np.array([0.5, -0.2]),
        derivs=derivs,
        eta_cap=np.array([2.0]),
    )


def _builtin(name, factory):
    _REGISTRY[name] = factory


_builtin("example1", example1)
_builtin("zero", zero_problem)
_builtin("linear", linear_problem)
_builtin("nonlinear2d", nonlinear2d_problem)
