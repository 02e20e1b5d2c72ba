"""First- and second-order adjoint BSDEs along an admissible pair.

The regression backend runs an explicit backward Euler sweep. At each cell
the next-node value ``Y = Psi_{i+1}`` is projected by least squares onto

    span{ phi(x_i), phi(x_i) * dW_i^j / sqrt(dt) }

where ``phi`` is a polynomial basis in the (standardised) state. The first
block gives ``E[Y | x_i]``, the second gives the martingale integrand
``K_i = E[Y dW_i | x_i] / dt``. Fitting both jointly reproduces any target
that is exactly linear in the increment, which is what happens for
constant-coefficient problems. The literal two-stage rule (regress
``Y dW / dt`` on ``phi``) is available as ``k_rule="increment"``.

Singular controls affect the adjoints only through the state paths.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np

from .controls import ControlPair
from .forward import StateEnsemble, simulate
from .metrics import d1
from .noise import NoiseEnsemble
from .problem import NonFiniteError, ProblemSpec

__all__ = [
    "RegressionConfig",
    "RegressionError",
    "FirstOrderAdjoint",
    "SecondOrderAdjoint",
    "AdjointSolution",
    "AdjointDeviation",
    "conditional_projection",
    "solve_first_order",
    "solve_second_order",
    "solve_adjoints",
    "estimate_adjoint_deviation",
    "write_adjoint_dump",
]


class RegressionError(np.linalg.LinAlgError):
    def __init__(self, step: int, cond: float):
        self.step, self.cond = step, cond
        super().__init__(f"regression matrix ill-conditioned at step {step} (condition number {cond:.3e})")


@dataclass(frozen=True)
class RegressionConfig:
    degree: int = 2
    ridge: float = 1e-8
    k_rule: str = "joint"
    max_cond: float = 1e13

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError("basis degree must be a nonnegative integer")
        if self.ridge < 0:
            raise ValueError("ridge regularisation must be >= 0")
        if self.k_rule not in ("joint", "increment"):
            raise ValueError(f"k_rule must be 'joint' or 'increment', got {self.k_rule!r}")

    def to_dict(self) -> dict:
        return {"degree": self.degree, "ridge": self.ridge, "k_rule": self.k_rule}


@dataclass(frozen=True, eq=False)
class FirstOrderAdjoint:
    psi: np.ndarray  # (P, N + 1, n)
    K: np.ndarray  # (P, N, n, l)
    backend: str = "regression"
    config: Optional[RegressionConfig] = None


@dataclass(frozen=True, eq=False)
class SecondOrderAdjoint:
    Q: np.ndarray  # (P, N + 1, n, n)
    R: np.ndarray  # (P, N, n, n, l)
    backend: str = "regression"
    config: Optional[RegressionConfig] = None


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    first: FirstOrderAdjoint
    second: SecondOrderAdjoint
    states: StateEnsemble
    backend: str = "regression"
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.first.psi.shape[:2] != self.second.Q.shape[:2]:
            raise ValueError("first- and second-order adjoints are on different ensembles")
        if not self.stats:
            object.__setattr__(self, "stats", _bound_stats(self))

    @property
    def grid(self):
        return self.states.grid


def _bound_stats(sol: AdjointSolution) -> dict:
    dt = sol.states.grid.dt
    psi, K, Q, R = sol.first.psi, sol.first.K, sol.second.Q, sol.second.R

    def sq(a, lead=2):
        return np.sum(a.reshape(a.shape[:lead] + (-1,)) ** 2, axis=-1)

    stats = {
        "E_sup_psi2": float(np.mean(sq(psi).max(axis=1))),
        "E_int_K2": float(np.mean(sq(K).sum(axis=1) * dt)),
        "E_sup_Q2": float(np.mean(sq(Q).max(axis=1))),
        "E_int_R2": float(np.mean(sq(R).sum(axis=1) * dt)),
    }
    for key, val in stats.items():
        if not np.isfinite(val):
            raise FloatingPointError(f"adjoint bound statistic {key} is not finite")
    return stats


# ---------------------------------------------------------------- regression


def _basis(x: np.ndarray, degree: int) -> np.ndarray:
    P, n = x.shape
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    active = np.flatnonzero(std > 1e-12 * (1.0 + np.abs(mean)))
    z = (x[:, active] - mean[active]) / std[active]
    cols = [np.ones(P)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(active.size), deg):
            cols.append(np.prod(z[:, list(combo)], axis=1))
    return np.stack(cols, axis=-1)


def _ridge_solve(A: np.ndarray, Y: np.ndarray, ridge: float, max_cond: float, step: int) -> np.ndarray:
    gram = A.T @ A
    gram[np.diag_indices_from(gram)] += ridge
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > max_cond:
        raise RegressionError(step, cond)
    return np.linalg.solve(gram, A.T @ Y)


def conditional_projection(Y: np.ndarray, x: np.ndarray, dW: np.ndarray, dt: float,
                           cfg: RegressionConfig, step: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Estimate ``E[Y | x]`` and ``E[Y dW^j | x] / dt``.

    ``Y`` is ``(P, d)``, ``x`` is ``(P, n)``, ``dW`` is ``(P, l)``. Returns
    arrays of shape ``(P, d)`` and ``(P, d, l)``.
    """
    phi = _basis(x, cfg.degree)
    P, nb = phi.shape
    l = dW.shape[1]
    if cfg.k_rule == "joint":
        scaled = dW / np.sqrt(dt)
        A = np.concatenate([phi] + [phi * scaled[:, [j]] for j in range(l)], axis=1)
        beta = _ridge_solve(A, Y, cfg.ridge, cfg.max_cond, step)
        mean = phi @ beta[:nb]
        z = np.stack([phi @ beta[nb * (j + 1): nb * (j + 2)] for j in range(l)], axis=-1) / np.sqrt(dt)
        return mean, z
    beta = _ridge_solve(phi, Y, cfg.ridge, cfg.max_cond, step)
    mean = phi @ beta
    targets = np.concatenate([Y * (dW[:, [j]] / dt) for j in range(l)], axis=1)
    gamma = _ridge_solve(phi, targets, cfg.ridge, cfg.max_cond, step)
    d = Y.shape[1]
    z = (phi @ gamma).reshape(P, l, d).transpose(0, 2, 1)
    return mean, z


def _check(arr, what, t, x, u):
    if not np.all(np.isfinite(arr)):
        p = int(np.flatnonzero(~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1))[0]) \
            if np.any(~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)) else 0
        raise NonFiniteError(what, t, np.array(x[p]), np.array(u[p]))


def solve_first_order(problem: ProblemSpec, pair: ControlPair, states: StateEnsemble,
                      noise: Optional[NoiseEnsemble] = None,
                      cfg: Optional[RegressionConfig] = None) -> FirstOrderAdjoint:
    """Backward sweep for ``(Psi, K)`` with ``Psi_T = h_x(x_T)``.

    ``Psi_i = E_i[Psi_{i+1}] + dt * (f_x^T E_i[Psi_{i+1}] + sum_j (sigma^j_x)^T K^j_i + ell_x)``.
    """
    cfg = cfg or RegressionConfig()
    noise = noise or states.noise
    grid = states.grid
    P, N, n, l = states.n_paths, grid.n_steps, problem.dim_n, problem.dim_l
    dt = grid.dt
    x = states.x
    dv = problem.derivs
    psi = np.empty((P, N + 1, n))
    K = np.empty((P, N, n, l))
    terminal = np.asarray(dv.h_x(x[:, -1]), dtype=float).reshape(P, n)
    _check(terminal, "h_x", float(grid.T), x[:, -1], np.zeros((P, 1)))
    psi[:, -1] = terminal
    nodes = grid.nodes
    for i in range(N - 1, -1, -1):
        t = float(nodes[i])
        xi, ui = x[:, i], pair.u.at(i, P)
        mean, Ki = conditional_projection(psi[:, i + 1], xi, noise.dW[:, i], dt, cfg, step=i)
        fx = np.asarray(dv.f_x(t, xi, ui), dtype=float)
        sx = np.asarray(dv.sigma_x(t, xi, ui), dtype=float)
        lx = np.asarray(dv.ell_x(t, xi, ui), dtype=float)
        for what, arr in (("f_x", fx), ("sigma_x", sx), ("ell_x", lx)):
            _check(arr, what, t, xi, ui)
        driver = np.einsum("pji,pj->pi", fx, mean) + np.einsum("pjlk,pjl->pk", sx, Ki) + lx
        psi[:, i] = mean + dt * driver
        K[:, i] = Ki
    return FirstOrderAdjoint(psi=psi, K=K, backend="regression", config=cfg)


def _gamma(dv, t, x, u, psi, K):
    lxx = np.asarray(dv.ell_xx(t, x, u), dtype=float)
    fxx = np.asarray(dv.f_xx(t, x, u), dtype=float)  # (P, n, n, n)
    sxx = np.asarray(dv.sigma_xx(t, x, u), dtype=float)  # (P, n, l, n, n)
    return lxx + np.einsum("pi,pijk->pjk", psi, fxx) + np.einsum("pil,piljk->pjk", K, sxx)


def solve_second_order(problem: ProblemSpec, pair: ControlPair, states: StateEnsemble,
                       noise: Optional[NoiseEnsemble] = None, first: Optional[FirstOrderAdjoint] = None,
                       cfg: Optional[RegressionConfig] = None) -> SecondOrderAdjoint:
    """Backward sweep for ``(Q, R)`` with ``Q_T = h_xx(x_T)``.

    Driver: ``f_x^T Q + Q f_x + sum_j [(s^j)^T Q s^j + (s^j)^T R^j + R^j s^j] + Gamma``
    with ``s^j = d sigma_{.j} / dx`` and ``Gamma`` built from the frozen
    first-order pair. ``Q`` is symmetrised after every step.
    """
    cfg = cfg or RegressionConfig()
    noise = noise or states.noise
    if first is None:
        first = solve_first_order(problem, pair, states, noise, cfg)
    grid = states.grid
    P, N, n, l = states.n_paths, grid.n_steps, problem.dim_n, problem.dim_l
    dt = grid.dt
    x = states.x
    dv = problem.derivs
    Q = np.empty((P, N + 1, n, n))
    R = np.empty((P, N, n, n, l))
    QT = np.asarray(dv.h_xx(x[:, -1]), dtype=float).reshape(P, n, n)
    _check(QT, "h_xx", float(grid.T), x[:, -1], np.zeros((P, 1)))
    Q[:, -1] = 0.5 * (QT + QT.transpose(0, 2, 1))
    nodes = grid.nodes
    for i in range(N - 1, -1, -1):
        t = float(nodes[i])
        xi, ui = x[:, i], pair.u.at(i, P)
        mean, Ri = conditional_projection(Q[:, i + 1].reshape(P, n * n), xi, noise.dW[:, i], dt, cfg, step=i)
        mean = mean.reshape(P, n, n)
        Ri = Ri.reshape(P, n, n, l)
        Ri = 0.5 * (Ri + Ri.transpose(0, 2, 1, 3))
        fx = np.asarray(dv.f_x(t, xi, ui), dtype=float)
        sx = np.asarray(dv.sigma_x(t, xi, ui), dtype=float)  # (P, n, l, n)
        s = sx.transpose(0, 2, 1, 3)  # (P, l, n, n): s[:, j] = d sigma_{.j} / dx
        driver = np.einsum("pji,pjk->pik", fx, mean) + np.einsum("pij,pjk->pik", mean, fx)
        driver += np.einsum("plji,pjk,plkm->pim", s, mean, s)
        driver += np.einsum("plji,pjkl->pik", s, Ri) + np.einsum("pijl,pljk->pik", Ri, s)
        gam = _gamma(dv, t, xi, ui, first.psi[:, i], first.K[:, i])
        _check(gam, "Gamma", t, xi, ui)
        Qi = mean + dt * (driver + gam)
        Q[:, i] = 0.5 * (Qi + Qi.transpose(0, 2, 1))
        R[:, i] = Ri
    return SecondOrderAdjoint(Q=Q, R=R, backend="regression", config=cfg)


def solve_adjoints(problem: ProblemSpec, pair: ControlPair, states: StateEnsemble,
                   noise: Optional[NoiseEnsemble] = None, cfg: Optional[RegressionConfig] = None,
                   backend: str = "regression") -> AdjointSolution:
    """Both adjoint pairs, by regression or from the problem's closed form."""
    if backend in ("closed-form", "closed_form"):
        if problem.closed_form is None:
            raise ValueError(f"problem {problem.name!r} has no closed-form adjoint backend")
        return problem.closed_form(problem, pair, states)
    if backend != "regression":
        raise ValueError(f"unknown adjoint backend {backend!r}")
    cfg = cfg or RegressionConfig()
    first = solve_first_order(problem, pair, states, noise, cfg)
    second = solve_second_order(problem, pair, states, noise, first, cfg)
    return AdjointSolution(first=first, second=second, states=states, backend="regression")


# ---------------------------------------------------------------- closed forms


def _require_deterministic_eta(pair: ControlPair, what: str) -> np.ndarray:
    if not pair.eta.deterministic:
        raise ValueError(f"{what} closed form needs a deterministic singular control")
    return pair.eta.increments[0]  # (N, m)


def example1_closed_form(problem: ProblemSpec, pair: ControlPair, states: StateEnsemble) -> AdjointSolution:
    """``Psi_t = x_t + (eta_T - eta_t)``, ``K_t = u_t``, ``(Q, R) = (1, 0)``; exact on the grid."""
    inc = _require_deterministic_eta(pair, "example1")
    P, N = states.n_paths, states.grid.n_steps
    remaining = np.zeros(N + 1)
    remaining[:N] = np.cumsum(inc[::-1, 0])[::-1]
    psi = states.x + remaining[None, :, None]
    K = np.broadcast_to(pair.u.values, (P, N, 1))[..., None].copy()
    first = FirstOrderAdjoint(psi=psi, K=K, backend="closed-form")
    second = SecondOrderAdjoint(Q=np.ones((P, N + 1, 1, 1)), R=np.zeros((P, N, 1, 1, 1)), backend="closed-form")
    return AdjointSolution(first=first, second=second, states=states, backend="closed-form")


def zero_closed_form(problem: ProblemSpec, pair: ControlPair, states: StateEnsemble) -> AdjointSolution:
    P, N = states.n_paths, states.grid.n_steps
    first = FirstOrderAdjoint(psi=np.zeros((P, N + 1, 1)), K=np.zeros((P, N, 1, 1)), backend="closed-form")
    second = SecondOrderAdjoint(Q=np.zeros((P, N + 1, 1, 1)), R=np.zeros((P, N, 1, 1, 1)), backend="closed-form")
    return AdjointSolution(first=first, second=second, states=states, backend="closed-form")


def linear_closed_form(problem: ProblemSpec, pair: ControlPair, states: StateEnsemble) -> AdjointSolution:
    """Continuous-time solution for ``dx = a x dt + sigma0 dW + d(eta)``.

    Linear terminal ``h = c x``: ``Psi = c e^{a(T-t)}``, ``K = 0``, ``Q = R = 0``.
    Quadratic terminal ``h = c x^2 / 2``: ``Psi = c e^{a(T-t)} E_t[x_T]``,
    ``K = c sigma0 e^{2a(T-t)}``, ``Q = c e^{2a(T-t)}``, ``R = 0``.
    """
    a, c, s0 = problem.params["a"], problem.params["c"], problem.params["sigma0"]
    grid = states.grid
    P, N = states.n_paths, grid.n_steps
    tau = grid.T - grid.nodes  # (N + 1,)
    if problem.params["terminal"] == "linear":
        psi = np.broadcast_to((c * np.exp(a * tau))[None, :, None], (P, N + 1, 1)).copy()
        K = np.zeros((P, N, 1, 1))
        Q = np.zeros((P, N + 1, 1, 1))
    else:
        inc = _require_deterministic_eta(pair, "linear")[:, 0]
        # E_t[x_T] = e^{a tau} x_t + sum_{j >= i} e^{a (T - t_j)} d(eta)_j
        disc = np.exp(a * tau[:-1]) * inc
        tail = np.zeros(N + 1)
        tail[:N] = np.cumsum(disc[::-1])[::-1]
        expect = np.exp(a * tau)[None, :] * states.x[:, :, 0] + tail[None, :]
        psi = (c * np.exp(a * tau)[None, :] * expect)[..., None]
        K = np.broadcast_to((c * s0 * np.exp(2 * a * tau[:-1]))[None, :, None, None], (P, N, 1, 1)).copy()
        Q = np.broadcast_to((c * np.exp(2 * a * tau))[None, :, None, None], (P, N + 1, 1, 1)).copy()
    first = FirstOrderAdjoint(psi=psi, K=K, backend="closed-form")
    second = SecondOrderAdjoint(Q=Q, R=np.zeros((P, N, 1, 1, 1)), backend="closed-form")
    return AdjointSolution(first=first, second=second, states=states, backend="closed-form")


# ---------------------------------------------------------------- deviation estimates


@dataclass(frozen=True)
class AdjointDeviation:
    first: float  # E int |Psi - Psi'|^beta + |K - K'|^beta dt
    second: float  # E int |Q - Q'|^beta + |R - R'|^beta dt
    d1: float
    d1_power: float  # d1^(alpha beta / 2)
    beta: float
    alpha: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _integrated_power(a: np.ndarray, b: np.ndarray, beta: float, dt: float, N: int) -> float:
    diff = (a[:, :N] - b[:, :N]).reshape(a.shape[0], N, -1)
    return float(np.mean((np.linalg.norm(diff, axis=-1) ** beta).sum(axis=1) * dt))


def estimate_adjoint_deviation(problem: ProblemSpec, pair_a: ControlPair, pair_b: ControlPair,
                               noise: NoiseEnsemble, cfg: Optional[RegressionConfig] = None,
                               beta: float = 1.5, alpha: float = 0.5,
                               backend: str = "regression") -> AdjointDeviation:
    """Integrated ``beta``-moments of the adjoint differences between two pairs on common noise."""
    if beta <= 0 or not 0 < alpha < 1:
        raise ValueError("need beta > 0 and 0 < alpha < 1")
    sol_a = solve_adjoints(problem, pair_a, simulate(problem, pair_a, noise), noise, cfg, backend)
    sol_b = solve_adjoints(problem, pair_b, simulate(problem, pair_b, noise), noise, cfg, backend)
    grid = noise.grid
    N, dt = grid.n_steps, grid.dt
    first = _integrated_power(sol_a.first.psi, sol_b.first.psi, beta, dt, N) + \
        _integrated_power(sol_a.first.K, sol_b.first.K, beta, dt, N)
    second = _integrated_power(sol_a.second.Q, sol_b.second.Q, beta, dt, N) + \
        _integrated_power(sol_a.second.R, sol_b.second.R, beta, dt, N)
    dist = d1(pair_a.u, pair_b.u)
    return AdjointDeviation(first=first, second=second, d1=dist, d1_power=dist ** (alpha * beta / 2.0),
                            beta=beta, alpha=alpha)


def write_adjoint_dump(path, sol: AdjointSolution, max_paths: Optional[int] = None, delimiter: str = ",") -> int:
    """One row per (path, node): ``path, step, t, psi_*, K_*, Q_*, R_*``; cell columns empty at ``T``."""
    psi, K, Q, R = sol.first.psi, sol.first.K, sol.second.Q, sol.second.R
    P = psi.shape[0] if max_paths is None else min(psi.shape[0], max_paths)
    N = K.shape[1]
    n, l = psi.shape[2], K.shape[3]
    nodes = sol.grid.nodes
    header = ["path", "step", "t"] + [f"psi{i + 1}" for i in range(n)] \
        + [f"K{i + 1}_{j + 1}" for i in range(n) for j in range(l)] \
        + [f"Q{i + 1}_{j + 1}" for i in range(n) for j in range(n)] \
        + [f"R{i + 1}_{j + 1}_{k + 1}" for i in range(n) for j in range(n) for k in range(l)]
    rows = 0
    fmt = lambda arr: [repr(float(v)) for v in np.ravel(arr)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(header)
        for p in range(P):
            for i in range(N + 1):
                cellK = fmt(K[p, i]) if i < N else [""] * (n * l)
                cellR = fmt(R[p, i]) if i < N else [""] * (n * n * l)
                w.writerow([p, i, repr(float(nodes[i]))] + fmt(psi[p, i]) + cellK + fmt(Q[p, i]) + cellR)
                rows += 1
    return rows
