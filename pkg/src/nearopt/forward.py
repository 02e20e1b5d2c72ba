"""Euler simulation of the controlled state, cost evaluation and value estimates."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._stats import mean_se
from .controls import ControlPair
from .metrics import d1, d2
from .noise import NoiseEnsemble
from .problem import NonFiniteError, ProblemSpec, TimeGrid

__all__ = [
    "StateEnsemble",
    "CostEstimate",
    "ValueEstimate",
    "simulate",
    "cost",
    "estimate_value",
    "estimate_state_deviation",
    "write_path_dump",
]


@dataclass(frozen=True, eq=False)
class StateEnsemble:
    x: np.ndarray  # (n_paths, n_steps + 1, n)
    grid: TimeGrid
    problem: str
    pair: ControlPair
    noise: NoiseEnsemble

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def seed(self) -> int:
        return self.noise.seed


@dataclass(frozen=True, eq=False)
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int
    terminal: float
    running: float
    singular: float
    samples: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "terminal": self.terminal,
            "running": self.running,
            "singular": self.singular,
        }


@dataclass(frozen=True, eq=False)
class ValueEstimate:
    best_cost: float
    best_control: str
    family: list
    costs: list = field(default_factory=list)
    estimates: list = field(default_factory=list, repr=False)

    @property
    def best_index(self) -> int:
        return self.family.index(self.best_control)

    def to_dict(self) -> dict:
        return {
            "best_cost": self.best_cost,
            "best_control": self.best_control,
            "family": list(self.family),
            "costs": list(self.costs),
        }


def _finite(arr, what, t, x, u):
    if not np.all(np.isfinite(arr)):
        bad = np.flatnonzero(~np.isfinite(np.reshape(arr, (arr.shape[0], -1))).any(axis=1))
        p = int(bad[0]) if bad.size else 0
        raise NonFiniteError(what, t, np.array(x[p]), None if u is None else np.array(u[p]))


def simulate(problem: ProblemSpec, pair: ControlPair, noise: NoiseEnsemble) -> StateEnsemble:
    """Euler scheme ``x_{i+1} = x_i + f dt + sigma dW_i + G(t_i) d(eta)_i``.

    Coefficients are evaluated at ``(t_i, x_i, u_i)`` where ``x_i`` is the
    left limit at the node; the atom of cell ``i`` shows up from node
    ``i + 1`` on.
    """
    pair.check_against(noise)
    if noise.dim_l != problem.dim_l:
        raise ValueError(f"noise has dimension {noise.dim_l}, problem expects {problem.dim_l}")
    if pair.u.dim_m != problem.dim_m:
        raise ValueError(f"control has dimension {pair.u.dim_m}, problem expects {problem.dim_m}")
    grid = noise.grid
    P, N, n = noise.n_paths, grid.n_steps, problem.dim_n
    dt = grid.dt
    x = np.empty((P, N + 1, n))
    x[:, 0] = problem.y
    deta = np.broadcast_to(pair.eta.increments, (P, N, problem.dim_m))
    for i, t in enumerate(grid.nodes[:-1]):
        t = float(t)
        xi = x[:, i]
        ui = pair.u.at(i, P)
        fi = np.asarray(problem.f(t, xi, ui), dtype=float)
        _finite(fi, "drift f", t, xi, ui)
        si = np.asarray(problem.sigma(t, xi, ui), dtype=float)
        _finite(si, "diffusion sigma", t, xi, ui)
        if fi.shape != (P, n) or si.shape != (P, n, problem.dim_l):
            raise ValueError(f"coefficient shapes {fi.shape}, {si.shape} do not match dims ({n}, {problem.dim_l})")
        Gt = np.asarray(problem.G(t), dtype=float)
        x[:, i + 1] = xi + fi * dt + np.einsum("pnl,pl->pn", si, noise.dW[:, i]) + deta[:, i] @ Gt.T
    _finite(x[:, -1], "state", float(grid.T), x[:, -1], None)
    return StateEnsemble(x=x, grid=grid, problem=problem.name, pair=pair, noise=noise)


def cost(problem: ProblemSpec, pair: ControlPair, states: StateEnsemble) -> CostEstimate:
    """Monte Carlo estimate of ``E[h(x_T) + int ell dt + int k d(eta)]``.

    The singular integral is the finite sum ``sum_i k(t_i) . d(eta)_i``.
    """
    if states.grid != pair.grid:
        raise ValueError("states were not simulated on this control's grid")
    grid = states.grid
    P = states.n_paths
    x = states.x
    terminal = np.asarray(problem.h(x[:, -1]), dtype=float)
    if terminal.shape != (P,):
        raise ValueError(f"terminal cost has shape {terminal.shape}, expected ({P},)")
    running = np.zeros(P)
    singular = np.zeros(P)
    deta = np.broadcast_to(pair.eta.increments, (P, grid.n_steps, problem.dim_m))
    for i, t in enumerate(grid.nodes[:-1]):
        t = float(t)
        running += np.asarray(problem.ell(t, x[:, i], pair.u.at(i, P)), dtype=float) * grid.dt
        singular += deta[:, i] @ np.asarray(problem.k(t), dtype=float)
    total = terminal + running + singular
    _, se = mean_se(total, states.noise.antithetic)
    t_mean, r_mean, s_mean = float(terminal.mean()), float(running.mean()), float(singular.mean())
    return CostEstimate(
        mean=t_mean + r_mean + s_mean,
        std_error=se,
        n_paths=P,
        terminal=t_mean,
        running=r_mean,
        singular=s_mean,
        samples=total,
    )


def estimate_value(problem: ProblemSpec, family: Sequence[ControlPair], noise: NoiseEnsemble) -> ValueEstimate:
    """Minimum estimated cost over a finite family, all on common noise.

    Ties go to the earliest family member.
    """
    if not family:
        raise ValueError("value estimate needs a nonempty control family")
    names = [p.name for p in family]
    if len(set(names)) != len(names):
        raise ValueError(f"family members need distinct names, got {names}")
    estimates = [cost(problem, p, simulate(problem, p, noise)) for p in family]
    costs = [e.mean for e in estimates]
    best = int(np.argmin(costs))
    return ValueEstimate(best_cost=costs[best], best_control=names[best], family=names, costs=costs,
                         estimates=estimates)


def estimate_state_deviation(problem: ProblemSpec, pair_a: ControlPair, pair_b: ControlPair,
                             noise: NoiseEnsemble, beta: float = 1.0) -> tuple[float, float, float]:
    """``(E max_i |x^a_i - x^b_i|^(2 beta), d1(u_a, u_b), d2(eta_a, eta_b))``.

    The supremum runs over grid nodes only, so it is a lower bound on the
    continuous-time supremum.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    xa = simulate(problem, pair_a, noise).x
    xb = simulate(problem, pair_b, noise).x
    dev = np.linalg.norm(xa - xb, axis=-1).max(axis=1)
    lhs = float(np.mean(dev ** (2.0 * beta)))
    return lhs, d1(pair_a.u, pair_b.u), d2(pair_a.eta, pair_b.eta)


def write_path_dump(path, states: StateEnsemble, max_paths: Optional[int] = None, delimiter: str = ",") -> int:
    """Write one row per (path, node): ``path, step, t, x_*, u_*, eta_*``.

    The control columns on the terminal node are empty (no cell follows it).
    Returns the number of rows written.
    """
    pair = states.pair
    P = states.n_paths if max_paths is None else min(states.n_paths, max_paths)
    N = states.grid.n_steps
    n, m = states.x.shape[2], pair.u.dim_m
    nodes = states.grid.nodes
    eta = np.broadcast_to(pair.eta.cumulative(), (states.n_paths, N + 1, m))
    u = np.broadcast_to(pair.u.values, (states.n_paths, N, m))
    header = ["path", "step", "t"] + [f"x{j + 1}" for j in range(n)] + [f"u{j + 1}" for j in range(m)] \
        + [f"eta{j + 1}" for j in range(m)]
    rows = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(header)
        for p in range(P):
            for i in range(N + 1):
                uc = [repr(float(v)) for v in u[p, i]] if i < N else [""] * m
                w.writerow([p, i, repr(float(nodes[i]))] + [repr(float(v)) for v in states.x[p, i]] + uc
                           + [repr(float(v)) for v in eta[p, i]])
                rows += 1
    return rows
