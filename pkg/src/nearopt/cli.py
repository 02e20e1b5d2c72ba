"""Command-line front end.

    nearopt simulate  --problem linear --paths 1000 --steps 50
    nearopt adjoint   --problem example1 --candidate const:0.8 --eta ramp:1
    nearopt certify   --problem example1 --candidate const:0.8 --epsilon 0.04 --family grid:0:1:11
    nearopt example1  --epsilon 0.04 --paths 10000 --steps 100 --seed 1
    nearopt deviation --problem example1 --candidate const:1 --compare spike:1:0:0.5:0

Settings come from defaults, then flags, then ``--config`` (YAML or JSON),
each layer overriding the previous one. With ``--strict`` the exit status
reflects the certificate verdict: 0 pass, 1 fail, 2 hypotheses not met.
Usage errors exit with 3.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import yaml

from .adjoint import RegressionConfig, RegressionError, estimate_adjoint_deviation, solve_adjoints, write_adjoint_dump
from .certify import FAIL, HYPOTHESES_NOT_MET, PASS, CertificateConfig, certify, spike_perturb
from .controls import ControlPair, RegularControl, SingularControl
from .forward import cost, estimate_state_deviation, simulate, write_path_dump
from .noise import sample_noise
from .problem import NonFiniteError, TimeGrid, get_problem, problem_names
from .report import write_report

__all__ = ["RunConfig", "UsageError", "main", "run", "build_parser"]

COMMANDS = ("simulate", "adjoint", "certify", "example1", "deviation")
EXIT_CODES = {PASS: 0, FAIL: 1, HYPOTHESES_NOT_MET: 2}
USAGE_EXIT = 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    problem: str = "example1"
    params: dict = field(default_factory=dict)
    paths: int = 10_000
    steps: int = 100
    horizon: float = 1.0
    seed: int = 0
    antithetic: bool = False
    candidate: Optional[str] = None
    eta: Optional[str] = None
    compare: Optional[str] = None
    family: Optional[str] = None
    backend: str = "regression"
    degree: int = 2
    ridge: float = 1e-8
    k_rule: str = "joint"
    epsilon: float = 0.04
    delta: float = 1.0 / 3.0
    bigc: float = 1.0
    ugrid: int = 101
    beta: float = 1.5
    alpha: float = 0.5
    out: str = "reports"
    dump_paths: Optional[str] = None
    dump_limit: Optional[int] = None
    strict: bool = False

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if self.command != "example1" and self.problem not in problem_names():
            raise UsageError(f"unknown problem {self.problem!r}; registered: {', '.join(problem_names())}")
        for name in ("paths", "steps", "ugrid", "degree"):
            v = getattr(self, name)
            if int(v) != v or v < (0 if name == "degree" else 1):
                raise UsageError(f"--{name} must be a positive integer, got {v}")
        if not self.horizon > 0:
            raise UsageError(f"--horizon must be positive, got {self.horizon}")
        if self.antithetic and self.paths % 2:
            raise UsageError("--antithetic needs an even --paths")
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise UsageError(f"--epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta <= 1.0 / 3.0 + 1e-15:
            raise UsageError(f"--delta must lie in (0, 1/3], got {self.delta}")
        if not self.bigc > 0:
            raise UsageError(f"--bigc must be > 0, got {self.bigc}")
        if self.ridge < 0:
            raise UsageError(f"--ridge must be >= 0, got {self.ridge}")
        if self.backend not in ("regression", "closed-form"):
            raise UsageError(f"--backend must be 'regression' or 'closed-form', got {self.backend!r}")
        if self.k_rule not in ("joint", "increment"):
            raise UsageError(f"--k-rule must be 'joint' or 'increment', got {self.k_rule!r}")
        if self.beta <= 0 or not 0 < self.alpha < 1:
            raise UsageError("--beta must be > 0 and --alpha in (0, 1)")
        if self.command == "deviation" and not self.compare:
            raise UsageError("deviation needs --compare")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        # output locations do not change results, so they stay out of the hash
        for key in ("out", "dump_paths", "dump_limit", "strict"):
            d.pop(key)
        return d


# ---------------------------------------------------------------- control identifiers


def _floats(text: str, what: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad numeric list {text!r} in {what}") from None


def parse_regular(spec: str, grid: TimeGrid, problem, epsilon: float) -> RegularControl:
    """``const:v[,v..]``, ``near:k`` (``1 - k sqrt(eps)``) or ``spike:base:t0:theta:v``."""
    kind, _, arg = spec.partition(":")
    if kind == "const":
        return RegularControl.constant(grid, _floats(arg, spec), name=spec)
    if kind == "near":
        k = float(arg or 1.0)
        value = np.asarray(problem.A1.upper, dtype=float) - k * math.sqrt(epsilon)
        return RegularControl.constant(grid, problem.A1.project(value), name=spec)
    if kind == "spike":
        parts = arg.split(":")
        if len(parts) != 4:
            raise UsageError(f"spike control needs base:t0:theta:value, got {spec!r}")
        base = RegularControl.constant(grid, _floats(parts[0], spec))
        t0, theta = float(parts[1]), float(parts[2])
        try:
            return spike_perturb(base, t0, theta, _floats(parts[3], spec), problem.A1, name=spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    raise UsageError(f"unknown regular control {spec!r}; use const:, near: or spike:")


def parse_singular(spec: str, grid: TimeGrid, dim_m: int) -> SingularControl:
    """``none``, ``ramp:mass`` or ``jump:t0:mass``."""
    kind, _, arg = spec.partition(":")
    if kind == "none":
        return SingularControl.zero(grid, dim_m)
    if kind == "ramp":
        return SingularControl.ramp(grid, _floats(arg or "1", spec), dim_m, name=spec)
    if kind == "jump":
        t0, _, mass = arg.partition(":")
        try:
            return SingularControl.jump(grid, float(t0), _floats(mass or "1", spec), dim_m, name=spec)
        except ValueError as exc:
            raise UsageError(f"bad jump control {spec!r}: {exc}") from None
    raise UsageError(f"unknown singular control {spec!r}; use none, ramp: or jump:")


def parse_pair(spec: str, grid, problem, epsilon: float, default_eta: str) -> ControlPair:
    u_spec, _, eta_spec = spec.partition("|")
    u = parse_regular(u_spec, grid, problem, epsilon)
    if u.dim_m != problem.dim_m:
        raise UsageError(f"control {u_spec!r} has dimension {u.dim_m}, problem expects {problem.dim_m}")
    if not u.in_box(problem.A1):
        raise UsageError(f"control {u_spec!r} leaves the control box")
    eta = parse_singular(eta_spec or default_eta, grid, problem.dim_m)
    if not eta.within_cap(problem.eta_cap):
        raise UsageError(f"singular control {eta.name!r} exceeds the cap")
    return ControlPair(u, eta, name=f"{u.name}|{eta.name}")


def parse_family(spec: str, grid, problem, epsilon: float, default_eta: str) -> list:
    """``;``-separated pair identifiers; ``grid:a:b:n`` expands to ``n`` constants."""
    out = []
    for item in filter(None, (s.strip() for s in spec.split(";"))):
        if item.startswith("grid:"):
            parts = item.split(":")
            if len(parts) != 4:
                raise UsageError(f"family grid needs grid:a:b:n, got {item!r}")
            a, b, n = float(parts[1]), float(parts[2]), int(parts[3])
            out += [parse_pair(f"const:{v:g}", grid, problem, epsilon, default_eta) for v in np.linspace(a, b, n)]
        else:
            out.append(parse_pair(item, grid, problem, epsilon, default_eta))
    seen, uniq = set(), []
    for p in out:
        if p.name not in seen:
            seen.add(p.name)
            uniq.append(p)
    return uniq


# ---------------------------------------------------------------- commands


def _summary(arr: np.ndarray) -> list:
    """Path mean at every node, flattened per node."""
    return arr.reshape(arr.shape[0], arr.shape[1], -1).mean(axis=0).tolist()


def _adjoint_summary(sol) -> dict:
    return {
        "backend": sol.backend,
        "stats": sol.stats,
        "t": sol.grid.nodes.tolist(),
        "mean_psi": _summary(sol.first.psi),
        "mean_K": _summary(sol.first.K),
        "mean_Q": _summary(sol.second.Q),
        "mean_R": _summary(sol.second.R),
    }


def _setup(cfg: RunConfig):
    if cfg.command == "example1":
        problem = get_problem("example1", epsilon=cfg.epsilon, **cfg.params)
    else:
        try:
            problem = get_problem(cfg.problem, **cfg.params)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad parameters for problem {cfg.problem!r}: {exc}") from None
    grid = TimeGrid(0.0, cfg.horizon, cfg.steps)
    noise = sample_noise(grid, cfg.paths, problem.dim_l, cfg.seed, cfg.antithetic)
    default_eta = cfg.eta or ("ramp:1" if problem.eta_total is not None else "none")
    cand_spec = cfg.candidate or ("near:1" if cfg.command == "example1" else "const:0")
    candidate = parse_pair(cand_spec, grid, problem, cfg.epsilon, default_eta)
    return problem, grid, noise, candidate, default_eta


def _cert_config(cfg: RunConfig, family) -> CertificateConfig:
    return CertificateConfig(epsilon=cfg.epsilon, delta=cfg.delta, C=cfg.bigc, family=tuple(family),
                             n_per_dim=cfg.ugrid)


def _reg_config(cfg: RunConfig) -> RegressionConfig:
    return RegressionConfig(degree=cfg.degree, ridge=cfg.ridge, k_rule=cfg.k_rule)


def run(cfg: RunConfig) -> tuple[int, str, dict]:
    """Execute one command; returns ``(exit status, report path, result)``."""
    cfg.validate()
    problem, grid, noise, candidate, default_eta = _setup(cfg)
    status = PASS
    if cfg.command == "simulate":
        states = simulate(problem, candidate, noise)
        est = cost(problem, candidate, states)
        result = {"candidate": candidate.name, "cost": est.to_dict(),
                  "mean_terminal_state": states.x[:, -1].mean(axis=0).tolist()}
        if cfg.dump_paths:
            write_path_dump(cfg.dump_paths, states, cfg.dump_limit)
    elif cfg.command == "adjoint":
        states = simulate(problem, candidate, noise)
        sol = solve_adjoints(problem, candidate, states, noise, _reg_config(cfg), cfg.backend)
        result = {"candidate": candidate.name, "adjoint": _adjoint_summary(sol)}
        if cfg.dump_paths:
            write_adjoint_dump(cfg.dump_paths, sol, cfg.dump_limit)
    elif cfg.command in ("certify", "example1"):
        spec = cfg.family or ("grid:0:1:11" if cfg.command == "example1" else "")
        family = parse_family(spec, grid, problem, cfg.epsilon, default_eta) if spec else []
        if family and candidate.name not in {p.name for p in family}:
            family.append(candidate)
        states = simulate(problem, candidate, noise)
        sol = solve_adjoints(problem, candidate, states, noise, _reg_config(cfg), cfg.backend)
        report = certify(problem, candidate, noise, _cert_config(cfg, family), adjoints=sol)
        result = {"certificate": report.to_dict(), "adjoint": _adjoint_summary(sol)}
        if cfg.command == "example1":
            target = 1.0 - math.sqrt(cfg.epsilon)
            result["example1"] = {
                "candidate_value": target,
                "max_abs_Q_minus_1": float(np.abs(sol.second.Q - 1.0).max()),
                "max_abs_R": float(np.abs(sol.second.R).max()),
                "mean_K": float(sol.first.K.mean()),
                "psi_rmse_vs_closed_form": float(np.sqrt(np.mean(
                    (sol.first.psi[..., 0] - (target * noise.W[..., 0] + 1.0)) ** 2))),
                "E_int_K_minus_1_sq": float(np.mean(((sol.first.K[..., 0, 0] - 1.0) ** 2).sum(axis=1) * grid.dt)),
                "regular_gap": report.residuals["regular_gap"].value,
            }
        if cfg.dump_paths:
            write_adjoint_dump(cfg.dump_paths, sol, cfg.dump_limit)
        status = report.overall
    else:  # deviation
        other = parse_pair(cfg.compare, grid, problem, cfg.epsilon, default_eta)
        lhs, dist1, dist2 = estimate_state_deviation(problem, candidate, other, noise, beta=1.0)
        adj = estimate_adjoint_deviation(problem, candidate, other, noise, _reg_config(cfg), cfg.beta,
                                         cfg.alpha, cfg.backend)
        result = {"pair_a": candidate.name, "pair_b": other.name,
                  "state": {"E_sup_dev2": lhs, "d1": dist1, "d2": dist2,
                            "ratio": lhs / dist1**0.5 if dist1 > 0 else None},
                  "adjoint": adj.to_dict()}
    path = write_report(cfg.command, cfg.to_dict(), result, cfg.out)
    code = EXIT_CODES[status] if cfg.strict else 0
    return code, path, result


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nearopt", description="Near-optimality certificates for singular stochastic control.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML or JSON file; its keys override flags")
    p.add_argument("--problem")
    p.add_argument("--param", action="append", default=None, metavar="KEY=VALUE",
                   help="problem factory parameter (repeatable)")
    p.add_argument("--paths", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--antithetic", action="store_true", default=None)
    p.add_argument("--candidate", help="regular control, optionally with '|eta'")
    p.add_argument("--eta", help="singular control: none, ramp:mass, jump:t0:mass")
    p.add_argument("--compare", help="second pair for the deviation command")
    p.add_argument("--family", help="';'-separated pairs or grid:a:b:n")
    p.add_argument("--backend", choices=("regression", "closed-form"))
    p.add_argument("--degree", type=int)
    p.add_argument("--ridge", type=float)
    p.add_argument("--k-rule", dest="k_rule", choices=("joint", "increment"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--bigc", type=float)
    p.add_argument("--ugrid", type=int, help="u-grid points per control component")
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--out", help="directory for report files")
    p.add_argument("--dump-paths", dest="dump_paths", help="write per-path CSV here")
    p.add_argument("--dump-limit", dest="dump_limit", type=int)
    p.add_argument("--strict", action="store_true", default=None)
    return p


def _coerce(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise UsageError(f"config file {path} is not valid YAML/JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    merged = {k: v for k, v in vars(args).items() if v is not None and k in known}
    if args.param:
        params = {}
        for item in args.param:
            key, sep, val = item.partition("=")
            if not sep:
                raise UsageError(f"--param expects KEY=VALUE, got {item!r}")
            params[key] = _coerce(val)
        merged["params"] = params
    if args.config:
        filed = load_config(args.config)
        unknown = set(filed) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(filed)
    merged["command"] = args.command
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _check_out(path: str) -> None:
    probe = path
    while probe and not os.path.exists(probe):
        probe = os.path.dirname(probe)
    probe = probe or "."
    if not os.path.isdir(probe) or not os.access(probe, os.W_OK):
        raise UsageError(f"output location {path!r} is not writable")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        cfg.validate()
        _check_out(cfg.out)
        if cfg.dump_paths:
            _check_out(os.path.dirname(os.path.abspath(cfg.dump_paths)))
        code, path, result = run(cfg)
    except UsageError as exc:
        print(f"nearopt: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (RegressionError, NonFiniteError) as exc:
        print(f"nearopt: numerical failure: {exc}", file=sys.stderr)
        return 1
    print(path)
    if "certificate" in result:
        cert = result["certificate"]
        for name, r in sorted(cert["residuals"].items()):
            print(f"{name:24s} {r['value']!s:>24} se={r['std_error']!s:<24} thr={r['threshold']!s:<22} {r['verdict']}")
        print(f"overall: {cert['overall']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
