import json
from dataclasses import replace

import numpy as np
import pytest

from nearopt.adjoint import solve_adjoints
from nearopt.certify import (FAIL, HYPOTHESES_NOT_MET, PASS, CertificateConfig, certify, convex_perturb_singular,
                             near_optimality_gap, necessary_regular_gap, necessary_singular_gap,
                             pointwise_regular_gap, spike_perturb, sufficient_check, support_violation)
from nearopt.controls import ControlPair, RegularControl, SingularControl
from nearopt.forward import simulate
from nearopt.metrics import d1, d2
from nearopt.noise import sample_noise
from nearopt.problem import Box, TimeGrid, get_problem

from conftest import EPS, U_EPS


def _pair(grid, c, eta):
    return ControlPair(RegularControl.constant(grid, c), eta)


@pytest.fixture(scope="module")
def cfg():
    return CertificateConfig(epsilon=EPS)


@pytest.fixture(scope="module")
def solve(example1, noise_1e4):
    cache = {}

    def run(pair, backend="closed-form", problem=example1, noise=noise_1e4):
        key = (pair.name, backend, problem.name, id(noise))
        if key not in cache:
            states = simulate(problem, pair, noise)
            cache[key] = solve_adjoints(problem, pair, states, noise, backend=backend)
        return cache[key]

    return run


def test_config_validation():
    with pytest.raises(ValueError, match="delta"):
        CertificateConfig(epsilon=0.04, delta=0.5)
    with pytest.raises(ValueError):
        CertificateConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        CertificateConfig(epsilon=0.04, C=0.0)
    cfg = CertificateConfig(epsilon=0.04)
    box = Box([0.0], [1.0])
    g = cfg.grid_for(box)
    assert g.shape == (101, 1) and g[0, 0] == 0.0 and g[-1, 0] == 1.0
    assert cfg.threshold_delta == pytest.approx(0.04 ** (1 / 3))
    with pytest.raises(ValueError):
        CertificateConfig(epsilon=0.04, u_grid=np.array([0.5, 1.5])).grid_for(box)
    with pytest.raises(ValueError):
        CertificateConfig(epsilon=0.04, u_grid=np.zeros((0, 1))).grid_for(box)
    big = Box([0.0] * 3, [1.0] * 3)
    assert cfg.grid_for(big).shape[0] <= 10_000


def test_spike_perturb(grid100):
    u = RegularControl.constant(grid100, 0.0)
    assert np.array_equal(spike_perturb(u, 0.3, 0.0, [1.0]).values, u.values)
    assert np.all(spike_perturb(u, 0.0, 1.0, [1.0]).values == 1.0)
    win = spike_perturb(u, 0.25, 0.25, [1.0])
    assert d1(win, u) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        spike_perturb(u, 0.9, 0.2, [1.0])
    with pytest.raises(ValueError):
        spike_perturb(u, 0.1, 0.2, [2.0], box=Box([0.0], [1.0]))
    # partially covered cells are left alone
    odd = spike_perturb(u, 0.005, 0.02, [1.0])
    assert d1(odd, u) == pytest.approx(0.01) and d1(odd, u) <= 0.02


def test_convex_perturb_singular(grid100):
    eta = SingularControl.jump(grid100, 0.0, 1.0)
    xi = SingularControl.zero(grid100)
    assert np.array_equal(convex_perturb_singular(eta, xi, 0.0).increments, eta.increments)
    assert np.array_equal(convex_perturb_singular(eta, xi, 1.0).increments, xi.increments)
    half = convex_perturb_singular(eta, xi, 0.5)
    assert half.increments[0, 0, 0] == 0.5 and half.total()[0, 0] == 0.5
    assert d2(half, eta) == pytest.approx(0.5 * d2(xi, eta))
    with pytest.raises(ValueError):
        convex_perturb_singular(eta, xi, 1.5)


def test_regular_gap_closed_form(solve, example1, grid100, unit_ramp, candidate, cfg):
    res, breakdown = necessary_regular_gap(example1, candidate, solve(candidate), cfg)
    assert res.value == pytest.approx(EPS / 2, abs=1e-12)
    assert breakdown["argmax"] == [1.0]
    assert max(breakdown["E_int_scriptH"]) == pytest.approx(0.5, abs=1e-12)
    assert breakdown["candidate"] == pytest.approx(0.48, abs=1e-12)
    assert res.verdict == PASS


def test_regular_gap_regression_within_noise(solve, example1, candidate, cfg):
    res, _ = necessary_regular_gap(example1, candidate, solve(candidate, "regression"), cfg)
    assert abs(res.value - EPS / 2) <= 3 * max(res.std_error, 1e-9)


def test_regular_gap_bad_candidate(solve, example1, grid100, unit_ramp, cfg):
    bad = _pair(grid100, 0.0, unit_ramp)
    res, _ = necessary_regular_gap(example1, bad, solve(bad), cfg)
    assert res.value == pytest.approx(0.5, abs=1e-12)
    strict = CertificateConfig(epsilon=1e-4, C=1.0)
    assert necessary_regular_gap(example1, bad, solve(bad), strict)[0].verdict == FAIL


def test_maximizer_has_zero_gap(solve, example1, grid100, unit_ramp, cfg):
    best = _pair(grid100, 1.0, unit_ramp)
    res, _ = necessary_regular_gap(example1, best, solve(best), cfg)
    assert res.value <= 3 * max(res.std_error, 1e-9)
    pw, path = pointwise_regular_gap(example1, best, solve(best), cfg)
    assert pw.value <= 1e-12 and np.all(path <= 1e-12)


def test_soundness_ordering(solve, example1, grid100, unit_ramp, cfg):
    gaps = []
    for c in (U_EPS, 1 - 2 * np.sqrt(EPS), 0.0):
        p = _pair(grid100, c, unit_ramp)
        gaps.append(necessary_regular_gap(example1, p, solve(p), cfg)[0].value)
    assert gaps[0] < gaps[1] < gaps[2]
    assert gaps == pytest.approx([0.02, 0.08, 0.5], abs=1e-12)


def test_pointwise_dominates_constant(solve, example1, candidate, cfg):
    sol = solve(candidate, "regression")
    const, _ = necessary_regular_gap(example1, candidate, sol, cfg)
    pw, path = pointwise_regular_gap(example1, candidate, sol, cfg)
    assert pw.value >= const.value - 1e-12
    assert path.shape == (100,)


def test_candidate_must_match_adjoints(solve, example1, grid100, unit_ramp, candidate, cfg):
    other = _pair(grid100, 0.3, unit_ramp)
    with pytest.raises(ValueError):
        necessary_regular_gap(example1, other, solve(candidate), cfg)


def test_singular_gap_example1(solve, example1, grid100, unit_ramp, candidate, cfg):
    fam = [unit_ramp] + [SingularControl.jump(grid100, t, 1.0) for t in (0.0, 0.5, 0.99)]
    res = necessary_singular_gap(example1, candidate, solve(candidate), cfg, family=fam)
    assert abs(res.value) <= 3 * res.std_error
    # closed form: E[Psi_t] = 1 for every t
    for name, v in res.details["family"].items():
        assert v == pytest.approx(1.0, abs=0.05), name


def test_singular_gap_zero_control_optimal(grid100):
    p = get_problem("linear", a=0.5, c=1.0)
    nz = sample_noise(grid100, 500, 1, seed=3)
    pair = _pair(grid100, 0.0, SingularControl.zero(grid100))
    sol = solve_adjoints(p, pair, simulate(p, pair, nz), nz, backend="closed-form")
    res = necessary_singular_gap(p, pair, sol, CertificateConfig(epsilon=EPS))
    assert res.value == 0.0 and res.verdict == PASS


def _two_cell(margin, G=1.0, total=True):
    g = TimeGrid(0.0, 1.0, 2)
    base = get_problem("linear", a=0.0, c=1.0, sigma0=0.0)
    kw = {"eta_cap": np.ones(1), "eta_total": np.ones(1)} if total else {}
    p = replace(base, k=lambda t: np.array([margin if t >= 0.5 else 0.0]), G=lambda t: np.array([[G]]), **kw)
    return g, p


def test_singular_gap_margin():
    m = 0.3
    g, p = _two_cell(m)
    nz = sample_noise(g, 50, 1, seed=0)
    cand = _pair(g, 0.0, SingularControl.jump(g, 0.5, 1.0))
    sol = solve_adjoints(p, cand, simulate(p, cand, nz), nz)
    res = necessary_singular_gap(p, cand, sol, CertificateConfig(epsilon=EPS))
    assert res.value == pytest.approx(m, abs=1e-9)
    assert res.details["argmin"] == "greedy"


def test_singular_gap_unbounded():
    g, p = _two_cell(0.0, G=-1.0, total=False)
    nz = sample_noise(g, 20, 1, seed=0)
    cand = _pair(g, 0.0, SingularControl.zero(g))
    sol = solve_adjoints(p, cand, simulate(p, cand, nz), nz)
    res = necessary_singular_gap(p, cand, sol, CertificateConfig(epsilon=EPS))
    assert res.value == np.inf and res.verdict == FAIL
    # empty support set when the integrand sits below -C sqrt(eps)
    heavy = _pair(g, 0.0, SingularControl.ramp(g, 1.0))
    sol2 = solve_adjoints(p, heavy, simulate(p, heavy, nz), nz)
    assert support_violation(p, heavy, sol2, CertificateConfig(epsilon=EPS)).value == 0.0


def test_support_violation(solve, example1, grid100, unit_ramp, candidate, cfg):
    none = _pair(grid100, U_EPS, SingularControl.zero(grid100))
    assert support_violation(example1, none, solve(none), cfg).value == 0.0
    res = support_violation(example1, candidate, solve(candidate), cfg)
    assert abs(res.value - 1.0) <= max(3 * res.std_error, 0.02) + 0.02


def test_sufficient_check_example1(solve, example1, grid100, unit_ramp, candidate, cfg):
    fam = [unit_ramp, SingularControl.jump(grid100, 0.0, 1.0)]
    out = sufficient_check(example1, candidate, solve(candidate), cfg, family=fam)
    assert out["hypotheses"]["met"]
    assert out["regular"].value == pytest.approx(EPS / 2, abs=1e-12) and out["regular"].threshold == EPS
    assert out["singular"].value == 0.0
    assert out["verdict"] == PASS and out["implied_bound"]["slack"] == pytest.approx(np.sqrt(EPS))
    best = _pair(grid100, 1.0, unit_ramp)
    opt = sufficient_check(example1, best, solve(best), cfg, family=fam)
    assert opt["regular"].value <= 1e-12 and opt["singular"].value == 0.0
    worse = _pair(grid100, 0.6, unit_ramp)
    assert sufficient_check(example1, worse, solve(worse), cfg, family=fam)["verdict"] == FAIL


def test_sufficient_check_nonconvex_terminal(grid100, cfg):
    p = get_problem("example1")
    bad = replace(p, h=lambda x: -x[:, 0] ** 2, closed_form=None)
    nz = sample_noise(grid100, 200, 1, seed=0)
    pair = _pair(grid100, U_EPS, SingularControl.ramp(grid100, 1.0))
    sol = solve_adjoints(bad, pair, simulate(bad, pair, nz), nz)
    out = sufficient_check(bad, pair, sol, cfg)
    assert out["verdict"] == HYPOTHESES_NOT_MET and not out["hypotheses"]["h_convex"]
    assert out["implied_bound"] is None


def test_sufficient_implies_necessary(solve, example1, grid100, unit_ramp, cfg):
    for c in (1.0, 0.9, U_EPS, 0.6):
        p = _pair(grid100, c, unit_ramp)
        sol = solve(p)
        suff = sufficient_check(example1, p, sol, cfg)
        if suff["verdict"] == PASS:
            gap, _ = necessary_regular_gap(example1, p, sol, cfg)
            c_prime = 1.0
            assert gap.value <= c_prime * np.sqrt(EPS) + 3 * max(gap.std_error, 1e-9)


def test_near_optimality_gap(example1, grid100, unit_ramp, candidate, noise_1e4, cfg):
    fam = [_pair(grid100, c, unit_ramp) for c in np.linspace(0, 1, 11)]
    fam[8] = candidate
    res = near_optimality_gap(example1, candidate, fam, noise_1e4, cfg)
    assert abs(res.value - EPS / 2) <= 3 * res.std_error
    assert res.details["epsilon_optimal"] and res.verdict == PASS
    bad = fam[0]
    res0 = near_optimality_gap(example1, bad, fam, noise_1e4, CertificateConfig(epsilon=1e-4))
    assert abs(res0.value - 0.5) <= 3 * res0.std_error and res0.verdict == FAIL
    best = fam[-1]  # u = 1
    only = near_optimality_gap(example1, best, [best, fam[0]], noise_1e4, cfg)
    assert only.value == 0.0
    with pytest.raises(ValueError):
        near_optimality_gap(example1, candidate, [], noise_1e4, cfg)


def test_certify_report(example1, grid100, unit_ramp, candidate, noise_1e4):
    fam = tuple(_pair(grid100, c, unit_ramp) for c in (0.0, 0.5, 1.0))
    rep = certify(example1, candidate, noise_1e4, CertificateConfig(epsilon=EPS, family=fam), backend="closed-form")
    d = rep.to_dict()
    json.dumps(d, allow_nan=False)
    assert set(d["residuals"]) >= {"regular_gap", "singular_gap", "support_violation", "sufficient_gap_regular",
                                   "sufficient_gap_singular", "near_opt_gap", "pointwise_regular_gap"}
    for r in d["residuals"].values():
        assert {"name", "value", "std_error", "threshold", "verdict"} <= set(r)
    assert rep.overall == PASS
    assert len(d["pointwise_gap_path"]) == 100
