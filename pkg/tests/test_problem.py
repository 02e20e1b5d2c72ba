import numpy as np
import pytest

from nearopt.problem import (Box, DerivativeBundle, ProblemSpec, TimeGrid, get_problem, problem_names,
                             register_problem, unregister_problem)


def test_time_grid_nodes():
    g = TimeGrid(0.5, 2.0, 30)
    nodes = g.nodes
    assert nodes[0] == 0.5 and nodes[-1] == 2.0
    assert np.all(np.diff(nodes) > 0)
    assert g.dt == pytest.approx(0.05)
    assert g.cell_of(2.0) == 29 and g.cell_of(0.5) == 0


@pytest.mark.parametrize("args", [(0.0, 0.0, 10), (1.0, 0.5, 10), (0.0, 1.0, 0), (-1.0, 1.0, 5), (0.0, 1.0, 2.5)])
def test_time_grid_rejects_bad_input(args):
    with pytest.raises(ValueError):
        TimeGrid(*args)


def test_box_project_grid():
    b = Box([0.0, -1.0], [1.0, 1.0])
    assert b.contains(b.project(np.array([[3.0, -5.0], [0.5, 0.2]])))
    g = b.grid(101, 10_000)
    assert g.shape == (100 * 100, 2)
    assert b.contains(g)
    with pytest.raises(ValueError):
        Box([1.0], [0.0])
    with pytest.raises(ValueError):
        Box([0.0], [np.inf]).grid()


def test_example1_coefficients():
    p = get_problem("example1", epsilon=0.04)
    x = np.array([[0.3], [-1.0]])
    u = np.array([[0.8], [0.2]])
    assert np.all(p.f(0.1, x, u) == 0)
    assert np.allclose(p.sigma(0.1, x, u)[:, 0, 0], [0.8, 0.2])
    assert np.allclose(p.ell(0.1, x, u), [-0.8, -0.2])
    assert np.allclose(p.h(x), [0.045, 0.5])
    assert np.all(p.G(0.3) == 1)
    assert np.all(p.k(0.3) == 0)
    assert p.params["epsilon"] == 0.04


def test_builtins_registered():
    assert {"example1", "zero", "linear", "nonlinear2d"} <= set(problem_names())
    with pytest.raises(KeyError):
        get_problem("no-such-problem")


def test_register_duplicate_and_negative_price():
    base = get_problem("zero")
    name = register_problem(base, "zero-copy-test")
    try:
        assert get_problem(name) is base
        with pytest.raises(ValueError):
            register_problem(base, "zero-copy-test")
    finally:
        unregister_problem(name)
    from dataclasses import replace

    neg = replace(base, k=lambda t: np.array([-1.0]))
    with pytest.raises(ValueError, match="negative"):
        register_problem(neg, "neg-price-test")
    assert "neg-price-test" not in problem_names()


def test_non_box_control_set_rejected():
    base = get_problem("zero")
    from dataclasses import replace

    with pytest.raises(ValueError):
        replace(base, A1=[(0, 1)])


def _sample_inputs(p, rng, n=100):
    x = rng.normal(size=(n, p.dim_n))
    lo = np.where(np.isfinite(p.A1.lower), p.A1.lower, -1)
    hi = np.where(np.isfinite(p.A1.upper), p.A1.upper, 1)
    u = rng.uniform(lo, hi, size=(n, p.dim_m))
    return x, u


@pytest.mark.parametrize("name", ["example1", "linear", "nonlinear2d"])
def test_finite_difference_matches_analytic(name):
    p = get_problem(name)
    fd = DerivativeBundle.finite_difference(p.f, p.sigma, p.ell, p.h)
    rng = np.random.default_rng(5)
    x, u = _sample_inputs(p, rng)
    t = 0.37
    for attr in ("f_x", "sigma_x", "ell_x", "f_u", "sigma_u", "ell_u", "f_xx", "sigma_xx", "ell_xx"):
        a = getattr(p.derivs, attr)(t, x, u)
        b = getattr(fd, attr)(t, x, u)
        assert np.max(np.abs(a - b)) <= 1e-4 * (1 + np.max(np.abs(a))), attr
    for attr in ("h_x", "h_xx"):
        a, b = getattr(p.derivs, attr)(x), getattr(fd, attr)(x)
        assert np.max(np.abs(a - b)) <= 1e-4 * (1 + np.max(np.abs(a))), attr


def test_missing_derivatives_filled_by_fd():
    p = get_problem("linear", a=0.7)
    spec = ProblemSpec(name="fd-linear", dim_n=1, dim_m=1, dim_l=1, f=p.f, sigma=p.sigma, ell=p.ell, h=p.h,
                       G=p.G, k=p.k, A1=p.A1, y=p.y)
    assert spec.derivs.mode == "finite-difference"
    x = np.array([[0.2], [1.5]])
    u = np.zeros((2, 1))
    assert np.allclose(spec.derivs.f_x(0.0, x, u), 0.7)


def test_problem_validation():
    p = get_problem("zero")
    from dataclasses import replace

    with pytest.raises(ValueError):
        replace(p, y=np.zeros(2))
    with pytest.raises(ValueError):
        replace(p, eta_cap=np.array([-1.0]))
    with pytest.raises(ValueError):
        replace(p, eta_cap=np.array([1.0]), eta_total=np.array([2.0]))
