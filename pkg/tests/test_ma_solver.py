import numpy as np
import pytest

from kim.errors import BadInput, SolverFailure
from kim.kahler_core import base_metric, make_metric
from kim.ma_solver import (
    SolverConfig,
    poisson_solve,
    solve_step,
    solve_step_twisted,
    step_jacobian,
    step_residual,
)
from kim.spectral_grid import dilation_density, dilation_pullback_potential, random_potential


def _g(bg, seed, size):
    g = random_potential(bg, seed, 6, 1.0).values
    return size * g / np.max(np.abs(g))


def test_poisson_examples(sphere):
    s = sphere.nodes
    np.testing.assert_allclose(poisson_solve(sphere, -s), s, atol=1e-12)
    np.testing.assert_allclose(poisson_solve(sphere, 1 - 3 * s**2), s**2 - 1 / 3, atol=1e-12)
    assert np.max(np.abs(poisson_solve(sphere, np.zeros(64)))) == 0


@pytest.mark.parametrize("which", ["sphere", "torus"])
def test_poisson_correctness_random(which, request):
    bg = request.getfixturevalue(which)
    rng = np.random.default_rng(0)
    for _ in range(100):
        g = rng.standard_normal(bg.shape)
        g -= bg.average(g)
        u = poisson_solve(bg, g)
        assert np.max(np.abs(bg.apply_L0(u) - g)) <= 1e-10 * max(1, np.max(np.abs(g)))
        assert abs(bg.average(u)) < 1e-13


def test_poisson_rejects_nonzero_mean(sphere):
    with pytest.raises(BadInput):
        poisson_solve(sphere, np.ones(64))


def test_jacobian_matches_finite_differences(sphere):
    U = make_metric(random_potential(sphere, 1, 5, 0.1)).density
    eta = random_potential(sphere, 2, 5, 0.05).values
    v = random_potential(sphere, 3, 5, 1.0).values
    g = _g(sphere, 4, 0.05)
    a, beta, h = 0.7, 0.3, 1e-5
    J = step_jacobian(sphere, U + sphere.apply_L0(eta), a, beta)
    fd = (step_residual(sphere, U, eta + h * v, a, g, beta) - step_residual(sphere, U, eta - h * v, a, g, beta)) / (2 * h)
    jv = J @ v
    assert np.max(np.abs(fd - jv)) <= 1e-6 * np.max(np.abs(jv))


def test_zero_data_gives_zero_increment(sphere):
    sol = solve_step(base_metric(sphere), 1.0, np.zeros(64))
    assert np.max(np.abs(sol.increment.values)) == 0
    assert sol.newton_iters == 0


def test_exact_step_reproduces_dilation(sphere):
    # log of the dilation density as data: the a = 0 solve is the inverse Ricci map
    g = np.log(dilation_density(sphere.nodes, 2.0))
    sol = solve_step(base_metric(sphere), 0.0, g)
    target = dilation_pullback_potential(sphere, 2.0)
    assert sol.increment.sup_distance(target) <= 1e-9
    assert sol.newton_iters == 0


def test_newton_quadratic_convergence(sphere):
    prev = make_metric(random_potential(sphere, 5, 5, 0.1))
    sol = solve_step(prev, 1.0, _g(sphere, 6, 0.05))
    hist = sol.residual_history
    assert sol.newton_iters <= 6
    assert sol.final_residual <= 1e-11
    logs = np.log(np.array(hist))
    # quadratic decay: log-residual ratios of the final two steps
    resolved = [logs[i + 1] / logs[i] for i in range(len(logs) - 1) if hist[i + 1] > 1e-15]
    assert all(r >= 1.7 for r in resolved[-2:])
    assert all(hist[i + 1] <= hist[i] for i in range(len(hist) - 1))


def test_step_equation_holds(sphere):
    prev = make_metric(random_potential(sphere, 7, 5, 0.1))
    g = _g(sphere, 8, 0.2)
    sol = solve_step(prev, 1.5, g)
    res = step_residual(sphere, prev.density, sol.increment.values, 1.5, g, 0.0, sol.normalization_constant)
    assert np.max(np.abs(res)) <= 1e-10
    raw = step_residual(sphere, prev.density, sol.raw_increment, 1.5, g)
    assert np.max(np.abs(raw)) <= 1e-10


def test_a_continuity(sphere):
    prev = make_metric(random_potential(sphere, 9, 5, 0.1))
    g = _g(sphere, 10, 0.1)
    a = solve_step(prev, 1.0, g).increment
    b = solve_step(prev, 1.0 + 1e-6, g).increment
    assert a.sup_distance(b) <= 1e-4


def test_negative_a_is_best_effort(sphere):
    prev = make_metric(random_potential(sphere, 11, 5, 0.1))
    g = prev.ricci.ricci_potential
    sol = solve_step(prev, -0.5, g)
    assert sol.best_effort
    res = step_residual(sphere, prev.density, sol.increment.values, -0.5, g, 0.0, sol.normalization_constant)
    assert np.max(np.abs(res)) <= 1e-10


def test_twisted_reduces_to_untwisted(sphere):
    prev = make_metric(random_potential(sphere, 12, 5, 0.1))
    g = _g(sphere, 13, 0.1)
    a = solve_step(prev, 1.0, g)
    b = solve_step_twisted(prev, 1.0, g, 0.0)
    np.testing.assert_array_equal(a.increment.values, b.increment.values)


def test_twisted_zero_data(sphere):
    sol = solve_step_twisted(base_metric(sphere), 1.0, np.zeros(64), 0.3)
    assert np.max(np.abs(sol.increment.values)) < 1e-14


def test_twisted_residual(sphere):
    prev = make_metric(random_potential(sphere, 14, 5, 0.1))
    g = _g(sphere, 15, 0.1)
    sol = solve_step_twisted(prev, 1.0, g, 0.3)
    res = step_residual(sphere, prev.density, sol.increment.values, 1.0, g, 0.3, sol.normalization_constant)
    assert np.max(np.abs(res)) <= 1e-10


@pytest.mark.parametrize("which", ["torus", "negative"])
def test_torus_newton(which, request):
    bg = request.getfixturevalue(which)
    prev = make_metric(random_potential(bg, 16, 4, 0.1))
    g = _g(bg, 17, 0.1)
    sol = solve_step(prev, 2.0, g)
    res = step_residual(bg, prev.density, sol.raw_increment, 2.0, g)
    assert np.max(np.abs(res)) <= 1e-10
    assert sol.newton_iters <= 8


def test_torus_rejects_negative_a_and_twist(torus):
    m = base_metric(torus)
    with pytest.raises(BadInput):
        solve_step(m, -1.0, np.zeros(torus.shape))
    with pytest.raises(BadInput):
        solve_step_twisted(m, 1.0, np.zeros(torus.shape), 0.3)


def test_failure_when_iterations_exhausted(sphere):
    prev = make_metric(random_potential(sphere, 18, 5, 0.1))
    with pytest.raises(SolverFailure):
        solve_step(prev, 1.0, _g(sphere, 19, 0.3), SolverConfig(max_newton=1))


def test_rejects_nonfinite_data(sphere):
    g = np.zeros(64)
    g[0] = np.inf
    with pytest.raises(BadInput):
        solve_step(base_metric(sphere), 1.0, g)


@pytest.mark.parametrize("bad", [dict(residual_tol=0), dict(max_newton=0), dict(residual_tol=2.0)])
def test_solver_config_validation(bad):
    with pytest.raises(BadInput):
        SolverConfig(**bad)
