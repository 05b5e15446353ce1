import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonlocal_hom.energy import DensitySpec, Plan, eval_F, grad_F, plaplace, power_density, weighted, anisotropic
from nonlocal_hom.grid import Domain, GridField, build_layer_mask, sample_function
from nonlocal_hom.kernel import indicator_ball, lattice_weights
from nonlocal_hom.minimize import MinimizeOptions, box_problem, minimize_smooth, solve_box, solve_cell, solve_dirichlet

from oracles import dense_quadratic


def quartic():
    return DensitySpec(dim=1, p=4.0, support=1.0, phi=lambda z: np.sum(z * z, -1) ** 2, dphi=lambda z: 4 * np.sum(z * z, -1)[:, None] * z)


def tight():
    return MinimizeOptions(grad_tol=1e-11)


# --- Dirichlet problems


def test_constant_datum_gives_constant_minimizer():
    dom = Domain(1, 1.0, 0.01)
    sol = solve_dirichlet(plaplace(indicator_ball(1), 3), 0.1, lambda x: np.full(len(x), 0.7), 1.0, dom)
    assert sol.value == 0.0
    np.testing.assert_allclose(sol.field.values, 0.7, atol=1e-14)


def test_affine_datum_gives_affine_minimizer():
    dom = Domain(1, 1.0, 0.05)
    spec = power_density(indicator_ball(1), 2)
    sol = solve_dirichlet(spec, 0.1, lambda x: x[:, 0], 1.0, dom, tight())
    np.testing.assert_allclose(sol.field.values[:, 0], dom.coords()[:, 0], atol=1e-9)
    assert sol.converged


def _dense_dirichlet(spec, dom, eps, g, width):
    K = dense_quadratic(spec, dom, eps)
    fixed = build_layer_mask(dom, width).selected.ravel()
    gv = sample_function(dom, g).values.ravel()
    u = gv.copy()
    f = ~fixed
    u[f] = np.linalg.solve(K[np.ix_(f, f)], -K[np.ix_(f, fixed)] @ gv[fixed])
    return u, 0.5 * u @ K @ u


@pytest.mark.parametrize(
    "spec",
    [power_density(indicator_ball(1), 2), weighted(indicator_ball(1), 2), anisotropic(indicator_ball(1), 2)],
    ids=["power", "weighted", "anisotropic"],
)
def test_quadratic_matches_dense_solve_1d(spec):
    dom = Domain(1, 1.0, 0.05)
    g = lambda x: np.sin(3 * x[:, 0]) + x[:, 0] ** 2
    u, val = _dense_dirichlet(spec, dom, 0.1, g, 0.1)
    sol = solve_dirichlet(spec, 0.1, g, 1.0, dom, tight())
    assert sol.value == pytest.approx(val, rel=1e-6)
    np.testing.assert_allclose(sol.field.values.ravel(), u, rtol=1e-6, atol=1e-8)


def test_quadratic_matches_dense_solve_2d():
    dom = Domain(2, 1.0, 0.1)
    spec = weighted(indicator_ball(2), 2)
    g = lambda x: x[:, 0] * x[:, 1] + np.cos(2 * x[:, 0])
    u, val = _dense_dirichlet(spec, dom, 0.2, g, 0.2)
    sol = solve_dirichlet(spec, 0.2, g, 1.0, dom, tight())
    assert sol.value == pytest.approx(val, rel=1e-6)
    np.testing.assert_allclose(sol.field.values.ravel(), u, rtol=1e-6, atol=1e-8)


def test_quartic_five_free_nodes_against_coordinate_search():
    # 11 nodes, layer of 3 nodes per side, 5 free values
    dom = Domain(1, 1.0, 0.1)
    spec = quartic()
    g = lambda x: x[:, 0] + x[:, 0] ** 2
    eps, r = 0.2, 1.5
    sol = solve_dirichlet(spec, eps, g, r, dom, tight())
    layer = build_layer_mask(dom, eps * r).selected
    assert (~layer).sum() == 5

    base = sample_function(dom, g).values[:, 0]
    free = np.flatnonzero(~layer)
    grid = np.round(np.arange(-0.5, 2.5 + 1e-9, 1e-3), 3)
    x = base.copy()

    def energy(v):
        return eval_F(spec, GridField(dom, v), eps).total

    best = energy(x)
    for _ in range(60):
        improved = False
        for i in free:
            trial = np.repeat(x[None], len(grid), 0)
            trial[:, i] = grid
            vals = [energy(t) for t in trial[max(0, np.searchsorted(grid, x[i]) - 40): np.searchsorted(grid, x[i]) + 40]]
            lo = max(0, np.searchsorted(grid, x[i]) - 40)
            j = int(np.argmin(vals))
            if vals[j] < best - 1e-15:
                best, x = vals[j], trial[lo + j]
                improved = True
        if not improved:
            break
    assert sol.value <= best + 1e-12
    assert sol.value == pytest.approx(best, rel=1e-5)
    np.testing.assert_allclose(sol.field.values[free, 0], x[free], atol=2e-3)


def test_nonconvex_rejected():
    spec = DensitySpec(dim=1, p=2.0, support=1.0, phi=lambda z: np.sin(z[:, 0]) ** 2, dphi=lambda z: np.sin(2 * z), convex_in_z=False)
    with pytest.raises(ValueError, match="solver requires convexity"):
        solve_dirichlet(spec, 0.1, lambda x: x[:, 0], 1.0, Domain(1, 1.0, 0.01))


def test_budget_exhaustion_is_reported():
    dom = Domain(1, 1.0, 0.01)
    sol = solve_dirichlet(plaplace(indicator_ball(1), 4), 0.1, lambda x: np.sin(5 * x[:, 0]), 1.0, dom, MinimizeOptions(max_iters=2))
    assert not sol.converged and sol.iterations == 2


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2.0, 3.0, 4.0]))
def test_descent_fidelity_stationarity(seed, p):
    dom = Domain(1, 1.0, 0.02)
    rng = np.random.default_rng(seed)
    c = rng.normal(size=3)
    g = lambda x: c[0] * np.sin(3 * x[:, 0]) + c[1] * x[:, 0] + c[2] * x[:, 0] ** 2
    spec = weighted(indicator_ball(1), p)
    sol = solve_dirichlet(spec, 0.1, g, 1.0, dom)
    hist = np.array(sol.history)
    assert np.all(np.diff(hist) <= 1e-12 * abs(hist[0]))
    layer = build_layer_mask(dom, 0.1).selected
    assert np.array_equal(sol.field.values[layer], sample_function(dom, g).values[layer])
    assert sol.converged
    gr = grad_F(spec, sol.field, 0.1).values[~layer]
    assert np.abs(gr).max() <= sol.grad_tol * (1 + 1e-6)


def test_minimize_smooth_quadratic():
    A = np.diag([1.0, 10.0, 100.0])
    b = np.array([1.0, -2.0, 3.0])
    x, E, it, gn, conv, hist, tol = minimize_smooth(lambda v: (0.5 * v @ A @ v - b @ v, A @ v - b), np.zeros(3), None, MinimizeOptions(grad_tol=1e-12))
    assert conv
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-10)


# --- cell problems


def _lattice_sum(spec, M, N, p):
    idx, xi, w = lattice_weights(spec.kernel, 1.0 / N, spec.radius)
    z = xi @ np.atleast_2d(M).T
    return float(np.sum(w * spec.phi(z)))


@pytest.mark.parametrize("dim", [1, 2])
def test_cell_x_independent_is_lattice_sum(dim):
    spec = plaplace(indicator_ball(dim), 3)
    M = np.ones((1, dim))
    N = 32 if dim == 1 else 8
    sol = solve_cell(spec, M, N)
    assert np.abs(sol.field.values).max() < 1e-10
    assert sol.value == pytest.approx(_lattice_sum(spec, M, N, 3), rel=1e-12)


def test_cell_zero_probe():
    sol = solve_cell(weighted(indicator_ball(1)), [[0.0]], 16)
    assert sol.value == 0.0 and not sol.field.values.any()


def test_cell_weighted_sandwich():
    k = indicator_ball(1)
    val = solve_cell(weighted(k, 2, 0.5), [[1.0]], 32).value
    base = _lattice_sum(power_density(k, 2), [[1.0]], 32, 2)
    assert base <= val <= 2.25 * base
    assert val > base * 1.01


def test_cell_gauge():
    spec = weighted(indicator_ball(1), 4)
    sol = solve_cell(spec, [[1.0]], 16)
    assert abs(sol.field.values.mean()) < 1e-14
    plan = Plan(spec, sol.field.domain, 1.0, affine=np.array([[1.0]]))
    a = plan.energy(sol.field.values).total
    b = plan.energy(sol.field.values + 0.375).total
    assert a == pytest.approx(b, rel=1e-13)


def test_cell_requires_periodic_density():
    from nonlocal_hom.energy import random_checkerboard

    with pytest.raises(ValueError, match="periodic"):
        solve_cell(random_checkerboard(indicator_ball(1)), [[1.0]], 8)


# --- box problems


@pytest.mark.parametrize("R", [2, 4])
def test_box_x_independent(R):
    spec = power_density(indicator_ball(1), 2)
    val = solve_box(spec, [[1.5]], R, 16).value
    assert val == pytest.approx(_lattice_sum(spec, [[1.5]], 16, 2), rel=1e-10)


def test_box_zero_probe():
    assert solve_box(weighted(indicator_ball(1)), [[0.0]], 4, 16).value == 0.0


def test_box_layer_and_exterior():
    spec = weighted(indicator_ball(1))
    plan, x0, free, dom = box_problem(spec, [[1.0]], 4, 8)
    coords = dom.coords()[..., 0] - 8 / 8
    np.testing.assert_allclose(x0[..., 0], coords, atol=1e-12)
    # free nodes keep distance one from both ends of [0, 4)
    assert coords[free].min() == pytest.approx(1.0) and coords[free].max() <= 3.0 + 1e-12


def test_box_sequence_approaches_cell():
    spec = weighted(indicator_ball(1))
    cell = solve_cell(spec, [[1.0]], 32).value
    gaps = [abs(solve_box(spec, [[1.0]], R, 32).value - cell) for R in (4, 8, 16)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] / cell < 5e-3
