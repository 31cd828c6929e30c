import numpy as np
import pytest
import scipy.sparse.linalg as spla

from vemocp.experiments import make_mesh
from vemocp.forms import STABFREE
from vemocp.mesh import generate_cartesian, generate_star
from vemocp.ocp import (
    OcpConfig,
    assemble,
    constant,
    control_coupling,
    control_mass,
    control_space,
    discretize,
    evaluate_functional,
    rounding_floor,
    solve,
    solve_ocp,
    solve_state,
)
from vemocp.presets import TEST1, TEST2
from vemocp.vemspace import dof_layout, interpolate


def test_constant_field_shape():
    f = constant(2.5)
    np.testing.assert_array_equal(f(np.zeros(3), np.zeros(3)), [2.5, 2.5, 2.5])
    assert f.constant_value == 2.5


@pytest.mark.parametrize(
    "kwargs, msg",
    [
        (dict(k=0), "order"),
        (dict(k=1, k_u=0), "control degree"),
        (dict(alpha=0.0), "alpha"),
        (dict(alpha=-1.0), "alpha"),
        (dict(scheme="bogus"), "scheme"),
        (dict(k=2, scheme=STABFREE), "k = 1"),
        (dict(sigma=0.0), "sigma"),
    ],
)
def test_config_rejects(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        OcpConfig(**kwargs)


def test_config_defaults():
    cfg = OcpConfig(k=3)
    assert cfg.k_u == 3
    assert OcpConfig(k=1, scheme=STABFREE, sigma=0.0).scheme == STABFREE


# ---------------------------------------------------------------------------
# control space


def test_control_mass_single_edge():
    mesh = generate_cartesian(1)
    cs = control_space(mesh, 1)
    np.testing.assert_allclose(control_mass(mesh, cs).toarray(), [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], rtol=1e-14)


def test_control_mass_two_edges():
    mesh = generate_cartesian(2)
    cs = control_space(mesh, 1)
    assert cs.n_dofs == 3
    M = control_mass(mesh, cs).toarray()
    order = np.argsort(cs.node_coords[:, 1])
    M = M[np.ix_(order, order)]
    np.testing.assert_allclose(np.diag(M), [1 / 6, 1 / 3, 1 / 6], rtol=1e-14)
    np.testing.assert_allclose(M.sum(), 1.0, rtol=1e-14)


@pytest.mark.parametrize("degree", [1, 2, 3, 4])
def test_control_mass_integrates_polynomials(degree):
    mesh = generate_cartesian(3)
    cs = control_space(mesh, degree)
    M = control_mass(mesh, cs)
    u = cs.node_coords[:, 1] ** degree
    # int_0^1 x2^(2 degree)
    assert u @ (M @ u) == pytest.approx(1.0 / (2 * degree + 1), rel=1e-13)
    assert M.sum() == pytest.approx(1.0, rel=1e-13)


def test_control_coupling_entries():
    mesh = generate_cartesian(1)
    layout = dof_layout(mesh, 2)
    cs = control_space(mesh, 1)
    C = control_coupling(mesh, cs, layout).toarray()
    e = cs.edges[0]
    mid = layout.edge_dofs[e, 1]
    # int_0^1 4 t (1 - t) (1 - t) dt
    np.testing.assert_allclose(C[mid], [1 / 3, 1 / 3], rtol=1e-14)
    assert C.sum() == pytest.approx(1.0, rel=1e-14)


@pytest.mark.parametrize("k, k_u", [(1, 1), (2, 1), (3, 3), (4, 2)])
def test_control_coupling_reproduces_boundary_integral(k, k_u):
    mesh = generate_cartesian(2)
    layout = dof_layout(mesh, k)
    cs = control_space(mesh, k_u)
    C = control_coupling(mesh, cs, layout)
    y = interpolate(layout, mesh, lambda x1, x2: x2**k)
    u = cs.node_coords[:, 1] ** k_u
    assert y @ (C @ u) == pytest.approx(1.0 / (k + k_u + 1), rel=1e-12)


def test_empty_control_boundary():
    from vemocp.mesh import all_dirichlet

    with pytest.raises(ValueError, match="empty control"):
        control_space(generate_cartesian(2, tag_rule=all_dirichlet), 1)


# ---------------------------------------------------------------------------
# saddle-point system


def _zero_config(k=2):
    return OcpConfig(k=k, f=constant(0.0), y_d=constant(0.0), g=constant(0.0))


def test_zero_data_gives_zero_solution():
    sol = solve_ocp(generate_star(3), _zero_config())
    assert not sol.y.any() and not sol.u.any() and not sol.p.any()
    assert evaluate_functional(sol) == 0.0


@pytest.mark.parametrize("k", [1, 2, 3])
def test_saddle_matrix_is_exactly_symmetric(k):
    sys = assemble(generate_star(3), TEST1.config(k=k))
    assert abs(sys.matrix - sys.matrix.T).max() == 0.0


def test_block_sizes_cartesian_2x2_k1():
    sys = assemble(generate_cartesian(2), TEST1.config(k=1))
    assert sys.n_u == 3
    # 9 vertices, Dirichlet on x1 = 1, x2 = 0 and x2 = 1
    assert sys.n_free == 2
    assert sys.matrix.shape == (2 * 2 + 3,) * 2


@pytest.mark.parametrize("k", [1, 2, 3])
def test_kkt_conditions_hold(k):
    sol = solve_ocp(generate_cartesian(4), TEST1.config(k=k))
    rhs = np.linalg.norm(sol.system.rhs)
    assert sol.residual <= 1e-10
    assert max(sol.block_residuals()) <= 1e-9 * rhs
    assert evaluate_functional(sol) >= 0.0


def test_dirichlet_values_imposed():
    mesh = make_mesh("cartesian:5", TEST2)
    sol = solve_ocp(mesh, TEST2.config(k=2))
    np.testing.assert_array_equal(sol.y[sol.system.fixed], 1.0)
    assert not sol.p[sol.system.fixed].any()


def test_functional_matches_direct_evaluation():
    # observation everywhere, y_d = 0: J = 1/2 ||Pi0 y||^2 + alpha/2 ||u||^2
    mesh = generate_cartesian(3)
    cfg = OcpConfig(k=1, alpha=0.5, f=constant(1.0), y_d=constant(0.0))
    sol = solve_ocp(mesh, cfg)
    s = sol.system
    y_term = 0.0
    for c, space in enumerate(s.disc.spaces):
        coef = space.proj.Pi0k @ sol.y[s.disc.layout.cell_dofs[c]]
        y_term += coef @ space.gram @ coef
    expected = 0.5 * y_term + 0.25 * sol.u @ (s.MC @ sol.u)
    assert evaluate_functional(sol) == pytest.approx(expected, rel=1e-12)


def test_discretization_mismatch_rejected():
    mesh = generate_cartesian(2)
    with pytest.raises(ValueError, match="does not match"):
        assemble(mesh, TEST1.config(k=2), discretize(mesh, 1))


def test_discretization_is_reusable():
    mesh = generate_cartesian(4)
    disc = discretize(mesh, 2)
    a = solve_ocp(mesh, TEST1.config(k=2, sigma=1.0), disc)
    b = solve_ocp(mesh, TEST1.config(k=2, sigma=1.0))
    np.testing.assert_array_equal(a.y, b.y)


def test_stabfree_scheme_solves():
    mesh = generate_star(4)
    sol = solve_ocp(mesh, TEST1.config(k=1, scheme=STABFREE))
    assert sol.residual <= 1e-10
    assert len(sol.disc.stabfree()) == mesh.n_cells


def test_rounding_floor_positive():
    sys = assemble(generate_cartesian(2), TEST1.config(k=1))
    z = spla.spsolve(sys.matrix.tocsc(), sys.rhs)
    fl = rounding_floor(sys.matrix, z, np.linalg.norm(sys.rhs))
    assert 0.0 < fl < 1e-13


def test_solve_reports_residual():
    sol = solve(assemble(generate_cartesian(4), TEST1.config(k=2)))
    assert 0.0 <= sol.residual <= 1e-10
    assert sol.floor >= 0.0


# ---------------------------------------------------------------------------
# state equation


@pytest.mark.parametrize("mesh_fn", [lambda: generate_cartesian(3), lambda: generate_star(3)], ids=["cart", "star"])
@pytest.mark.parametrize("k", [1, 2, 3])
def test_state_patch_test(mesh_fn, k):
    mesh = mesh_fn()
    coef = np.random.default_rng(k).normal(size=3)

    def p(x1, x2):
        return coef[0] * x1**k + coef[1] * x1 * x2 ** (k - 1) + coef[2] * x2**k + 0.5

    def grad(x1, x2):
        gx = coef[0] * k * x1 ** (k - 1) + coef[1] * x2 ** (k - 1)
        gy = coef[1] * (k - 1) * x1 * x2 ** max(k - 2, 0) + coef[2] * k * x2 ** (k - 1)
        return gx, gy

    def lap(x1, x2):
        out = coef[0] * k * (k - 1) * x1 ** max(k - 2, 0) + coef[2] * k * (k - 1) * x2 ** max(k - 2, 0)
        if k >= 3:
            out = out + coef[1] * (k - 1) * (k - 2) * x1 * x2 ** (k - 3)
        return out

    kappa = 1.5

    def flux(x1, x2, n1, n2):
        gx, gy = grad(x1, x2)
        return kappa * (gx * n1 + gy * n2)

    y, disc = solve_state(
        mesh, k, constant(kappa), constant(1.0), lambda a, b: -kappa * lap(a, b) + p(a, b), p, flux=flux
    )
    ref = interpolate(disc.layout, mesh, p, disc.spaces)
    assert np.abs(y - ref).max() < 1e-9

