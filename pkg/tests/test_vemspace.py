import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vemocp.mesh import generate_cartesian, generate_star, polygon_geometry
from vemocp.polybasis import (
    MonomialBasis,
    derivative_matrix,
    dim_poly,
    edge_rule_params,
    eval_basis,
    eval_grad,
    fan_rule,
    gauss_lobatto01,
    lagrange_basis_1d,
    laplacian_matrix,
)
from vemocp.vemspace import (
    LocalSpaceCache,
    build_local_space,
    dof_layout,
    interpolate,
    local_dof_count,
    local_spaces,
)

from conftest import NONCONVEX, PENTAGON, UNIT_SQUARE, polygons


def _rel(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


@pytest.mark.parametrize("nv, k, n", [(4, 1, 4), (4, 2, 9), (5, 3, 18), (6, 4, 30)])
def test_local_dof_count(nv, k, n):
    assert local_dof_count(nv, k) == n


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_global_dof_count_cartesian(k):
    n = 3
    mesh = generate_cartesian(n)
    lay = dof_layout(mesh, k)
    assert lay.n_dofs == (n + 1) ** 2 + 2 * n * (n + 1) * (k - 1) + n * n * dim_poly(k - 2)
    # every cell sees its own local count
    assert all(len(d) == local_dof_count(4, k) for d in lay.cell_dofs)


def test_shared_edge_dofs_match():
    # neighbouring cells traverse a shared edge in opposite directions
    mesh = generate_star(3)
    k = 4
    lay = dof_layout(mesh, k)
    spaces = local_spaces(mesh, k)
    for e in range(mesh.n_edges):
        c0, c1 = mesh.edge_cells[e]
        if c1 < 0:
            continue
        coords = []
        for c in (c0, c1):
            i = list(mesh.cell_edges[c]).index(e)
            glob = lay.cell_dofs[c][spaces[c].edge_node_dofs(i)]
            coords.append(lay.coords[glob])
        np.testing.assert_allclose(coords[0], coords[1][::-1], atol=1e-14)


@pytest.mark.parametrize("xy", [UNIT_SQUARE, PENTAGON, NONCONVEX], ids=["square", "pentagon", "nonconvex"])
@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_projectors_reproduce_polynomials(xy, k):
    sp = build_local_space(xy, k)
    eye = np.eye(dim_poly(k))
    assert _rel(sp.proj.PiNabla @ sp.D, eye) < 1e-10
    assert _rel(sp.proj.Pi0k @ sp.D, eye) < 1e-10
    # gradient projection of m_a equals (1/h) d m_a expressed in P_{k-1}
    dx = derivative_matrix(k, 0).T / sp.basis.h
    dy = derivative_matrix(k, 1).T / sp.basis.h
    assert _rel(sp.proj.Pi0GradX @ sp.D, dx) < 1e-10
    assert _rel(sp.proj.Pi0GradY @ sp.D, dy) < 1e-10


@settings(max_examples=25, deadline=None)
@given(polygons(), st.integers(1, 4))
def test_projector_exactness_random_polygons(xy, k):
    sp = build_local_space(xy, k)
    eye = np.eye(dim_poly(k))
    # L2 error of each projected monomial, relative to its norm
    for P in (sp.proj.PiNabla, sp.proj.Pi0k):
        err = P @ sp.D - eye
        assert np.sqrt(np.max(np.diag(err.T @ sp.gram @ err) / np.diag(sp.gram))) < 1e-12
    # coefficient error is limited by the monomial Gram conditioning at high k
    tol = max(1e-10, np.finfo(float).eps * np.linalg.cond(sp.gram))
    assert _rel(sp.proj.PiNabla @ sp.D, eye) < tol
    assert _rel(sp.proj.Pi0k @ sp.D, eye) < tol


@settings(max_examples=25, deadline=None)
@given(polygons(), st.integers(0, 2**31))
def test_k1_gradient_projection_matches_boundary_trapezoid(xy, seed):
    # for k = 1: int_E grad v = int_dE v n, exact by the trapezoid rule on each edge
    sp = build_local_space(xy, 1)
    v = np.random.default_rng(seed).normal(size=sp.n_dofs)
    g = sp.geom
    vb = np.roll(v, -1)
    mean_grad = (g.edge_lengths * 0.5 * (v + vb)) @ g.normals / g.area
    got = np.array([sp.proj.Pi0GradX[0] @ v, sp.proj.Pi0GradY[0] @ v])
    np.testing.assert_allclose(got, mean_grad, rtol=1e-10, atol=1e-10 * np.abs(mean_grad).max())


def test_k1_l2_projection_equals_h1_projection():
    sp = build_local_space(PENTAGON, 1)
    np.testing.assert_allclose(sp.proj.Pi0k, sp.proj.PiNabla, atol=1e-13)


def _edge_trace_integrals(sp, v, weight):
    """int over each edge of trace(v) * weight(points, normal), Gauss-Legendre exact."""
    k = sp.k
    nodes = gauss_lobatto01(k + 1)[0]
    t, w = edge_rule_params(3 * k + 4)
    phi = lagrange_basis_1d(nodes, t)
    g = sp.geom
    nv = len(g.vertices)
    total = 0.0
    for i in range(nv):
        a, b = g.vertices[i], g.vertices[(i + 1) % nv]
        pts = a + t[:, None] * (b - a)
        trace = phi @ v[sp.edge_node_dofs(i)]
        total += g.edge_lengths[i] * (w * trace * weight(pts, g.normals[i])).sum()
    return total


@pytest.mark.parametrize("xy", [UNIT_SQUARE, PENTAGON, NONCONVEX], ids=["square", "pentagon", "nonconvex"])
@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_pi_nabla_boundary_average_constraint(xy, k):
    sp = build_local_space(xy, k)
    v = np.random.default_rng(k).normal(size=sp.n_dofs)
    coef = sp.proj.PiNabla @ v
    exact_v = _edge_trace_integrals(sp, v, lambda p, n: 1.0)
    g = sp.geom
    t, w = edge_rule_params(k)
    proj = sum(
        g.edge_lengths[i] * w @ (eval_basis(sp.basis, g.vertices[i] + t[:, None] * (g.vertices[(i + 1) % len(g.vertices)] - g.vertices[i])) @ coef)
        for i in range(len(g.vertices))
    )
    assert abs(proj - exact_v) <= 1e-12 * g.perimeter * np.abs(v).max()


@pytest.mark.parametrize("xy", [UNIT_SQUARE, PENTAGON], ids=["square", "pentagon"])
@pytest.mark.parametrize("k", [2, 3, 4])
def test_pi_nabla_orthogonality_by_parts(xy, k):
    # (grad(PiNabla v - v), grad m_a)_E = 0, the v-part integrated by parts
    sp = build_local_space(xy, k)
    v = np.random.default_rng(7).normal(size=sp.n_dofs)
    coef = sp.proj.PiNabla @ v
    g = sp.geom
    q = fan_rule(g.centroid, g.vertices, 2 * k)
    grads = eval_grad(sp.basis, q.points)
    lhs = np.einsum("q,qad,qd->a", q.weights, grads, np.einsum("qbd,b->qd", grads, coef))
    nv = len(g.vertices)
    moments = v[nv * k :]
    lap = laplacian_matrix(k) / sp.basis.h**2
    area_part = g.area * (lap @ moments)
    for a in range(dim_poly(k)):
        bnd = _edge_trace_integrals(sp, v, lambda p, n: eval_grad(sp.basis, p)[:, a, :] @ n)
        rhs = -area_part[a] + bnd
        assert abs(lhs[a] - rhs) <= 1e-12 * max(1.0, np.abs(lhs).max())


@pytest.mark.parametrize("k", [2, 3, 4])
def test_pi0k_matches_moment_dofs(k):
    sp = build_local_space(PENTAGON, k)
    v = np.random.default_rng(11).normal(size=sp.n_dofs)
    nv = len(sp.geom.vertices)
    q = fan_rule(sp.geom.centroid, sp.geom.vertices, 2 * k)
    low = MonomialBasis(sp.basis.center, sp.basis.h, k - 2)
    vals = eval_basis(sp.basis, q.points) @ (sp.proj.Pi0k @ v)
    got = (q.weights * vals) @ eval_basis(low, q.points) / sp.geom.area
    np.testing.assert_allclose(got, v[nv * k :], atol=1e-12)


def test_pi0k_of_constant_vertex_values_k1():
    sp = build_local_space(UNIT_SQUARE, 1)
    np.testing.assert_allclose(sp.proj.Pi0k @ np.ones(4), [1, 0, 0], atol=1e-14)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_pi_nabla_is_idempotent_on_dofs(k):
    sp = build_local_space(NONCONVEX, k)
    P = sp.D @ sp.proj.PiNabla
    np.testing.assert_allclose(P @ P, P, atol=1e-10)


def test_cache_matches_direct_build():
    mesh = generate_cartesian(4)
    cache = LocalSpaceCache()
    cached = local_spaces(mesh, 3, cache)
    assert cache.hits == mesh.n_cells - 1
    for c in (0, 5, 15):
        direct = build_local_space(mesh.vertices[mesh.cells[c]], 3)
        for name in ("PiNabla", "Pi0k", "Pi0GradX", "Pi0GradY"):
            np.testing.assert_allclose(getattr(cached[c].proj, name), getattr(direct.proj, name), atol=1e-10)
        np.testing.assert_allclose(cached[c].basis.center, direct.basis.center, atol=1e-14)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_interpolation_of_polynomial_is_exact(k):
    mesh = generate_star(3)
    lay = dof_layout(mesh, k)
    spaces = local_spaces(mesh, k)
    ex = [(a, b) for a in range(k + 1) for b in range(k + 1 - a)]
    coef = np.random.default_rng(k).normal(size=len(ex))

    def p(x1, x2):
        return sum(c * x1**a * x2**b for c, (a, b) in zip(coef, ex))

    v = interpolate(lay, mesh, p, spaces)
    for c, sp in enumerate(spaces):
        q = fan_rule(sp.geom.centroid, sp.geom.vertices, 2 * k)
        got = eval_basis(sp.basis, q.points) @ (sp.proj.Pi0k @ v[lay.cell_dofs[c]])
        np.testing.assert_allclose(got, p(q.points[:, 0], q.points[:, 1]), atol=1e-10)


def test_dirichlet_mask_covers_dirichlet_edges():
    mesh = generate_cartesian(2)
    lay = dof_layout(mesh, 2)
    # control edge x = 0 is free except for its corner endpoints shared with Dirichlet edges
    free_pts = lay.coords[~lay.dirichlet]
    finite = free_pts[np.isfinite(free_pts[:, 0])]
    assert np.all(finite[:, 0] < 1 - 1e-12)
    assert np.all((finite[:, 1] > 1e-12) & (finite[:, 1] < 1 - 1e-12))


def test_order_zero_rejected():
    with pytest.raises(ValueError):
        dof_layout(generate_cartesian(1), 0)


def test_basis_scaled_by_diameter():
    sp = build_local_space(PENTAGON, 2)
    assert sp.basis.h == pytest.approx(polygon_geometry(PENTAGON).diameter)
    assert isinstance(sp.basis, MonomialBasis)
