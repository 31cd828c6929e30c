"""Enhanced virtual element space: DOF layout and computable projectors.

Local DOF order on a cell with ``nv`` vertices and order ``k``:

* ``nv`` vertex values (counterclockwise),
* ``k - 1`` Gauss-Lobatto point values per edge, edge ``i`` running from
  vertex ``i`` to vertex ``i + 1``,
* ``dim P_{k-2}`` scaled moments ``|E|^{-1} int_E v m_a``.

Projector matrices map a local DOF vector to monomial coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from .mesh import DIRICHLET, CellGeometry, PolyMesh, polygon_geometry
from .polybasis import (
    MonomialBasis,
    QuadratureRule,
    derivative_matrix,
    dim_poly,
    eval_basis,
    eval_grad,
    fan_rule,
    gauss_lobatto01,
    laplacian_matrix,
)


class ProjectorError(ArithmeticError):
    """A local projector system could not be solved."""


@dataclass(frozen=True, eq=False)
class DofLayout:
    k: int
    n_dofs: int
    cell_dofs: tuple[np.ndarray, ...]
    edge_dofs: np.ndarray  # (ne, k+1) global dofs along each edge, canonical orientation
    coords: np.ndarray  # (n_dofs, 2); NaN for moment dofs
    dirichlet: np.ndarray  # bool mask

    @property
    def n_boundary_type(self) -> int:
        return int(np.isfinite(self.coords[:, 0]).sum())


def local_dof_count(n_vertices: int, k: int) -> int:
    return n_vertices * k + dim_poly(k - 2)


def dof_layout(mesh: PolyMesh, k: int) -> DofLayout:
    if k < 1:
        raise ValueError("order k must be >= 1")
    nv, ne, nc = mesh.n_vertices, mesh.n_edges, mesh.n_cells
    nm = dim_poly(k - 2)
    n_dofs = nv + ne * (k - 1) + nc * nm
    edge_dofs = np.empty((ne, k + 1), dtype=np.int64)
    edge_dofs[:, 0] = mesh.edges[:, 0]
    edge_dofs[:, k] = mesh.edges[:, 1]
    if k > 1:
        edge_dofs[:, 1:k] = nv + np.arange(ne * (k - 1)).reshape(ne, k - 1)

    coords = np.full((n_dofs, 2), np.nan)
    coords[:nv] = mesh.vertices
    if k > 1:
        t, _ = gauss_lobatto01(k + 1)
        a = mesh.vertices[mesh.edges[:, 0]]
        b = mesh.vertices[mesh.edges[:, 1]]
        pts = a[:, None, :] + t[None, 1:k, None] * (b - a)[:, None, :]
        coords[nv : nv + ne * (k - 1)] = pts.reshape(-1, 2)

    cell_dofs = []
    mom0 = nv + ne * (k - 1)
    for c, loop in enumerate(mesh.cells):
        parts = [loop]
        if k > 1:
            for i, e in enumerate(mesh.cell_edges[c]):
                inner = edge_dofs[e, 1:k]
                if loop[i] != mesh.edges[e, 0]:
                    inner = inner[::-1]
                parts.append(inner)
        parts.append(mom0 + c * nm + np.arange(nm))
        cell_dofs.append(np.concatenate(parts).astype(np.int64))

    dirichlet = np.zeros(n_dofs, dtype=bool)
    for e in mesh.edges_with_tag(DIRICHLET):
        dirichlet[edge_dofs[e]] = True
    return DofLayout(k, n_dofs, tuple(cell_dofs), edge_dofs, coords, dirichlet)


@dataclass(frozen=True, eq=False)
class ProjectorSet:
    PiNabla: np.ndarray
    Pi0k: np.ndarray
    Pi0GradX: np.ndarray
    Pi0GradY: np.ndarray


@dataclass(frozen=True, eq=False)
class LocalVemSpace:
    """Per-cell data: geometry, basis, DOF matrix, Gram matrix and projectors."""

    k: int
    geom: CellGeometry
    basis: MonomialBasis
    D: np.ndarray  # (n_dofs, dim P_k): dof_i(m_a)
    gram: np.ndarray  # (dim P_k, dim P_k): (m_a, m_b)_E
    proj: ProjectorSet
    quad: QuadratureRule  # exact to degree 2k

    @property
    def n_dofs(self) -> int:
        return self.D.shape[0]

    @property
    def n_vertices(self) -> int:
        return len(self.geom.vertices)

    def edge_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Gauss-Lobatto parameters and weights on [0, 1] used for edge DOFs."""
        return gauss_lobatto01(self.k + 1)

    def edge_node_dofs(self, i: int) -> np.ndarray:
        """Local DOF indices of the k+1 nodes on edge i, from vertex i to i+1."""
        nv, k = self.n_vertices, self.k
        inner = nv + i * (k - 1) + np.arange(k - 1)
        return np.concatenate([[i], inner, [(i + 1) % nv]]).astype(np.int64)

    def translated(self, offset: np.ndarray) -> "LocalVemSpace":
        g = self.geom
        geom = replace(g, vertices=g.vertices + offset, centroid=g.centroid + offset)
        basis = replace(self.basis, center=self.basis.center + offset)
        quad = replace(self.quad, points=self.quad.points + offset)
        return replace(self, geom=geom, basis=basis, quad=quad)


def _dof_matrix(geom: CellGeometry, basis: MonomialBasis, gram: np.ndarray, k: int) -> np.ndarray:
    nv = len(geom.vertices)
    rows = [eval_basis(basis, geom.vertices)]
    if k > 1:
        t, _ = gauss_lobatto01(k + 1)
        a = geom.vertices
        b = np.roll(a, -1, axis=0)
        pts = a[:, None, :] + t[None, 1:k, None] * (b - a)[:, None, :]
        rows.append(eval_basis(basis, pts.reshape(-1, 2)))
    nm = dim_poly(k - 2)
    rows.append(gram[:nm, :] / geom.area)
    D = np.vstack(rows)
    assert D.shape[0] == local_dof_count(nv, k)
    return D


def _boundary_node_weights(space_geom: CellGeometry, k: int):
    """Yield (edge index, node points, node weights*|e|, local dofs) for each edge."""
    t, w = gauss_lobatto01(k + 1)
    a = space_geom.vertices
    nv = len(a)
    for i in range(nv):
        b = a[(i + 1) % nv]
        pts = a[i] + t[:, None] * (b - a[i])
        inner = nv + i * (k - 1) + np.arange(k - 1)
        dofs = np.concatenate([[i], inner, [(i + 1) % nv]]).astype(np.int64)
        yield i, pts, w * space_geom.edge_lengths[i], dofs


def build_pi_nabla(geom: CellGeometry, basis: MonomialBasis, D: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """H1 projector with the constant fixed by the boundary average.

    Returns ``(PiNabla, B)`` where ``B`` is the right-hand side matrix.
    """
    n = dim_poly(k)
    N = D.shape[0]
    B = np.zeros((n, N))
    perim = geom.perimeter
    for i, pts, wts, dofs in _boundary_node_weights(geom, k):
        grads = eval_grad(basis, pts)  # (nq, n, 2)
        dn = grads @ geom.normals[i]  # (nq, n)
        np.add.at(B.T, dofs, wts[:, None] * dn)
        B[0, dofs] += wts / perim
    if k >= 2:
        lap = laplacian_matrix(k)  # rows: h^2 * Lap m_a over P_{k-2}
        nm = lap.shape[1]
        B[:, N - nm :] -= geom.area * lap / basis.h**2
    G = B @ D
    try:
        lu = sla.lu_factor(G, check_finite=True)
        P = sla.lu_solve(lu, B)
    except (sla.LinAlgError, ValueError) as exc:
        raise ProjectorError(f"singular PiNabla system: {exc}") from exc
    if not np.all(np.isfinite(P)):
        raise ProjectorError("singular PiNabla system")
    return P, B


def build_pi0k(geom: CellGeometry, gram: np.ndarray, pi_nabla: np.ndarray, k: int) -> np.ndarray:
    """L2 projector onto P_k using moment DOFs and the enhancement constraint."""
    n = dim_poly(k)
    nm = dim_poly(k - 2)
    N = pi_nabla.shape[1]
    # written as a correction of PiNabla: the residual vanishes on P_k, so the
    # Gram conditioning only multiplies a small quantity
    R = np.zeros((n, N))
    R[:nm, N - nm :] = geom.area * np.eye(nm)
    R[:nm] -= gram[:nm, :] @ pi_nabla
    try:
        return pi_nabla + sla.cho_solve(sla.cho_factor(gram), R)
    except sla.LinAlgError as exc:
        raise ProjectorError("Gram matrix is not SPD") from exc


def build_pi0_grad(geom: CellGeometry, basis: MonomialBasis, gram: np.ndarray, k: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Components of the L2 projection of the gradient onto (P_{k-1})^2."""
    n1 = dim_poly(k - 1)
    nm = dim_poly(k - 2)
    lowbasis = MonomialBasis(basis.center, basis.h, k - 1)
    out = []
    try:
        fac = sla.cho_factor(gram[:n1, :n1])
    except sla.LinAlgError as exc:
        raise ProjectorError("Gram matrix is not SPD") from exc
    for axis in (0, 1):
        R = np.zeros((n1, N))
        for i, pts, wts, dofs in _boundary_node_weights(geom, k):
            vals = eval_basis(lowbasis, pts) * geom.normals[i, axis]
            np.add.at(R.T, dofs, wts[:, None] * vals)
        if k >= 2:
            der = derivative_matrix(k - 1, axis)  # (n1, nm): h * d m_b
            R[:, N - nm :] -= geom.area * der / basis.h
        out.append(sla.cho_solve(fac, R))
    return out[0], out[1]


def build_local_space(xy: np.ndarray, k: int) -> LocalVemSpace:
    geom = polygon_geometry(xy)
    basis = MonomialBasis(geom.centroid, geom.diameter, k)
    quad = fan_rule(geom.centroid, geom.vertices, 2 * k)
    vals = eval_basis(basis, quad.points)
    gram = (vals * quad.weights[:, None]).T @ vals
    gram = 0.5 * (gram + gram.T)
    D = _dof_matrix(geom, basis, gram, k)
    pn, _ = build_pi_nabla(geom, basis, D, k)
    p0 = build_pi0k(geom, gram, pn, k)
    gx, gy = build_pi0_grad(geom, basis, gram, k, D.shape[0])
    return LocalVemSpace(k, geom, basis, D, gram, ProjectorSet(pn, p0, gx, gy), quad)


class LocalSpaceCache:
    """Reuses projector matrices across cells that are translates of each other."""

    def __init__(self, digits: int = 11):
        self.digits = digits
        self._store: dict = {}
        self.hits = 0
        self.misses = 0

    def get(self, xy: np.ndarray, k: int) -> LocalVemSpace:
        origin = xy[0]
        rel = xy - origin
        scale = float(np.abs(rel).max())
        key = (k, len(xy), np.round(rel / scale, self.digits).tobytes(), f"{scale:.12e}")
        ref = self._store.get(key)
        if ref is None:
            self.misses += 1
            ref = build_local_space(rel, k)
            self._store[key] = ref
        else:
            self.hits += 1
        return ref.translated(origin)


def local_spaces(mesh: PolyMesh, k: int, cache: LocalSpaceCache | None = None) -> list[LocalVemSpace]:
    cache = cache if cache is not None else LocalSpaceCache()
    return [cache.get(mesh.vertices[loop], k) for loop in mesh.cells]


def interpolate(layout: DofLayout, mesh: PolyMesh, func, spaces: list[LocalVemSpace] | None = None, degree: int | None = None) -> np.ndarray:
    """Global DOF vector of the VEM interpolant of ``func(x1, x2)``.

    Moment DOFs are computed by cell quadrature (exact when ``func`` is a
    polynomial of degree <= ``degree``, default 2k + 4).
    """
    k = layout.k
    out = np.zeros(layout.n_dofs)
    pt = np.isfinite(layout.coords[:, 0])
    out[pt] = func(layout.coords[pt, 0], layout.coords[pt, 1])
    nm = dim_poly(k - 2)
    if nm:
        spaces = spaces if spaces is not None else local_spaces(mesh, k)
        deg = degree if degree is not None else 2 * k + 4
        low = None
        for c, sp in enumerate(spaces):
            q = fan_rule(sp.geom.centroid, sp.geom.vertices, deg + k - 2)
            low = MonomialBasis(sp.basis.center, sp.basis.h, k - 2)
            vals = eval_basis(low, q.points)
            fv = func(q.points[:, 0], q.points[:, 1])
            out[layout.cell_dofs[c][-nm:]] = (q.weights * fv) @ vals / sp.geom.area
    return out
