"""Control space, saddle-point assembly and solution of the optimality system.

Unknowns are ordered ``[y | u | p]`` (state, control, adjoint).  The full
block operator is::

    [ M_obs    0       A^T ] [y]   [D_yd]
    [ 0      alpha*M_C -C^T ] [u] = [ 0  ]
    [ A       -C       0   ] [p]   [F_f ]

Dirichlet DOFs of ``y`` carry the interpolated datum ``g`` and those of
``p`` are zero; both are removed symmetrically before factorization.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forms import (
    STABFREE,
    STABILIZED,
    StabFreeProjector,
    build_stabfree_projectors,
    local_loads,
    local_obs_mass,
    local_stiffness,
    local_stiffness_stabfree,
    select_ell,
)
from .mesh import CONTROL, NEUMANN, PolyMesh
from .polybasis import edge_rule_params, eval_basis, fan_rule, gauss_lobatto01, lagrange_basis_1d
from .vemspace import DofLayout, LocalSpaceCache, LocalVemSpace, dof_layout, local_spaces

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]


class SolveError(ArithmeticError):
    """The saddle-point system could not be solved to tolerance."""


def constant(value: float) -> Field:
    def fn(x1, x2):
        return np.full(np.shape(x1), float(value))

    fn.constant_value = float(value)
    return fn


@dataclass
class OcpConfig:
    k: int = 1
    k_u: int | None = None
    sigma: float = 1.0
    alpha: float = 1.0
    kappa: Field = field(default_factory=lambda: constant(1.0))
    gamma: Field = field(default_factory=lambda: constant(1.0))
    f: Field = field(default_factory=lambda: constant(0.0))
    y_d: Field = field(default_factory=lambda: constant(0.0))
    g: Field = field(default_factory=lambda: constant(0.0))
    scheme: str = STABILIZED
    tol: float = 1e-10

    def __post_init__(self):
        if self.k_u is None:
            self.k_u = self.k
        self.check()

    def check(self) -> None:
        if self.k < 1:
            raise ValueError("order k must be >= 1")
        if self.k_u < 1:
            raise ValueError("control degree k_u must be >= 1")
        if not self.alpha > 0.0:
            raise ValueError("penalty alpha must be positive")
        if self.scheme not in (STABILIZED, STABFREE):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == STABFREE and self.k != 1:
            raise ValueError("the stabilization-free scheme requires k = 1")
        if self.scheme == STABILIZED and not self.sigma > 0.0:
            raise ValueError("sigma must be positive")


# ---------------------------------------------------------------------------
# control space


@dataclass(frozen=True, eq=False)
class ControlSpace:
    degree: int
    edges: np.ndarray  # mesh edge ids on the control boundary
    edge_dofs: np.ndarray  # (n_edges, degree+1), canonical edge orientation
    node_coords: np.ndarray

    @property
    def n_dofs(self) -> int:
        return len(self.node_coords)

    @property
    def nodes01(self) -> np.ndarray:
        return gauss_lobatto01(self.degree + 1)[0]


def control_space(mesh: PolyMesh, degree: int) -> ControlSpace:
    """Continuous piecewise P_degree functions on the control edges."""
    edges = mesh.edges_with_tag(CONTROL)
    if edges.size == 0:
        raise ValueError("empty control boundary")
    verts = np.unique(mesh.edges[edges].ravel())
    vmap = {int(v): i for i, v in enumerate(verts)}
    coords = [mesh.vertices[verts]]
    edge_dofs = np.empty((len(edges), degree + 1), dtype=np.int64)
    t = gauss_lobatto01(degree + 1)[0]
    nxt = len(verts)
    for n, e in enumerate(edges):
        a, b = mesh.edges[e]
        edge_dofs[n, 0] = vmap[int(a)]
        edge_dofs[n, degree] = vmap[int(b)]
        if degree > 1:
            edge_dofs[n, 1:degree] = nxt + np.arange(degree - 1)
            nxt += degree - 1
            pa, pb = mesh.vertices[a], mesh.vertices[b]
            coords.append(pa + t[1:degree, None] * (pb - pa))
    return ControlSpace(degree, edges, edge_dofs, np.vstack(coords))


def control_mass(mesh: PolyMesh, cs: ControlSpace) -> sp.csr_matrix:
    t, w = edge_rule_params(2 * cs.degree)
    phi = lagrange_basis_1d(cs.nodes01, t)
    local = (phi * w[:, None]).T @ phi
    rows, cols, vals = [], [], []
    for n, e in enumerate(cs.edges):
        d = cs.edge_dofs[n]
        L = mesh.edge_lengths[e]
        rows.append(np.repeat(d, len(d)))
        cols.append(np.tile(d, len(d)))
        vals.append((L * local).ravel())
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(cs.n_dofs,) * 2)
    return _symmetrized(M.tocsr())


def control_coupling(mesh: PolyMesh, cs: ControlSpace, layout: DofLayout) -> sp.csr_matrix:
    """C[q, u] = int_{Gamma_C} phi_u * trace(phi_q)."""
    k = layout.k
    t, w = edge_rule_params(k + cs.degree)
    phi_u = lagrange_basis_1d(cs.nodes01, t)
    phi_y = lagrange_basis_1d(gauss_lobatto01(k + 1)[0], t)
    local = (phi_y * w[:, None]).T @ phi_u
    rows, cols, vals = [], [], []
    for n, e in enumerate(cs.edges):
        dy = layout.edge_dofs[e]
        du = cs.edge_dofs[n]
        rows.append(np.repeat(dy, len(du)))
        cols.append(np.tile(du, len(dy)))
        vals.append((mesh.edge_lengths[e] * local).ravel())
    C = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(layout.n_dofs, cs.n_dofs)
    )
    return C.tocsr()


# ---------------------------------------------------------------------------
# discretization


@dataclass(eq=False)
class Discretization:
    mesh: PolyMesh
    k: int
    layout: DofLayout
    spaces: list[LocalVemSpace]
    _stabfree: list[StabFreeProjector] | None = None

    def stabfree(self, tol: float = 1e-10) -> list[StabFreeProjector]:
        if self.k != 1:
            raise ValueError("the stabilization-free scheme requires k = 1")
        if self._stabfree is None:
            self._stabfree = [build_stabfree_projectors(s, select_ell(s.geom, tol)) for s in self.spaces]
        return self._stabfree


def discretize(mesh: PolyMesh, k: int, cache: LocalSpaceCache | None = None) -> Discretization:
    return Discretization(mesh, k, dof_layout(mesh, k), local_spaces(mesh, k, cache))


def _coo(n: int, m: int, rows, cols, vals) -> sp.csr_matrix:
    if not rows:
        return sp.csr_matrix((n, m))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, m)
    ).tocsr()


def _symmetrized(X: sp.csr_matrix) -> sp.csr_matrix:
    # duplicate summation order differs between (i, j) and (j, i); a + b == b + a exactly
    return (0.5 * (X + X.T)).tocsr()


def assemble_state_operators(disc: Discretization, config: OcpConfig, with_obs: bool = True):
    """Global stiffness A, observation mass M, loads F and D (full numbering)."""
    n = disc.layout.n_dofs
    rA, cA, vA, rM, cM, vM = [], [], [], [], [], []
    F = np.zeros(n)
    Dyd = np.zeros(n)
    sfs = disc.stabfree() if config.scheme == STABFREE else None
    for c, space in enumerate(disc.spaces):
        dofs = disc.layout.cell_dofs[c]
        if sfs is None:
            A_E = local_stiffness(space, config.kappa, config.gamma, config.sigma)
        else:
            A_E = local_stiffness_stabfree(space, sfs[c], config.kappa, config.gamma)
        nd = len(dofs)
        rr, cc = np.repeat(dofs, nd), np.tile(dofs, nd)
        rA.append(rr)
        cA.append(cc)
        vA.append(A_E.ravel())
        obs = with_obs and bool(disc.mesh.obs_flags[c])
        lf, ly = local_loads(space, config.f, config.y_d if obs else None)
        np.add.at(F, dofs, lf)
        if obs:
            np.add.at(Dyd, dofs, ly)
            rM.append(rr)
            cM.append(cc)
            vM.append(local_obs_mass(space).ravel())
    A = _symmetrized(_coo(n, n, rA, cA, vA))
    M = _symmetrized(_coo(n, n, rM, cM, vM))
    return A, M, F, Dyd


@dataclass(eq=False)
class SaddleSystem:
    matrix: sp.csr_matrix  # reduced symmetric indefinite operator
    rhs: np.ndarray
    free: np.ndarray  # free state/adjoint dofs (full numbering)
    fixed: np.ndarray  # Dirichlet dofs
    y_dirichlet: np.ndarray  # values on ``fixed``
    A: sp.csr_matrix
    M: sp.csr_matrix
    C: sp.csr_matrix
    MC: sp.csr_matrix
    F: np.ndarray
    Dyd: np.ndarray
    disc: Discretization
    cs: ControlSpace
    config: OcpConfig

    @property
    def n_y(self) -> int:
        return self.disc.layout.n_dofs

    @property
    def n_u(self) -> int:
        return self.cs.n_dofs

    @property
    def n_free(self) -> int:
        return len(self.free)

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        nf, nu = self.n_free, self.n_u
        y = np.zeros(self.n_y)
        y[self.fixed] = self.y_dirichlet
        y[self.free] = z[:nf]
        p = np.zeros(self.n_y)
        p[self.free] = z[nf + nu :]
        return y, z[nf : nf + nu].copy(), p


def dirichlet_values(layout: DofLayout, g: Field) -> tuple[np.ndarray, np.ndarray]:
    fixed = np.flatnonzero(layout.dirichlet)
    xy = layout.coords[fixed]
    vals = np.asarray(g(xy[:, 0], xy[:, 1]), dtype=float)
    return fixed, np.broadcast_to(vals, (len(fixed),)).copy()


def assemble(mesh: PolyMesh, config: OcpConfig, disc: Discretization | None = None) -> SaddleSystem:
    config.check()
    if disc is None:
        disc = discretize(mesh, config.k)
    elif disc.k != config.k or disc.mesh is not mesh:
        raise ValueError("discretization does not match mesh/order")
    cs = control_space(mesh, config.k_u)
    layout = disc.layout
    # control edges must not touch the Dirichlet set through interior edge dofs
    for e in cs.edges:
        if layout.dirichlet[layout.edge_dofs[e, 1:-1]].any():
            raise ValueError(f"edge {e} is tagged both control and Dirichlet")
    A, M, F, Dyd = assemble_state_operators(disc, config)
    MC = control_mass(mesh, cs)
    C = control_coupling(mesh, cs, layout)
    fixed, yD = dirichlet_values(layout, config.g)
    free = np.flatnonzero(~layout.dirichlet)

    A_ff = A[free][:, free]
    A_fd = A[free][:, fixed]
    M_ff = M[free][:, free]
    M_fd = M[free][:, fixed]
    C_f = C[free]
    K = sp.bmat(
        [
            [M_ff, None, A_ff.T],
            [None, config.alpha * MC, -C_f.T],
            [A_ff, -C_f, None],
        ],
        format="csr",
    )
    rhs = np.concatenate([Dyd[free] - M_fd @ yD, np.zeros(cs.n_dofs), F[free] - A_fd @ yD])
    return SaddleSystem(K, rhs, free, fixed, yD, A, M, C, MC, F, Dyd, disc, cs, config)


@dataclass(eq=False)
class Solution:
    y: np.ndarray
    u: np.ndarray
    p: np.ndarray
    system: SaddleSystem
    residual: float
    floor: float = 0.0

    @property
    def disc(self) -> Discretization:
        return self.system.disc

    @property
    def mesh(self) -> PolyMesh:
        return self.system.disc.mesh

    @property
    def k(self) -> int:
        return self.system.disc.k

    def optimality_residual(self) -> float:
        """Norm of alpha*M_C u - C^T p (second block row)."""
        s = self.system
        r = s.config.alpha * (s.MC @ self.u) - s.C.T @ self.p
        return float(np.linalg.norm(r))

    def block_residuals(self) -> tuple[float, float, float]:
        s = self.system
        f = s.free
        r1 = s.M @ self.y + s.A.T @ self.p - s.Dyd
        r3 = s.A @ self.y - s.C @ self.u - s.F
        return float(np.linalg.norm(r1[f])), self.optimality_residual(), float(np.linalg.norm(r3[f]))


def solve(system: SaddleSystem, tol: float | None = None, refine_steps: int = 3) -> Solution:
    tol = system.config.tol if tol is None else tol
    K = system.matrix.tocsc()
    b = system.rhs
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise SolveError(f"factorization failed: {exc}") from exc
    z = lu.solve(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        y, u, p = system.split(np.zeros_like(b))
        return Solution(y, u, p, system, 0.0, 0.0)
    res = np.linalg.norm(K @ z - b) / bnorm
    for _ in range(refine_steps):
        if res <= tol:
            break
        z = z + lu.solve(b - K @ z)
        res = np.linalg.norm(K @ z - b) / bnorm
    floor = rounding_floor(K, z, bnorm)
    if not np.isfinite(res) or res > max(tol, floor):
        raise SolveError(f"relative residual {res:.3e} exceeds tolerance {tol:.1e}")
    if res > tol:
        logger.warning("residual %.2e is above %.0e but within the rounding floor %.2e", res, tol, floor)
    y, u, p = system.split(z)
    return Solution(y, u, p, system, float(res), float(floor))


def rounding_floor(K: sp.spmatrix, z: np.ndarray, bnorm: float) -> float:
    """eps * || |K| |z| || / ||b||: the residual level that rounding z alone produces."""
    return float(np.finfo(float).eps * np.linalg.norm(abs(K) @ np.abs(z)) / bnorm)


def solve_ocp(mesh: PolyMesh, config: OcpConfig, disc: Discretization | None = None) -> Solution:
    return solve(assemble(mesh, config, disc))


def evaluate_functional(sol: Solution) -> float:
    """J_h = 1/2 sum_obs ||Pi0k y - y_d||^2 + alpha/2 ||u||^2 on Gamma_C."""
    s = sol.system
    cfg = s.config
    total = 0.0
    for c, space in enumerate(s.disc.spaces):
        if not s.disc.mesh.obs_flags[c]:
            continue
        q = fan_rule(space.geom.centroid, space.geom.vertices, 2 * space.k + 6)
        coef = space.proj.Pi0k @ sol.y[s.disc.layout.cell_dofs[c]]
        diff = eval_basis(space.basis, q.points) @ coef - cfg.y_d(q.points[:, 0], q.points[:, 1])
        total += float(q.weights @ diff**2)
    return 0.5 * total + 0.5 * cfg.alpha * float(sol.u @ (s.MC @ sol.u))


# ---------------------------------------------------------------------------
# state equation alone (patch tests)


def neumann_load(mesh: PolyMesh, layout: DofLayout, flux: Callable, tags=(NEUMANN, CONTROL)) -> np.ndarray:
    """int_e flux(x, n) * trace(phi) over boundary edges with the given tags.

    ``flux(x1, x2, n1, n2)`` is the conormal derivative on the edge.
    """
    k = layout.k
    t, w = edge_rule_params(3 * k + 4)
    phi = lagrange_basis_1d(gauss_lobatto01(k + 1)[0], t)
    out = np.zeros(layout.n_dofs)
    for tag in tags:
        for e in mesh.edges_with_tag(tag):
            c = mesh.edge_cells[e, 0]
            a, b = mesh.vertices[mesh.edges[e]]
            L = mesh.edge_lengths[e]
            tang = (b - a) / L
            normal = np.array([tang[1], -tang[0]])
            # orient outward with respect to the owning cell
            if np.dot(normal, 0.5 * (a + b) - mesh.centroids[c]) < 0:
                normal = -normal
            pts = a + t[:, None] * (b - a)
            fv = np.broadcast_to(flux(pts[:, 0], pts[:, 1], normal[0], normal[1]), t.shape)
            np.add.at(out, layout.edge_dofs[e], L * (phi.T @ (w * fv)))
    return out


def solve_state(
    mesh: PolyMesh,
    k: int,
    kappa: Field,
    gamma: Field,
    f: Field,
    g: Field,
    flux: Callable | None = None,
    sigma: float = 1.0,
    scheme: str = STABILIZED,
    disc: Discretization | None = None,
) -> tuple[np.ndarray, Discretization]:
    """Solve a_h(y, q) = (f, Pi0k q) + <flux, q> with y = g on Dirichlet edges."""
    disc = disc if disc is not None else discretize(mesh, k)
    cfg = OcpConfig(k=k, sigma=sigma, kappa=kappa, gamma=gamma, f=f, scheme=scheme)
    A, _, F, _ = assemble_state_operators(disc, cfg, with_obs=False)
    if flux is not None:
        F = F + neumann_load(mesh, disc.layout, flux)
    fixed, yD = dirichlet_values(disc.layout, g)
    free = np.flatnonzero(~disc.layout.dirichlet)
    y = np.zeros(disc.layout.n_dofs)
    y[fixed] = yD
    rhs = F[free] - A[free][:, fixed] @ yD
    y[free] = spla.spsolve(A[free][:, free].tocsc(), rhs)
    return y, disc
