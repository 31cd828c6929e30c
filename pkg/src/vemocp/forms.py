"""Local bilinear forms and load vectors.

Two schemes are provided:

* ``stabilized``: projected consistency terms plus the dofi-dofi
  stabilization acting on ``(I - Pi_nabla)``;
* ``stabfree`` (k = 1 only): gradients projected onto ``curl P_{l+1}`` and
  a mass term through the matching polynomial lift, no stabilization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .mesh import CellGeometry
from .polybasis import (
    MonomialBasis,
    QuadratureRule,
    dim_poly,
    edge_rule_params,
    eval_basis,
    eval_grad,
    fan_rule,
)
from .vemspace import LocalVemSpace, ProjectorError

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]

STABILIZED = "stabilized"
STABFREE = "stabfree"


def _sample(func: Field, pts: np.ndarray) -> np.ndarray:
    vals = np.asarray(func(pts[:, 0], pts[:, 1]), dtype=float)
    return np.broadcast_to(vals, (len(pts),))


def weighted_gram(basis: MonomialBasis, quad: QuadratureRule, weight: np.ndarray | None = None) -> np.ndarray:
    vals = eval_basis(basis, quad.points)
    w = quad.weights if weight is None else quad.weights * weight
    G = (vals * w[:, None]).T @ vals
    return 0.5 * (G + G.T)


# ---------------------------------------------------------------------------
# stabilized scheme


def dofi_dofi(n_dofs: int, sigma: float) -> np.ndarray:
    """sigma times the Euclidean product of local DOF vectors."""
    if not sigma > 0.0:
        raise ValueError(f"stabilization parameter must be positive, got {sigma}")
    return sigma * np.eye(n_dofs)


def stabilization_slack(space: LocalVemSpace) -> np.ndarray:
    """DOFs of v - PiNabla v as a matrix acting on the DOFs of v."""
    return np.eye(space.n_dofs) - space.D @ space.proj.PiNabla


@dataclass(frozen=True, eq=False)
class LocalForms:
    A_E: np.ndarray
    M_E: np.ndarray | None
    load_f: np.ndarray
    load_yd: np.ndarray | None
    scheme: str


def coefficient_quadrature(space: LocalVemSpace, extra: int = 4) -> QuadratureRule:
    return fan_rule(space.geom.centroid, space.geom.vertices, 2 * space.k + extra)


def local_stiffness(
    space: LocalVemSpace,
    kappa: Field,
    gamma: Field,
    sigma: float,
    quad: QuadratureRule | None = None,
    return_parts: bool = False,
):
    """Stiffness + reaction matrix of the stabilized local form.

    Coefficient sup-norms are taken over the cell quadrature points.
    """
    quad = quad if quad is not None else coefficient_quadrature(space)
    kv = _sample(kappa, quad.points)
    gv = _sample(gamma, quad.points)
    if np.any(kv <= 0.0):
        raise ValueError("diffusion coefficient must be positive")
    if np.any(gv < 0.0):
        raise ValueError("reaction coefficient must be non-negative")
    k = space.k
    P = space.proj
    low = MonomialBasis(space.basis.center, space.basis.h, k - 1)
    Kw = weighted_gram(low, quad, kv)
    Gw = weighted_gram(space.basis, quad, gv)
    consistency = P.Pi0GradX.T @ Kw @ P.Pi0GradX + P.Pi0GradY.T @ Kw @ P.Pi0GradY + P.Pi0k.T @ Gw @ P.Pi0k
    slack = stabilization_slack(space)
    S = slack.T @ dofi_dofi(space.n_dofs, sigma) @ slack
    stab = (np.abs(kv).max() + np.abs(gv).max() * space.geom.area) * S
    A = consistency + stab
    A = 0.5 * (A + A.T)
    if return_parts:
        return A, 0.5 * (consistency + consistency.T), 0.5 * (stab + stab.T)
    return A


def local_obs_mass(space: LocalVemSpace) -> np.ndarray:
    P0 = space.proj.Pi0k
    M = P0.T @ space.gram @ P0
    return 0.5 * (M + M.T)


def local_loads(space: LocalVemSpace, f: Field, y_d: Field | None, quad: QuadratureRule | None = None):
    """(f, Pi0k q)_E and (y_d, Pi0k w)_E as local vectors."""
    quad = quad if quad is not None else fan_rule(space.geom.centroid, space.geom.vertices, 2 * space.k + 6)
    vals = eval_basis(space.basis, quad.points)
    P0 = space.proj.Pi0k
    bf = (quad.weights * _sample(f, quad.points)) @ vals
    load_f = P0.T @ bf
    if y_d is None:
        return load_f, None
    byd = (quad.weights * _sample(y_d, quad.points)) @ vals
    return load_f, P0.T @ byd


# ---------------------------------------------------------------------------
# stabilization-free scheme (k = 1)


def _zero_mean_monomials(basis: MonomialBasis, quad: QuadratureRule, area: float) -> np.ndarray:
    """Cell means of every monomial of ``basis``."""
    return (quad.weights @ eval_basis(basis, quad.points)) / area


def edge_mean_matrix(geom: CellGeometry, ell: int) -> np.ndarray:
    """Rows: edges; columns: zero-mean monomials of degree 1..ell+1.

    Entry (e, i) = |e|^{-1} int_e (m_i - mean_E m_i).
    """
    deg = ell + 1
    basis = MonomialBasis(geom.centroid, geom.diameter, deg)
    quad = fan_rule(geom.centroid, geom.vertices, deg)
    means = _zero_mean_monomials(basis, quad, geom.area)
    t, w = edge_rule_params(deg)
    a = geom.vertices
    b = np.roll(a, -1, axis=0)
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    vals = eval_basis(basis, pts.reshape(-1, 2)).reshape(len(a), len(t), -1)
    emeans = np.einsum("q,eqn->en", w, vals)
    return (emeans - means)[:, 1:]


def numerical_rank(M: np.ndarray, tol: float) -> int:
    if M.size == 0:
        return 0
    # rank via pivoted QR of the transpose (row rank of M)
    R = sla.qr(M.T, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0.0:
        return 0
    return int((d > tol * d[0]).sum())


def select_ell(geom: CellGeometry, tol: float = 1e-10, ell_min: int = 0, ell_max: int | None = None) -> int:
    """Smallest degree l such that edge means of zero-mean P_{l+1} reach full rank."""
    ne = len(geom.vertices)
    ell_max = ell_max if ell_max is not None else 2 + math.ceil(ne / 2)
    for ell in range(ell_min, ell_max + 1):
        if dim_poly(ell + 1) - 1 < ne:
            continue
        if numerical_rank(edge_mean_matrix(geom, ell), tol) == ne:
            return ell
    raise ProjectorError(f"no admissible degree up to {ell_max} for a cell with {ne} edges")


@dataclass(frozen=True, eq=False)
class StabFreeProjector:
    ell: int
    basis: MonomialBasis  # degree ell + 1
    means: np.ndarray  # cell means of the monomials
    Pi_hat: np.ndarray  # (dim P_{l+1} - 1, N): coefficients over {curl m_i}, i >= 1
    Pi_curl: np.ndarray  # (dim P_{l+1}, N): row 0 is the cell mean, rows i>=1 over zero-mean m_i

    @property
    def Pi_curl_monomial(self) -> np.ndarray:
        """Pi_curl coefficients over the plain monomials m_0..m_n."""
        out = self.Pi_curl.copy()
        out[0] -= self.means[1:] @ self.Pi_curl[1:]
        return out


def build_stabfree_projectors(space: LocalVemSpace, ell: int) -> StabFreeProjector:
    """Gradient projection onto curl P_{l+1} and the associated polynomial lift."""
    if space.k != 1:
        raise ValueError("the stabilization-free scheme is available for k = 1 only")
    geom = space.geom
    deg = ell + 1
    basis = MonomialBasis(geom.centroid, geom.diameter, deg)
    quad = fan_rule(geom.centroid, geom.vertices, 2 * deg)
    means = _zero_mean_monomials(basis, quad, geom.area)
    grads = eval_grad(basis, quad.points)[:, 1:, :]
    # (curl m_i, curl m_j) = (grad m_i, grad m_j)
    G = np.einsum("q,qid,qjd->ij", quad.weights, grads, grads)
    nv = len(geom.vertices)
    R = np.zeros((len(means) - 1, nv))
    t, w = edge_rule_params(deg + 1)
    for i in range(nv):
        a, b = geom.vertices[i], geom.vertices[(i + 1) % nv]
        tangent = (b - a) / geom.edge_lengths[i]
        pts = a + t[:, None] * (b - a)
        dt = eval_grad(basis, pts)[:, 1:, :] @ tangent  # (nq, n-1): curl m . n
        wl = w * geom.edge_lengths[i]
        R[:, i] += (wl * (1.0 - t)) @ dt
        R[:, (i + 1) % nv] += (wl * t) @ dt
    Q, Rg = np.linalg.qr(G)
    if np.min(np.abs(np.diag(Rg))) <= 1e-13 * np.max(np.abs(np.diag(Rg))):
        raise ProjectorError("curl Gram matrix is rank deficient")
    Pi_hat = sla.solve_triangular(Rg, Q.T @ R)
    # cell mean of a k=1 VEM function equals the mean of its PiNabla projection
    mean_row = (space.gram[0] @ space.proj.PiNabla) / geom.area
    Pi_curl = np.vstack([mean_row, Pi_hat])
    return StabFreeProjector(ell, basis, means, Pi_hat, Pi_curl)


def local_stiffness_stabfree(
    space: LocalVemSpace,
    sf: StabFreeProjector,
    kappa: Field,
    gamma: Field,
    quad: QuadratureRule | None = None,
) -> np.ndarray:
    geom = space.geom
    deg = sf.ell + 1
    quad = quad if quad is not None else fan_rule(geom.centroid, geom.vertices, 2 * deg + 4)
    kv = _sample(kappa, quad.points)
    gv = _sample(gamma, quad.points)
    if np.any(kv <= 0.0):
        raise ValueError("diffusion coefficient must be positive")
    grads = eval_grad(sf.basis, quad.points)[:, 1:, :]
    Kc = np.einsum("q,qid,qjd->ij", quad.weights * kv, grads, grads)
    vals = eval_basis(sf.basis, quad.points)
    vals = np.column_stack([vals[:, :1], vals[:, 1:] - sf.means[1:]])
    Gm = (vals * (quad.weights * gv)[:, None]).T @ vals
    A = sf.Pi_hat.T @ Kc @ sf.Pi_hat + sf.Pi_curl.T @ Gm @ sf.Pi_curl
    return 0.5 * (A + A.T)
