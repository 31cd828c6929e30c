"""Scaled monomial bases and quadrature on polygons and segments.

A scaled monomial on a cell with centroid ``x_E`` and diameter ``h_E`` is
``m_a(x) = ((x - x_E) / h_E) ** a`` for a multi-index ``a = (a1, a2)``.
Members are ordered graded-lexicographically: 1, x, y, x^2, xy, y^2, ...
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


def dim_poly(k: int) -> int:
    """Dimension of P_k in two variables (0 for k < 0)."""
    if k < 0:
        return 0
    return (k + 1) * (k + 2) // 2


@lru_cache(maxsize=None)
def exponents(k: int) -> np.ndarray:
    out = [(d - i, i) for d in range(k + 1) for i in range(d + 1)]
    arr = np.array(out, dtype=np.int64).reshape(-1, 2)
    arr.setflags(write=False)
    return arr


def _index_of(k: int) -> dict:
    return {tuple(e): n for n, e in enumerate(exponents(k))}


@dataclass(frozen=True, eq=False)
class MonomialBasis:
    center: np.ndarray
    h: float
    degree: int

    def __len__(self) -> int:
        return dim_poly(self.degree)

    @property
    def exponents(self) -> np.ndarray:
        return exponents(self.degree)


def _scaled(basis: MonomialBasis, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return (pts - basis.center) / basis.h


def _powers(z: np.ndarray, k: int) -> np.ndarray:
    # z: (n,), returns (n, k+1) with columns z**0 .. z**k
    out = np.ones((z.shape[0], k + 1))
    for j in range(1, k + 1):
        out[:, j] = out[:, j - 1] * z
    return out


def eval_basis(basis: MonomialBasis, pts) -> np.ndarray:
    """Values of every basis member at ``pts``; shape (npts, dim P_k)."""
    z = _scaled(basis, pts)
    k = basis.degree
    ex = exponents(k)
    px, py = _powers(z[:, 0], k), _powers(z[:, 1], k)
    return px[:, ex[:, 0]] * py[:, ex[:, 1]]


def eval_grad(basis: MonomialBasis, pts) -> np.ndarray:
    """Gradients of every basis member; shape (npts, dim P_k, 2)."""
    z = _scaled(basis, pts)
    k = basis.degree
    ex = exponents(k)
    px, py = _powers(z[:, 0], k), _powers(z[:, 1], k)
    ax, ay = ex[:, 0], ex[:, 1]
    out = np.zeros((z.shape[0], len(ex), 2))
    out[:, :, 0] = ax * px[:, np.maximum(ax - 1, 0)] * py[:, ay] / basis.h
    out[:, :, 1] = ay * px[:, ax] * py[:, np.maximum(ay - 1, 0)] / basis.h
    return out


def eval_curl(basis: MonomialBasis, pts) -> np.ndarray:
    """curl m = (dm/dy, -dm/dx) for every basis member; shape (npts, dim, 2)."""
    g = eval_grad(basis, pts)
    return np.stack([g[..., 1], -g[..., 0]], axis=-1)


@lru_cache(maxsize=None)
def derivative_matrix(k: int, axis: int) -> np.ndarray:
    """Coefficients of d/dx_axis (in scaled variables) of each m in P_k, in P_{k-1}.

    Row a holds the expansion of ``h * dm_a/dx_axis`` over the P_{k-1} basis.
    """
    idx = _index_of(k - 1) if k >= 1 else {}
    ex = exponents(k)
    out = np.zeros((len(ex), dim_poly(k - 1)))
    for n, e in enumerate(ex):
        if e[axis] == 0:
            continue
        lower = list(e)
        lower[axis] -= 1
        out[n, idx[tuple(lower)]] = e[axis]
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def laplacian_matrix(k: int) -> np.ndarray:
    """Row a: expansion of ``h**2 * Laplacian(m_a)`` over the P_{k-2} basis."""
    dx = derivative_matrix(k, 0)
    dy = derivative_matrix(k, 1)
    if k < 2:
        return np.zeros((dim_poly(k), 0))
    dxx = dx @ derivative_matrix(k - 1, 0)
    dyy = dy @ derivative_matrix(k - 1, 1)
    out = dxx + dyy
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=None)
def _gauss_legendre01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def gauss_lobatto01(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Lobatto nodes and weights on [0, 1] with ``n >= 2`` points."""
    if n < 2:
        raise ValueError("Gauss-Lobatto needs at least 2 points")
    m = n - 1
    cm = np.zeros(m + 1)
    cm[m] = 1.0
    inner = np.polynomial.legendre.legroots(np.polynomial.legendre.legder(cm)) if m > 1 else np.array([])
    x = np.concatenate([[-1.0], np.sort(inner.real), [1.0]])
    pm = np.polynomial.legendre.legval(x, cm)
    w = 2.0 / (m * (m + 1) * pm**2)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def _reference_triangle(degree: int) -> tuple[np.ndarray, np.ndarray]:
    # collapsed (Duffy) tensor rule on the triangle (0,0), (1,0), (0,1)
    nu = (degree + 3) // 2
    nv = (degree + 2) // 2
    u, wu = _gauss_legendre01(nu)
    v, wv = _gauss_legendre01(nv)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ww = np.outer(wu * (1.0 - u), wv)
    pts = np.column_stack([uu.ravel(), ((1.0 - uu) * vv).ravel()])
    return pts, ww.ravel()


def triangle_rule(tri: np.ndarray, degree: int) -> QuadratureRule:
    tri = np.asarray(tri, dtype=float)
    ref, w = _reference_triangle(max(degree, 0))
    a, b, c = tri
    jac = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    pts = a + ref[:, :1] * (b - a) + ref[:, 1:] * (c - a)
    return QuadratureRule(pts, w * jac, degree)


def fan_rule(center: np.ndarray, polygon: np.ndarray, degree: int) -> QuadratureRule:
    """Composite rule over the triangles (center, v_i, v_{i+1})."""
    ref, w = _reference_triangle(max(degree, 0))
    a = np.asarray(center, dtype=float)
    b = np.asarray(polygon, dtype=float)
    c = np.roll(b, -1, axis=0)
    jac = (b[:, 0] - a[0]) * (c[:, 1] - a[1]) - (b[:, 1] - a[1]) * (c[:, 0] - a[0])
    if np.any(jac <= 0.0):
        raise ValueError("cell is not star-shaped with respect to its centroid")
    # (ntri, nq, 2)
    pts = a + ref[None, :, :1] * (b - a)[:, None, :] + ref[None, :, 1:] * (c - a)[:, None, :]
    wts = jac[:, None] * w[None, :]
    return QuadratureRule(pts.reshape(-1, 2), wts.ravel(), degree)


def cell_rule(geom, exactness: int) -> QuadratureRule:
    """Composite Gauss rule on the centroid fan of a cell.

    ``geom`` is a :class:`vemocp.mesh.CellGeometry`.
    """
    if exactness < 0:
        raise ValueError("exactness must be non-negative")
    return fan_rule(geom.centroid, geom.vertices, exactness)


def edge_rule(a, b, exactness: int) -> QuadratureRule:
    """Gauss-Legendre rule on the segment [a, b] exact to ``exactness``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    length = float(np.hypot(*(b - a)))
    if length == 0.0:
        raise ValueError("zero-length edge")
    t, w = _gauss_legendre01(max(exactness, 0) // 2 + 1)
    return QuadratureRule(a + t[:, None] * (b - a), w * length, exactness)


def edge_rule_params(exactness: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1] exact to ``exactness``."""
    return _gauss_legendre01(max(exactness, 0) // 2 + 1)


def lagrange_basis_1d(nodes: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Lagrange polynomials on ``nodes`` evaluated at ``t``; shape (len(t), len(nodes))."""
    nodes = np.asarray(nodes, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.ones((t.size, nodes.size))
    for j, xj in enumerate(nodes):
        for m, xm in enumerate(nodes):
            if m != j:
                out[:, j] *= (t - xm) / (xj - xm)
    return out
