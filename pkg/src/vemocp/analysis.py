"""Error functionals, convergence-rate fitting and reference comparisons."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .ocp import ControlSpace, Discretization, Solution
from .polybasis import (
    dim_poly,
    edge_rule_params,
    exponents,
    fan_rule,
    gauss_lobatto01,
    lagrange_basis_1d,
)

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
Grad = Callable[[np.ndarray, np.ndarray], tuple]

MACHINE_FLOOR = 1e-11
CSV_COLUMNS = ("h", "ndof", "errY_L2", "errY_en", "errP_L2", "errP_en", "errU_L2", "Jh")
ERROR_COLUMNS = CSV_COLUMNS[2:7]


def _sample(func: Field, pts: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(func(pts[:, 0], pts[:, 1]), dtype=float), (len(pts),))


# ---------------------------------------------------------------------------
# piecewise polynomial fields


@dataclass(frozen=True, eq=False)
class CellPolynomials:
    """One scaled-monomial expansion per cell."""

    centers: np.ndarray  # (nc, 2)
    h: np.ndarray  # (nc,)
    degree: int
    coefs: np.ndarray  # (nc, dim P_degree)

    def _powers(self, cells: np.ndarray, pts: np.ndarray):
        z = (pts - self.centers[cells]) / self.h[cells, None]
        k = self.degree
        px = np.ones((len(pts), k + 1))
        py = np.ones((len(pts), k + 1))
        for j in range(1, k + 1):
            px[:, j] = px[:, j - 1] * z[:, 0]
            py[:, j] = py[:, j - 1] * z[:, 1]
        return px, py

    def values(self, cells: np.ndarray, pts: np.ndarray) -> np.ndarray:
        ex = exponents(self.degree)
        px, py = self._powers(cells, pts)
        m = px[:, ex[:, 0]] * py[:, ex[:, 1]]
        return np.einsum("qn,qn->q", m, self.coefs[cells])

    def gradients(self, cells: np.ndarray, pts: np.ndarray) -> np.ndarray:
        ex = exponents(self.degree)
        px, py = self._powers(cells, pts)
        ax, ay = ex[:, 0], ex[:, 1]
        c = self.coefs[cells]
        inv_h = 1.0 / self.h[cells]
        gx = ax * px[:, np.maximum(ax - 1, 0)] * py[:, ay]
        gy = ay * px[:, ax] * py[:, np.maximum(ay - 1, 0)]
        return np.column_stack([np.einsum("qn,qn->q", gx, c) * inv_h, np.einsum("qn,qn->q", gy, c) * inv_h])


def projected_fields(disc: Discretization, dofs: np.ndarray) -> tuple[CellPolynomials, CellPolynomials]:
    """(Pi0k v, PiNabla v) of a global DOF vector as cellwise polynomials."""
    nc = len(disc.spaces)
    dim = dim_poly(disc.k)
    c0 = np.empty((nc, dim))
    cn = np.empty((nc, dim))
    centers = np.empty((nc, 2))
    hs = np.empty(nc)
    for c, space in enumerate(disc.spaces):
        loc = dofs[disc.layout.cell_dofs[c]]
        c0[c] = space.proj.Pi0k @ loc
        cn[c] = space.proj.PiNabla @ loc
        centers[c] = space.basis.center
        hs[c] = space.basis.h
    return CellPolynomials(centers, hs, disc.k, c0), CellPolynomials(centers, hs, disc.k, cn)


def cell_quadrature(disc: Discretization, exactness: int | None = None):
    """Stacked fan quadrature over all cells: (points, weights, owning cell)."""
    deg = 2 * disc.k + 6 if exactness is None else exactness
    pts, wts, own = [], [], []
    for c, space in enumerate(disc.spaces):
        q = fan_rule(space.geom.centroid, space.geom.vertices, deg)
        pts.append(q.points)
        wts.append(q.weights)
        own.append(np.full(len(q.weights), c))
    return np.vstack(pts), np.concatenate(wts), np.concatenate(own)


# ---------------------------------------------------------------------------
# errors against closed forms


def l2_error_state(disc: Discretization, dofs: np.ndarray, exact: Field) -> float:
    """sqrt(sum_E ||Pi0k v_h - v||^2_E)."""
    P0, _ = projected_fields(disc, dofs)
    pts, w, own = cell_quadrature(disc)
    diff = P0.values(own, pts) - _sample(exact, pts)
    return math.sqrt(max(float(w @ diff**2), 0.0))


def energy_error(
    disc: Discretization,
    dofs: np.ndarray,
    exact: Field,
    grad_exact: Grad,
    kappa: Field,
    gamma: Field,
) -> float:
    """sqrt(||sqrt(kappa) (grad PiNabla v_h - grad v)||^2 + ||sqrt(gamma) (Pi0k v_h - v)||^2)."""
    P0, PN = projected_fields(disc, dofs)
    pts, w, own = cell_quadrature(disc)
    gx, gy = grad_exact(pts[:, 0], pts[:, 1])
    dg = PN.gradients(own, pts) - np.column_stack([np.broadcast_to(gx, len(pts)), np.broadcast_to(gy, len(pts))])
    dv = P0.values(own, pts) - _sample(exact, pts)
    total = w @ (_sample(kappa, pts) * (dg**2).sum(axis=1) + _sample(gamma, pts) * dv**2)
    return math.sqrt(max(float(total), 0.0))


def control_points(mesh, cs: ControlSpace, exactness: int):
    """Quadrature on the control boundary: (points, weights, edge index, param t)."""
    t, w = edge_rule_params(exactness)
    pts, wts, eid, par = [], [], [], []
    for n, e in enumerate(cs.edges):
        a, b = mesh.vertices[mesh.edges[e]]
        pts.append(a + t[:, None] * (b - a))
        wts.append(w * mesh.edge_lengths[e])
        eid.append(np.full(len(t), n))
        par.append(t)
    return np.vstack(pts), np.concatenate(wts), np.concatenate(eid), np.concatenate(par)


def eval_control(cs: ControlSpace, u: np.ndarray, edge_index: np.ndarray, t: np.ndarray) -> np.ndarray:
    phi = lagrange_basis_1d(gauss_lobatto01(cs.degree + 1)[0], t)
    return np.einsum("qj,qj->q", phi, u[cs.edge_dofs[edge_index]])


def control_error(mesh, cs: ControlSpace, u: np.ndarray, exact: Field) -> float:
    pts, w, eid, t = control_points(mesh, cs, 2 * cs.degree + 6)
    diff = eval_control(cs, u, eid, t) - _sample(exact, pts)
    return math.sqrt(max(float(w @ diff**2), 0.0))


@dataclass
class ErrorRow:
    h: float
    ndof: int
    errY_L2: float
    errY_en: float
    errP_L2: float
    errP_en: float
    errU_L2: float
    Jh: float
    meta: dict = field(default_factory=dict)

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in CSV_COLUMNS)


def exact_errors(sol: Solution, exact, kappa: Field | None = None, gamma: Field | None = None) -> dict:
    from .ocp import evaluate_functional

    cfg = sol.system.config
    kappa = kappa or cfg.kappa
    gamma = gamma or cfg.gamma
    disc = sol.disc
    return dict(
        errY_L2=l2_error_state(disc, sol.y, exact.y),
        errY_en=energy_error(disc, sol.y, exact.y, exact.grad_y, kappa, gamma),
        errP_L2=l2_error_state(disc, sol.p, exact.p),
        errP_en=energy_error(disc, sol.p, exact.p, exact.grad_p, kappa, gamma),
        errU_L2=control_error(sol.mesh, sol.system.cs, sol.u, exact.u),
        Jh=evaluate_functional(sol),
    )


# ---------------------------------------------------------------------------
# rate fitting


@dataclass(frozen=True)
class RateFit:
    slope: float  # NaN if fewer than two usable rows
    pairwise: tuple[float, ...]
    used: tuple[int, ...]
    excluded: tuple[int, ...]


def fit_rates(h: Sequence[float], err: Sequence[float], floor: float = MACHINE_FLOOR) -> RateFit:
    """Least-squares slope of log(err) against log(h).

    Rows whose error is below ``floor`` (or not positive) are dropped with a
    logged notice.  Pairwise rates are between consecutive kept rows.
    """
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    if h.shape != err.shape or h.ndim != 1:
        raise ValueError("h and err must be 1-d arrays of equal length")
    if np.any(h <= 0):
        raise ValueError("mesh sizes must be positive")
    keep = np.isfinite(err) & (err >= floor) & (err > 0)
    excluded = tuple(int(i) for i in np.flatnonzero(~keep))
    if excluded:
        logger.info("rate fit: excluding rows %s below the precision floor %.0e", excluded, floor)
    used = np.flatnonzero(keep)
    lh, le = np.log(h[used]), np.log(err[used])
    pairwise = tuple(float((le[i + 1] - le[i]) / (lh[i + 1] - lh[i])) for i in range(len(used) - 1))
    if len(used) < 2:
        slope = float("nan")
    else:
        slope = float(np.polyfit(lh, le, 1)[0])
    return RateFit(slope, pairwise, tuple(int(i) for i in used), excluded)


@dataclass
class ErrorReport:
    rows: list[ErrorRow] = field(default_factory=list)
    min_levels: int = 3

    def append(self, row: ErrorRow) -> None:
        self.rows.append(row)

    def slopes(self, floor: float = MACHINE_FLOOR) -> dict[str, float | None]:
        """Fitted slope per error column, or None with fewer than ``min_levels`` rows."""
        out: dict[str, float | None] = {}
        h = [r.h for r in self.rows]
        for col in ERROR_COLUMNS:
            e = [getattr(r, col) for r in self.rows]
            fit = fit_rates(h, e, floor)
            out[col] = fit.slope if len(self.rows) >= self.min_levels and len(fit.used) >= 2 else None
        return out

    def to_csv(self, extra_columns: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(extra_columns) + list(CSV_COLUMNS))
        for r in self.rows:
            lead = [format_cell(r.meta.get(c)) for c in extra_columns]
            writer.writerow(lead + [format_cell(v) for v in r.values()])
        return buf.getvalue()

    def to_json(self, **extra) -> str:
        return json.dumps({"slopes": self.slopes(), **extra}, indent=2, sort_keys=True) + "\n"


def format_cell(value) -> str:
    if value is None:
        return "null"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# reference comparisons


class PointLocator:
    """Locates points in a polygonal mesh (nearest centroids, then crossing test)."""

    def __init__(self, mesh, candidates: int = 12, tol: float = 1e-12):
        self.mesh = mesh
        self.candidates = min(candidates, mesh.n_cells)
        self.tol = tol
        self.tree = cKDTree(mesh.centroids)
        nmax = max(len(c) for c in mesh.cells)
        poly = np.empty((mesh.n_cells, nmax, 2))
        for i, loop in enumerate(mesh.cells):
            xy = mesh.vertices[loop]
            poly[i, : len(loop)] = xy
            poly[i, len(loop) :] = xy[-1]
        self.poly = poly
        self.scale = float(np.median(mesh.h))

    def _inside(self, cells: np.ndarray, pts: np.ndarray) -> np.ndarray:
        a = self.poly[cells]
        b = np.roll(a, -1, axis=1)
        px, py = pts[:, None, 0], pts[:, None, 1]
        cond = (a[..., 1] > py) != (b[..., 1] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a[..., 0] + (py - a[..., 1]) * (b[..., 0] - a[..., 0]) / (b[..., 1] - a[..., 1])
        crossings = (cond & (px < xint)).sum(axis=1)
        inside = crossings % 2 == 1
        # points on an edge count as inside
        d = b - a
        L2 = (d**2).sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.clip(((pts[:, None, :] - a) * d).sum(axis=-1) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
        near = np.linalg.norm(a + s[..., None] * d - pts[:, None, :], axis=-1).min(axis=1) <= self.tol * self.scale
        return inside | near

    def locate(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        _, idx = self.tree.query(pts, k=self.candidates)
        idx = idx.reshape(len(pts), -1)
        out = np.full(len(pts), -1, dtype=np.int64)
        for j in range(idx.shape[1]):
            todo = np.flatnonzero(out < 0)
            if todo.size == 0:
                break
            hit = self._inside(idx[todo, j], pts[todo])
            out[todo[hit]] = idx[todo[hit], j]
        missing = np.flatnonzero(out < 0)
        if missing.size:
            # slow path: brute force over all cells
            for i in missing:
                allc = np.arange(self.mesh.n_cells)
                hit = self._inside(allc, np.repeat(pts[i : i + 1], len(allc), axis=0))
                if hit.any():
                    out[i] = allc[hit][0]
        if np.any(out < 0):
            bad = pts[out < 0][0]
            raise LookupError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) lies outside the reference mesh")
        return out


class ControlLocator:
    """Locates points on the control boundary of a reference mesh."""

    def __init__(self, mesh, cs: ControlSpace, tol: float = 1e-9):
        self.mesh = mesh
        self.cs = cs
        ends = mesh.vertices[mesh.edges[cs.edges]]
        self.a = ends[:, 0]
        self.d = ends[:, 1] - ends[:, 0]
        self.tree = cKDTree(self.a + 0.5 * self.d)
        self.tol = tol * float(np.max(np.linalg.norm(self.d, axis=1)))

    def locate(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        kk = min(4, len(self.a))
        _, idx = self.tree.query(pts, k=kk)
        idx = idx.reshape(len(pts), -1)
        edge = np.full(len(pts), -1, dtype=np.int64)
        par = np.zeros(len(pts))
        for j in range(idx.shape[1]):
            cand = idx[:, j]
            d = self.d[cand]
            t = ((pts - self.a[cand]) * d).sum(axis=1) / (d**2).sum(axis=1)
            dist = np.linalg.norm(self.a[cand] + t[:, None] * d - pts, axis=1)
            ok = (edge < 0) & (t >= -1e-12) & (t <= 1 + 1e-12) & (dist <= self.tol)
            edge[ok] = cand[ok]
            par[ok] = np.clip(t[ok], 0.0, 1.0)
        if np.any(edge < 0):
            bad = pts[edge < 0][0]
            raise LookupError(f"point ({bad[0]:.6g}, {bad[1]:.6g}) is not on the reference control boundary")
        return edge, par


@dataclass(eq=False)
class ReferenceField:
    """Cellwise projections of a fine solution, evaluable at arbitrary points."""

    mesh: object
    y0: CellPolynomials
    yn: CellPolynomials
    p0: CellPolynomials
    pn: CellPolynomials
    cs: ControlSpace
    u: np.ndarray
    _locator: PointLocator | None = None
    _clocator: ControlLocator | None = None

    @classmethod
    def from_solution(cls, sol: Solution) -> "ReferenceField":
        y0, yn = projected_fields(sol.disc, sol.y)
        p0, pn = projected_fields(sol.disc, sol.p)
        return cls(sol.mesh, y0, yn, p0, pn, sol.system.cs, sol.u.copy())

    @property
    def locator(self) -> PointLocator:
        if self._locator is None:
            self._locator = PointLocator(self.mesh)
        return self._locator

    @property
    def control_locator(self) -> ControlLocator:
        if self._clocator is None:
            self._clocator = ControlLocator(self.mesh, self.cs)
        return self._clocator

    def save(self, path) -> None:
        from .mesh import save_mesh

        path = str(path)
        save_mesh(self.mesh, path + ".mesh.json")
        np.savez_compressed(
            path + ".npz",
            centers=self.y0.centers,
            h=self.y0.h,
            degree=self.y0.degree,
            y0=self.y0.coefs,
            yn=self.yn.coefs,
            p0=self.p0.coefs,
            pn=self.pn.coefs,
            u=self.u,
            u_degree=self.cs.degree,
        )

    @classmethod
    def load(cls, path) -> "ReferenceField":
        from .mesh import load_mesh
        from .ocp import control_space

        path = str(path)
        mesh = load_mesh(path + ".mesh.json")
        data = np.load(path + ".npz")
        deg = int(data["degree"])

        def cp(name):
            return CellPolynomials(data["centers"], data["h"], deg, data[name])

        cs = control_space(mesh, int(data["u_degree"]))
        return cls(mesh, cp("y0"), cp("yn"), cp("p0"), cp("pn"), cs, data["u"])


def reference_errors(sol: Solution, ref: ReferenceField) -> dict:
    """Distances between a coarse solution and a reference field.

    The reference is sampled at the coarse quadrature points through point
    location in the reference mesh.
    """
    from .ocp import evaluate_functional

    cfg = sol.system.config
    disc = sol.disc
    pts, w, own = cell_quadrature(disc)
    where = ref.locator.locate(pts)
    kap = _sample(cfg.kappa, pts)
    gam = _sample(cfg.gamma, pts)
    out = {}
    for name, dofs, r0, rn in (("Y", sol.y, ref.y0, ref.yn), ("P", sol.p, ref.p0, ref.pn)):
        P0, PN = projected_fields(disc, dofs)
        dv = P0.values(own, pts) - r0.values(where, pts)
        dg = PN.gradients(own, pts) - rn.gradients(where, pts)
        l2sq = float(w @ dv**2)
        out[f"err{name}_L2"] = math.sqrt(max(l2sq, 0.0))
        out[f"err{name}_en"] = math.sqrt(max(float(w @ (kap * (dg**2).sum(axis=1) + gam * dv**2)), 0.0))
    cs = sol.system.cs
    cpts, cw, eid, t = control_points(sol.mesh, cs, 2 * max(cs.degree, ref.cs.degree) + 4)
    redge, rpar = ref.control_locator.locate(cpts)
    du = eval_control(cs, sol.u, eid, t) - eval_control(ref.cs, ref.u, redge, rpar)
    out["errU_L2"] = math.sqrt(max(float(cw @ du**2), 0.0))
    out["Jh"] = evaluate_functional(sol)
    return out
