"""Polygonal meshes: data model, generators, JSON I/O and quality checks."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
CONTROL = "control"
INTERIOR = "interior"
BOUNDARY_TAGS = (DIRICHLET, NEUMANN, CONTROL)

TagRule = Callable[[np.ndarray], str]
Rect = tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


class MeshError(ValueError):
    """Invalid mesh topology, geometry or tagging."""


def signed_area(xy: np.ndarray) -> float:
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True, eq=False)
class CellGeometry:
    vertices: np.ndarray
    area: float
    centroid: np.ndarray
    diameter: float
    edge_lengths: np.ndarray
    normals: np.ndarray  # outward unit normals, one per edge v_i -> v_{i+1}

    @property
    def triangles(self) -> list[np.ndarray]:
        """Fan triangulation from the centroid."""
        v = self.vertices
        return [np.array([self.centroid, v[i], v[(i + 1) % len(v)]]) for i in range(len(v))]

    @property
    def perimeter(self) -> float:
        return float(self.edge_lengths.sum())


def polygon_geometry(xy) -> CellGeometry:
    xy = np.asarray(xy, dtype=float)
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if area <= 0.0:
        raise MeshError("negative area (cell vertices must be counterclockwise)")
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    d = xy[:, None, :] - xy[None, :, :]
    diameter = float(np.sqrt((d**2).sum(-1)).max())
    t = np.column_stack([xn - x, yn - y])
    lengths = np.hypot(t[:, 0], t[:, 1])
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = np.column_stack([t[:, 1], -t[:, 0]]) / lengths[:, None]
    return CellGeometry(xy, float(area), np.array([cx, cy]), diameter, lengths, normals)


@dataclass(frozen=True)
class MeshQuality:
    kappa_star_shape: np.ndarray  # per cell: rho / h_E
    kappa_edge_cells: np.ndarray  # per cell: min_e |e| / h_E

    @property
    def kappa_star(self) -> float:
        return float(self.kappa_star_shape.min())

    @property
    def kappa_edge(self) -> float:
        return float(self.kappa_edge_cells.min())


@dataclass(frozen=True, eq=False)
class PolyMesh:
    """Immutable conforming polygonal mesh.

    ``edges[e]`` stores the vertex pair with the smaller index first; that is
    the canonical orientation used for edge degrees of freedom.
    """

    vertices: np.ndarray
    cells: tuple[np.ndarray, ...]
    edges: np.ndarray
    edge_cells: np.ndarray  # (ne, 2), -1 where absent
    cell_edges: tuple[np.ndarray, ...]
    edge_tags: tuple[str, ...]
    obs_flags: np.ndarray
    obs_rects: tuple[Rect, ...] | None = None

    @classmethod
    def build(
        cls,
        vertices,
        cells: Sequence[Sequence[int]],
        tags: Mapping[tuple[int, int], str] | TagRule,
        obs_flags=None,
        obs_rects: Sequence[Rect] | None = None,
    ) -> "PolyMesh":
        """Derive edges, check structural invariants and return the mesh.

        ``tags`` is either a map from vertex pairs to boundary tags or a
        rule evaluated on boundary-edge midpoints.
        """
        verts = np.asarray(vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise MeshError("vertices must be an (n, 2) array")
        nv = len(verts)
        cell_arrays = []
        for c, loop in enumerate(cells):
            loop = np.asarray(loop, dtype=np.int64)
            if loop.size < 3:
                raise MeshError(f"cell {c} has fewer than 3 vertices")
            if loop.min() < 0 or loop.max() >= nv:
                raise MeshError(f"cell {c} references a missing vertex")
            if len(set(loop.tolist())) != loop.size:
                raise MeshError(f"cell {c} repeats a vertex")
            if signed_area(verts[loop]) <= 0.0:
                raise MeshError(f"cell {c} has negative area (clockwise or degenerate)")
            if not _is_simple(verts[loop]):
                raise MeshError(f"cell {c} is not a simple polygon")
            cell_arrays.append(loop)

        edge_index: dict[tuple[int, int], int] = {}
        edge_list: list[tuple[int, int]] = []
        edge_cells: list[list[int]] = []
        edge_dirs: list[list[int]] = []
        cell_edges = []
        for c, loop in enumerate(cell_arrays):
            ce = np.empty(loop.size, dtype=np.int64)
            nxt = np.roll(loop, -1)
            for i, (a, b) in enumerate(zip(loop.tolist(), nxt.tolist())):
                key = (a, b) if a < b else (b, a)
                e = edge_index.get(key)
                if e is None:
                    e = len(edge_list)
                    edge_index[key] = e
                    edge_list.append(key)
                    edge_cells.append([c])
                    edge_dirs.append([1 if a < b else -1])
                else:
                    if len(edge_cells[e]) >= 2:
                        raise MeshError(f"edge {key} is shared by more than two cells")
                    if edge_dirs[e][0] == (1 if a < b else -1):
                        raise MeshError(f"cells {edge_cells[e][0]} and {c} overlap along edge {key}")
                    edge_cells[e].append(c)
                    edge_dirs[e].append(1 if a < b else -1)
                ce[i] = e
            cell_edges.append(ce)

        edges = np.array(edge_list, dtype=np.int64).reshape(-1, 2)
        ec = np.full((len(edges), 2), -1, dtype=np.int64)
        for e, cs in enumerate(edge_cells):
            ec[e, : len(cs)] = cs
        used = np.zeros(nv, dtype=bool)
        used[edges.ravel()] = True
        if not used.all():
            raise MeshError(f"vertex {int(np.flatnonzero(~used)[0])} is not used by any cell")

        boundary = ec[:, 1] < 0
        edge_tags = []
        for e, (a, b) in enumerate(edge_list):
            if not boundary[e]:
                edge_tags.append(INTERIOR)
                continue
            if callable(tags):
                tag = tags(0.5 * (verts[a] + verts[b]))
            else:
                tag = tags.get((a, b), tags.get((b, a)))
            if tag is None:
                raise MeshError(f"boundary edge ({a}, {b}) has no tag")
            if tag not in BOUNDARY_TAGS:
                raise MeshError(f"boundary edge ({a}, {b}) has invalid tag {tag!r}")
            edge_tags.append(tag)
        if not callable(tags):
            for key in tags:
                a, b = key
                e = edge_index.get((min(a, b), max(a, b)))
                if e is None or not boundary[e]:
                    raise MeshError(f"tagged pair {tuple(key)} is not a boundary edge")

        if obs_flags is None:
            flags = np.ones(len(cell_arrays), dtype=bool)
        else:
            flags = np.asarray(obs_flags, dtype=bool)
            if flags.shape != (len(cell_arrays),):
                raise MeshError("obs_flags must have one entry per cell")

        mesh = cls(
            verts,
            tuple(cell_arrays),
            edges,
            ec,
            tuple(cell_edges),
            tuple(edge_tags),
            flags,
            tuple(tuple(map(float, r)) for r in obs_rects) if obs_rects else None,
        )
        mesh._check_hanging_nodes()
        if obs_rects:
            mesh._check_obs_conformity()
        return mesh

    # -- derived quantities -------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def geometries(self) -> tuple[CellGeometry, ...]:
        return tuple(polygon_geometry(self.vertices[c]) for c in self.cells)

    @cached_property
    def h(self) -> float:
        return max(g.diameter for g in self.geometries)

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def edges_with_tag(self, tag: str) -> np.ndarray:
        return np.array([e for e, t in enumerate(self.edge_tags) if t == tag], dtype=np.int64)

    @cached_property
    def centroids(self) -> np.ndarray:
        return np.array([g.centroid for g in self.geometries])

    def retag(self, tags: Mapping[tuple[int, int], str] | TagRule) -> "PolyMesh":
        """Same geometry with new boundary tags."""
        return PolyMesh.build(self.vertices, self.cells, tags, self.obs_flags, self.obs_rects)

    def with_obs(self, obs_rects: Sequence[Rect] | None) -> "PolyMesh":
        """Flag cells by centroid membership in ``obs_rects`` (None: whole domain)."""
        flags = cells_in_rects(self.centroids, obs_rects)
        tags = {tuple(self.edges[e]): t for e, t in enumerate(self.edge_tags) if t != INTERIOR}
        return PolyMesh.build(self.vertices, self.cells, tags, flags, obs_rects)

    # -- invariant checks -----------------------------------------------------

    def _check_hanging_nodes(self) -> None:
        # A vertex strictly inside another edge means a non-conforming junction.
        tree = cKDTree(self.vertices)
        a = self.vertices[self.edges[:, 0]]
        b = self.vertices[self.edges[:, 1]]
        mids = 0.5 * (a + b)
        lengths = self.edge_lengths
        hits = tree.query_ball_point(mids, 0.5 * lengths * (1.0 + 1e-9))
        for e, cand in enumerate(hits):
            if len(cand) <= 2:
                continue
            i, j = self.edges[e]
            t = b[e] - a[e]
            for v in cand:
                if v == i or v == j:
                    continue
                w = self.vertices[v] - a[e]
                s = np.dot(w, t) / lengths[e] ** 2
                dist = abs(t[0] * w[1] - t[1] * w[0]) / lengths[e]
                if 0.0 < s < 1.0 and dist <= 1e-10 * lengths[e]:
                    raise MeshError(f"non-conforming mesh: vertex {v} lies inside edge ({i}, {j})")

    def _check_obs_conformity(self, tol: float = 1e-10) -> None:
        rects = np.array(self.obs_rects)
        for c, loop in enumerate(self.cells):
            xy = self.vertices[loop]
            inside_closed = np.array([_in_any_rect(p, rects, -tol) for p in xy])
            inside_open = np.array([_in_any_rect(p, rects, tol) for p in xy])
            if self.obs_flags[c]:
                if not inside_closed.all() or not _in_any_rect(self.geometries[c].centroid, rects, tol):
                    raise MeshError(f"cell {c} straddles the observation region boundary")
            elif inside_open.any() or _in_any_rect(self.geometries[c].centroid, rects, tol):
                raise MeshError(f"cell {c} straddles the observation region boundary")

    # -- serialization --------------------------------------------------------

    def to_json_dict(self) -> dict:
        data = {
            "vertices": [[float(x), float(y)] for x, y in self.vertices],
            "cells": [[int(i) for i in c] for c in self.cells],
            "boundary": [
                {"edge": [int(self.edges[e, 0]), int(self.edges[e, 1])], "tag": t}
                for e, t in enumerate(self.edge_tags)
                if t != INTERIOR
            ],
            "obs_cells": [int(c) for c in np.flatnonzero(self.obs_flags)],
        }
        if self.obs_rects:
            data["obs_rects"] = [list(r) for r in self.obs_rects]
        return data


def _in_any_rect(p, rects: np.ndarray, tol: float) -> bool:
    """Membership in the union of rectangles shrunk by ``tol`` (negative tol grows them)."""
    x, y = p
    return bool(
        np.any(
            (rects[:, 0] + tol < x) & (x < rects[:, 2] - tol) & (rects[:, 1] + tol < y) & (y < rects[:, 3] - tol)
        )
    )


def cells_in_rects(points: np.ndarray, rects: Sequence[Rect] | None) -> np.ndarray:
    if not rects:
        return np.ones(len(points), dtype=bool)
    r = np.asarray(rects, dtype=float)
    return np.array([_in_any_rect(p, r, 0.0) for p in points], dtype=bool)


def _is_simple(xy: np.ndarray) -> bool:
    n = len(xy)
    if n == 3:
        return True
    a = xy
    b = np.roll(xy, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    p, r = a[i], b[i] - a[i]
    q, s = a[j], b[j] - a[j]
    rxs = r[:, 0] * s[:, 1] - r[:, 1] * s[:, 0]
    qp = q - p
    t_num = qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]
    u_num = qp[:, 0] * r[:, 1] - qp[:, 1] * r[:, 0]
    par = np.abs(rxs) < 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        t = t_num / rxs
        u = u_num / rxs
    cross = ~par & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    # collinear overlapping non-adjacent segments
    col = par & (np.abs(u_num) < 1e-300)
    if np.any(col):
        rr = (r**2).sum(1)
        t0 = (qp * r).sum(1) / rr
        t1 = t0 + (s * r).sum(1) / rr
        lo, hi = np.minimum(t0, t1), np.maximum(t0, t1)
        cross |= col & (hi >= 0) & (lo <= 1)
    return not bool(cross.any())


# ---------------------------------------------------------------------------
# geometry and quality


def cell_geometry(mesh: PolyMesh, cell: int) -> CellGeometry:
    return mesh.geometries[cell]


def star_shape_radius(geom: CellGeometry) -> float:
    """Radius of the largest centroid-centred disc inside the kernel half-planes.

    Non-positive when the centroid does not see every edge.
    """
    d = geom.centroid - geom.vertices
    return float(np.min(-(d * geom.normals).sum(axis=1)))


def validate(mesh: PolyMesh, floor: float = 1e-6) -> MeshQuality:
    """Mesh-regularity constants (star shape and edge length, both relative to h_E)."""
    star = np.empty(mesh.n_cells)
    edge = np.empty(mesh.n_cells)
    for c, g in enumerate(mesh.geometries):
        star[c] = star_shape_radius(g) / g.diameter
        edge[c] = g.edge_lengths.min() / g.diameter
    for name, arr in (("edge length", edge), ("star-shape", star)):
        bad = np.flatnonzero(~(arr > floor))
        if bad.size:
            c = int(bad[0])
            raise MeshError(f"cell {c}: {name} ratio {arr[c]:.3e} is below the floor {floor:g}")
    return MeshQuality(star, edge)


# ---------------------------------------------------------------------------
# boundary tag rules


def _near(a, b, tol=1e-10) -> bool:
    return abs(a - b) <= tol


def test1_tags(mid: np.ndarray) -> str:
    """Control on {0} x (0,1), Dirichlet elsewhere."""
    return CONTROL if _near(mid[0], 0.0) else DIRICHLET


def test2_tags(mid: np.ndarray) -> str:
    """Domain (0,2)x(0,1): control on (1,2)x{0,1}, Neumann on {2}x(0,1)."""
    x, y = mid
    if _near(x, 2.0):
        return NEUMANN
    if x > 1.0 and (_near(y, 0.0) or _near(y, 1.0)):
        return CONTROL
    return DIRICHLET


def all_dirichlet(mid: np.ndarray) -> str:
    return DIRICHLET


TEST2_OBS: tuple[Rect, ...] = ((1.0, 0.8, 2.0, 1.0), (1.0, 0.0, 2.0, 0.2))

TAG_PRESETS: dict[str, TagRule] = {
    "test1": test1_tags,
    "test2": test2_tags,
    "dirichlet": all_dirichlet,
}


# ---------------------------------------------------------------------------
# generators


def _check_rect(rect: Rect) -> Rect:
    x0, y0, x1, y1 = map(float, rect)
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate rectangle {rect}")
    return x0, y0, x1, y1


def generate_cartesian(
    nx: int,
    ny: int | None = None,
    rect: Rect = (0.0, 0.0, 1.0, 1.0),
    tag_rule: TagRule = test1_tags,
    obs_rects: Sequence[Rect] | None = None,
) -> PolyMesh:
    ny = nx if ny is None else ny
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    x0, y0, x1, y1 = _check_rect(rect)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    cells = [
        [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)] for j in range(ny) for i in range(nx)
    ]
    mesh = PolyMesh.build(verts, cells, tag_rule)
    return mesh.with_obs(obs_rects) if obs_rects else mesh


def generate_star(
    n: int,
    rect: Rect = (0.0, 0.0, 1.0, 1.0),
    tag_rule: TagRule = test1_tags,
    indent: float = 0.2,
    obs_rects: Sequence[Rect] | None = None,
) -> PolyMesh:
    """n x n grid whose interior edges are kinked at the midpoint.

    Each interior edge gets a midpoint vertex pushed sideways by
    ``indent`` times the edge length, alternating direction in a
    checkerboard pattern, so interior cells become non-convex octagons.
    Edges on the observation-region boundary stay straight.
    """
    if n < 2:
        raise MeshError("star mesh needs n >= 2")
    if not 0.0 < indent < 0.5:
        raise MeshError("indent must lie in (0, 0.5)")
    x0, y0, x1, y1 = _check_rect(rect)
    hx, hy = (x1 - x0) / n, (y1 - y0) / n
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = [tuple(p) for p in np.column_stack([X.ravel(), Y.ravel()])]
    rects = np.asarray(obs_rects, dtype=float) if obs_rects else None

    def vid(i, j):
        return j * (n + 1) + i

    def on_obs_boundary(p):
        if rects is None:
            return False
        x, y = p
        tol = 1e-12
        for r in rects:
            on_v = (abs(x - r[0]) < tol or abs(x - r[2]) < tol) and r[1] - tol <= y <= r[3] + tol
            on_h = (abs(y - r[1]) < tol or abs(y - r[3]) < tol) and r[0] - tol <= x <= r[2] + tol
            if on_v or on_h:
                return True
        return False

    # midpoint vertex of vertical interior edge between columns i-1|i at row j
    vmid: dict[tuple[int, int], int] = {}
    for j in range(n):
        for i in range(1, n):
            mid = (xs[i], 0.5 * (ys[j] + ys[j + 1]))
            if on_obs_boundary(mid):
                continue
            sign = 1.0 if (i + j) % 2 == 0 else -1.0
            vmid[(i, j)] = len(verts)
            verts.append((mid[0] + sign * indent * hx, mid[1]))
    hmid: dict[tuple[int, int], int] = {}
    for j in range(1, n):
        for i in range(n):
            mid = (0.5 * (xs[i] + xs[i + 1]), ys[j])
            if on_obs_boundary(mid):
                continue
            sign = 1.0 if (i + j) % 2 == 0 else -1.0
            hmid[(i, j)] = len(verts)
            verts.append((mid[0], mid[1] + sign * indent * hy))

    cells = []
    for j in range(n):
        for i in range(n):
            loop = [vid(i, j)]
            if (i, j) in hmid:
                loop.append(hmid[(i, j)])
            loop.append(vid(i + 1, j))
            if (i + 1, j) in vmid:
                loop.append(vmid[(i + 1, j)])
            loop.append(vid(i + 1, j + 1))
            if (i, j + 1) in hmid:
                loop.append(hmid[(i, j + 1)])
            loop.append(vid(i, j + 1))
            if (i, j) in vmid:
                loop.append(vmid[(i, j)])
            cells.append(loop)
    mesh = PolyMesh.build(np.array(verts), cells, tag_rule)
    return mesh.with_obs(obs_rects) if obs_rects else mesh


# ---------------------------------------------------------------------------
# JSON I/O


def mesh_from_dict(data: dict) -> PolyMesh:
    try:
        vertices = np.asarray(data["vertices"], dtype=float)
        cells = [list(map(int, c)) for c in data["cells"]]
        boundary = data["boundary"]
        tags = {}
        for item in boundary:
            a, b = (int(v) for v in item["edge"])
            tags[(a, b)] = str(item["tag"]).lower()
        obs = data.get("obs_cells")
        obs_rects = data.get("obs_rects")
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"mesh file does not match the schema: {exc}") from exc
    flags = None
    if obs is not None:
        flags = np.zeros(len(cells), dtype=bool)
        flags[np.asarray(obs, dtype=np.int64)] = True
    return PolyMesh.build(vertices, cells, tags, flags, obs_rects)


def load_mesh(path: str | Path) -> PolyMesh:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MeshError(f"{path}: not valid JSON ({exc})") from exc
    mesh = mesh_from_dict(data)
    validate(mesh)
    return mesh


def save_mesh(mesh: PolyMesh, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mesh.to_json_dict()) + "\n")
