"""Generate the Voronoi sample meshes shipped in ``src/vemocp/data``.

Recipe (deterministic for a given seed):

1. split the domain into sub-rectangles whose edges follow the lines the
   mesh has to resolve (observation region boundaries);
2. in every sub-rectangle, build a bounded Voronoi diagram by reflecting
   the seeds across the four sides, then run Lloyd iterations;
3. glue the pieces: vertices on a shared line closer than a fraction of the
   local cell size are merged, and every remaining vertex lying inside a
   neighbour's edge is inserted into that edge, so no hanging nodes remain.

Usage::

    python scripts/make_voronoi_meshes.py [--out src/vemocp/data]
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from scipy.spatial import Voronoi

from vemocp.mesh import TEST2_OBS, PolyMesh, save_mesh, test1_tags, test2_tags, validate


def bounded_voronoi(seeds: np.ndarray, rect) -> list[np.ndarray]:
    x0, y0, x1, y1 = rect
    s = seeds
    mirrored = [
        s,
        np.column_stack([2 * x0 - s[:, 0], s[:, 1]]),
        np.column_stack([2 * x1 - s[:, 0], s[:, 1]]),
        np.column_stack([s[:, 0], 2 * y0 - s[:, 1]]),
        np.column_stack([s[:, 0], 2 * y1 - s[:, 1]]),
    ]
    vor = Voronoi(np.vstack(mirrored))
    cells = []
    for i in range(len(s)):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or not region:
            raise RuntimeError("unbounded Voronoi region")
        xy = vor.vertices[region].copy()
        # snap round-off onto the rectangle
        for col, lo, hi in ((0, x0, x1), (1, y0, y1)):
            xy[np.abs(xy[:, col] - lo) < 1e-10, col] = lo
            xy[np.abs(xy[:, col] - hi) < 1e-10, col] = hi
        c = xy.mean(axis=0)
        order = np.argsort(np.arctan2(xy[:, 1] - c[1], xy[:, 0] - c[0]))
        cells.append(xy[order])
    return cells


def polygon_centroid(xy: np.ndarray) -> np.ndarray:
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6 * a)


def lloyd(rect, n: int, rng: np.random.Generator, iterations: int = 60) -> list[np.ndarray]:
    x0, y0, x1, y1 = rect
    seeds = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    for _ in range(iterations):
        cells = bounded_voronoi(seeds, rect)
        seeds = np.array([polygon_centroid(c) for c in cells])
    return bounded_voronoi(seeds, rect)


def _snap_lines(polys: list[np.ndarray], lines, fixed: np.ndarray, tol: float) -> list[np.ndarray]:
    """Merge nearby vertices lying on the given axis-aligned lines."""
    for axis, value, lo, hi in lines:
        pts = np.concatenate([p[np.abs(p[:, axis] - value) < 1e-12] for p in polys])
        s = np.unique(np.round(pts[:, 1 - axis], 13))
        s = s[(s >= lo - 1e-12) & (s <= hi + 1e-12)]
        # greedy clustering along the line
        clusters: list[list[float]] = []
        for v in s:
            if clusters and v - clusters[-1][-1] < tol:
                clusters[-1].append(v)
            else:
                clusters.append([v])
        target = {}
        for cl in clusters:
            anchors = [v for v in cl if np.any(np.all(np.isclose(fixed, _on(axis, value, v), atol=1e-12), axis=1))]
            rep = anchors[0] if anchors else float(np.mean(cl))
            for v in cl:
                target[v] = rep
        for p in polys:
            on = np.abs(p[:, axis] - value) < 1e-12
            for i in np.flatnonzero(on):
                key = np.round(p[i, 1 - axis], 13)
                if key in target:
                    p[i, 1 - axis] = target[key]
    return polys


def _on(axis: int, value: float, t: float) -> np.ndarray:
    return np.array([value, t]) if axis == 0 else np.array([t, value])


def glue(polys: list[np.ndarray], tol: float = 1e-10):
    """Global vertex numbering with hanging-node insertion."""
    allpts = np.vstack(polys)
    key = np.round(allpts / tol).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    verts = allpts[first]
    cells, pos = [], 0
    for p in polys:
        ids = inverse.ravel()[pos : pos + len(p)]
        pos += len(p)
        loop = [int(ids[0])]
        for v in ids[1:]:
            if int(v) != loop[-1]:
                loop.append(int(v))
        if loop[-1] == loop[0]:
            loop.pop()
        cells.append(loop)
    # insert vertices lying in the interior of an edge
    out = []
    for loop in cells:
        new = []
        for i, a in enumerate(loop):
            b = loop[(i + 1) % len(loop)]
            new.append(a)
            pa, pb = verts[a], verts[b]
            d = pb - pa
            L2 = d @ d
            t = (verts - pa) @ d / L2
            dist = np.abs((verts[:, 0] - pa[0]) * d[1] - (verts[:, 1] - pa[1]) * d[0]) / np.sqrt(L2)
            mid = np.flatnonzero((t > 1e-9) & (t < 1 - 1e-9) & (dist < 1e-9))
            new.extend(int(m) for m in mid[np.argsort(t[mid])])
        out.append(new)
    return verts, out


def build(rects, counts, lines, seed: int, tag_rule, obs_rects=None) -> PolyMesh:
    rng = np.random.default_rng(seed)
    polys = []
    for rect, n in zip(rects, counts):
        polys.extend(lloyd(rect, n, rng))
    corners = np.array([[r[0], r[1]] for r in rects] + [[r[2], r[3]] for r in rects]
                       + [[r[0], r[3]] for r in rects] + [[r[2], r[1]] for r in rects])
    h = np.sqrt(sum((r[2] - r[0]) * (r[3] - r[1]) for r in rects) / sum(counts))
    polys = _snap_lines(polys, lines, corners, 0.3 * h)
    verts, cells = glue(polys)
    mesh = PolyMesh.build(verts, cells, tag_rule)
    if obs_rects:
        mesh = mesh.with_obs(obs_rects)
    validate(mesh)
    return mesh


TEST2_RECTS = ((0.0, 0.0, 1.0, 1.0), (1.0, 0.0, 2.0, 0.2), (1.0, 0.2, 2.0, 0.8), (1.0, 0.8, 2.0, 1.0))
TEST2_LINES = ((0, 1.0, 0.0, 1.0), (1, 0.2, 1.0, 2.0), (1, 0.8, 1.0, 2.0))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "src" / "vemocp" / "data")
    args = ap.parse_args(argv)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, counts, seed in (("voronoi60", (30, 6, 18, 6), 60), ("voronoi120", (60, 12, 36, 12), 120)):
        mesh = build(TEST2_RECTS, counts, TEST2_LINES, seed, test2_tags, TEST2_OBS)
        save_mesh(mesh, args.out / f"{name}.json")
        q = validate(mesh)
        print(f"{name}: {mesh.n_cells} cells, kappa_star={q.kappa_star:.3f}, kappa_edge={q.kappa_edge:.3f}")
    mesh = build(((0.0, 0.0, 1.0, 1.0),), (48,), (), 7, test1_tags)
    save_mesh(mesh, args.out / "voronoi_square48.json")
    q = validate(mesh)
    print(f"voronoi_square48: {mesh.n_cells} cells, kappa_star={q.kappa_star:.3f}, kappa_edge={q.kappa_edge:.3f}")


if __name__ == "__main__":
    main()
