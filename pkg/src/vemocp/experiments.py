"""Experiment drivers: convergence study, sigma sweep, stabilization-free comparison.

Every run is described by a :class:`RunSpec`, which is enough to repeat it
in isolation with ``vemocp solve --config FILE --mesh SPEC``.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import ERROR_COLUMNS, ErrorReport, ErrorRow, ReferenceField, exact_errors, reference_errors
from .forms import STABFREE, STABILIZED
from .mesh import PolyMesh, generate_cartesian, generate_star, load_mesh
from .ocp import evaluate_functional, solve_ocp
from .presets import PRESETS, SWEEP_SIGMAS, ProblemPreset, config_from_dict, tag_rule

logger = logging.getLogger(__name__)

REFERENCE_RESOLUTION = (250, 125)
REFERENCE_ORDER = 2
TEST2_MESHES = ("data:voronoi60", "data:voronoi120")


# ---------------------------------------------------------------------------
# meshes


def data_path(name: str) -> Path:
    return Path(str(resources.files("vemocp") / "data" / f"{name}.json"))


def make_mesh(spec: str, preset: ProblemPreset) -> PolyMesh:
    """Resolve a mesh spec: ``cartesian:N``, ``star:N``, ``data:NAME`` or a JSON path.

    ``N`` is the number of cells per unit length, so ``cartesian:8`` on the
    (0,2)x(0,1) domain is a 16x8 grid.
    """
    kind, _, arg = spec.partition(":")
    if kind in ("cartesian", "star"):
        try:
            n = int(arg)
        except ValueError:
            raise ValueError(f"bad mesh spec {spec!r}: expected {kind}:N") from None
        if n < 1:
            raise ValueError("mesh resolution must be positive")
        x0, y0, x1, y1 = preset.rect
        nx, ny = round(n * (x1 - x0)), round(n * (y1 - y0))
        rule = tag_rule(preset.tags)
        if kind == "cartesian":
            return generate_cartesian(nx, ny, rect=preset.rect, tag_rule=rule, obs_rects=preset.obs_rects)
        if nx != ny:
            raise ValueError("star meshes are generated on square domains only")
        return generate_star(n, rect=preset.rect, tag_rule=rule, obs_rects=preset.obs_rects)
    if kind == "data":
        mesh = load_mesh(data_path(arg))
    else:
        mesh = load_mesh(spec)
    # boundary tags from the file; observation flags follow the preset when given
    if preset.obs_rects and not mesh.obs_rects:
        mesh = mesh.with_obs(preset.obs_rects)
    return mesh


# ---------------------------------------------------------------------------
# single runs


@dataclass(frozen=True)
class RunSpec:
    preset: str
    mesh: str
    k: int
    k_u: int | None = None
    sigma: float | None = 1.0
    scheme: str = STABILIZED

    @property
    def key(self) -> tuple:
        return (self.mesh, self.scheme, self.k, self.k_u or self.k, -1.0 if self.sigma is None else self.sigma)

    @property
    def run_id(self) -> str:
        mesh = self.mesh.replace(":", "").replace("/", "_").replace(".json", "")
        sig = "none" if self.sigma is None else f"{self.sigma:g}"
        return f"{self.preset}-{mesh}-{self.scheme}-k{self.k}-ku{self.k_u or self.k}-s{sig}"

    def config_dict(self) -> dict:
        d = PRESETS[self.preset].to_dict(k=self.k, sigma=self.sigma, k_u=self.k_u, scheme=self.scheme)
        d["preset"] = self.preset
        return d


def run_one(run: RunSpec, reference: ReferenceField | str | None = None) -> ErrorRow:
    return run_config(run.config_dict(), run.mesh, reference)


_DATA_KEYS = ("alpha", "kappa", "gamma", "f", "y_d", "g", "tags")


def run_config(data: dict, mesh_spec: str, reference: ReferenceField | str | None = None) -> ErrorRow:
    """Solve one problem config on one mesh and measure its errors.

    Errors are taken against the preset's exact solution, or against the
    reference field for presets without one.  Configs that change preset
    data (or name no preset) only report J_h; their error columns are NaN.
    """
    name = data.get("preset")
    preset = PRESETS.get(name) if name else None
    if name and preset is None:
        raise ValueError(f"unknown preset {name!r}")
    cfg = config_from_dict(data)
    if preset is not None:
        base = preset.to_dict()
        pristine = all(data.get(key, base[key]) == base[key] for key in _DATA_KEYS)
        mesh = make_mesh(mesh_spec, preset)
    else:
        pristine = False
        generic = ProblemPreset("custom", tuple(data.get("domain", (0.0, 0.0, 1.0, 1.0))), data.get("tags", "test1"),
                                cfg.alpha, "1", "1", "0", "0", "0")
        mesh = make_mesh(mesh_spec, generic)
    sol = solve_ocp(mesh, cfg)
    if pristine and preset.exact is not None:
        errs = exact_errors(sol, preset.exact)
    elif pristine:
        if reference is None:
            raise ValueError(f"preset {name!r} has no exact solution; a reference is required")
        if not isinstance(reference, ReferenceField):
            reference, _ = load_or_build_reference(reference)
        errs = reference_errors(sol, reference)
    else:
        errs = {c: float("nan") for c in ERROR_COLUMNS}
        errs["Jh"] = evaluate_functional(sol)
    meta = {
        "mesh": mesh_spec,
        "scheme": cfg.scheme,
        "k": cfg.k,
        "k_u": cfg.k_u,
        "sigma": None if cfg.scheme == STABFREE else data.get("sigma", cfg.sigma),
        "cells": mesh.n_cells,
        "residual": sol.residual,
        "opt_residual": sol.optimality_residual() / max(np.linalg.norm(sol.system.rhs), 1e-300),
    }
    ndof = sol.system.n_y + sol.system.n_u + sol.system.n_y
    return ErrorRow(h=float(mesh.h), ndof=int(ndof), meta=meta, **errs)


_WORKER_REF: ReferenceField | None = None


def _worker_init(ref_path):
    global _WORKER_REF
    _WORKER_REF = ReferenceField.load(ref_path) if ref_path else None


def _worker(run: RunSpec) -> ErrorRow:
    return run_one(run, _WORKER_REF)


def run_many(runs: Sequence[RunSpec], reference=None, jobs: int = 1) -> list[ErrorRow]:
    """Execute runs (optionally in worker processes); rows come back sorted by key."""
    order = sorted(range(len(runs)), key=lambda i: runs[i].key)
    runs = [runs[i] for i in order]
    if jobs <= 1 or len(runs) <= 1:
        rows = []
        for r in runs:
            logger.info("run %s", r.run_id)
            rows.append(run_one(r, reference))
        return rows
    ref_path = None
    if isinstance(reference, ReferenceField):
        raise ValueError("parallel runs need the reference as a saved path")
    ref_path = reference
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(ref_path,)) as pool:
        return list(pool.map(_worker, runs))


# ---------------------------------------------------------------------------
# reference solution


def reference_cache_path(cache_dir: str | os.PathLike | None = None) -> Path:
    base = Path(cache_dir) if cache_dir else Path(os.environ.get("VEMOCP_CACHE", Path.home() / ".cache" / "vemocp"))
    nx, ny = REFERENCE_RESOLUTION
    return base / f"test2-reference-cartesian{nx}x{ny}-k{REFERENCE_ORDER}"


def build_reference(preset: ProblemPreset | None = None, resolution=REFERENCE_RESOLUTION, k: int = REFERENCE_ORDER) -> ReferenceField:
    """Fine stabilized solution (sigma = 1) on a Cartesian grid fitted to the observation region."""
    preset = preset or PRESETS["test2"]
    nx, ny = resolution
    mesh = generate_cartesian(nx, ny, rect=preset.rect, tag_rule=tag_rule(preset.tags), obs_rects=preset.obs_rects)
    sol = solve_ocp(mesh, preset.config(k=k, sigma=1.0))
    return ReferenceField.from_solution(sol)


def load_or_build_reference(path: str | os.PathLike | None = None) -> tuple[ReferenceField, Path]:
    path = Path(path) if path else reference_cache_path()
    if Path(str(path) + ".npz").exists():
        return ReferenceField.load(path), path
    logger.info("building reference solution at %s", path)
    ref = build_reference()
    path.parent.mkdir(parents=True, exist_ok=True)
    ref.save(path)
    return ref, path


# ---------------------------------------------------------------------------
# drivers


@dataclass
class ExperimentSpec:
    name: str
    preset: str = "test1"
    meshes: tuple[str, ...] = ()
    orders: tuple[int, ...] = (1,)
    sigmas: tuple[float | None, ...] = (1.0,)
    k_u: int | None = None
    scheme: str = STABILIZED
    out: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.meshes:
            raise ValueError("at least one mesh (refinement level) is required")
        if any(k not in (1, 2, 3, 4) for k in self.orders):
            raise ValueError("orders must be drawn from {1, 2, 3, 4}")
        if self.scheme == STABFREE and tuple(self.orders) != (1,):
            raise ValueError("stabilization-free runs are restricted to k = 1")

    def runs(self) -> list[RunSpec]:
        return [
            RunSpec(self.preset, m, k, self.k_u, s, self.scheme)
            for m in self.meshes
            for k in self.orders
            for s in self.sigmas
        ]


META_COLUMNS = ("mesh", "scheme", "k", "k_u", "sigma")


def write_outputs(name: str, out: str | os.PathLike, rows: Sequence[ErrorRow], summary: dict, reference: str | None = None) -> None:
    """CSV + JSON summary + one reproducing command (and config) per CSV row."""
    out = Path(out)
    (out / "configs").mkdir(parents=True, exist_ok=True)
    report = ErrorReport(list(rows))
    _atomic_write(out / f"{name}.csv", report.to_csv(META_COLUMNS))
    _atomic_write(out / f"{name}.json", json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")
    lines = []
    for r in rows:
        m = r.meta
        spec = RunSpec(summary.get("preset", "test1"), m["mesh"], m["k"], m["k_u"], m["sigma"], m["scheme"])
        cfg_path = out / "configs" / f"{spec.run_id}.json"
        _atomic_write(cfg_path, json.dumps(spec.config_dict(), indent=2, sort_keys=True) + "\n")
        cmd = f"vemocp solve --config {cfg_path} --mesh {m['mesh']}"
        if reference:
            cmd += f" --reference {reference}"
        lines.append(cmd)
    _atomic_write(out / f"{name}_commands.txt", "\n".join(lines) + "\n")


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_convergence(spec: ExperimentSpec, jobs: int = 1) -> dict[int, ErrorReport]:
    """Refinement study against the preset's exact solution, one report per order."""
    rows = run_many(spec.runs(), jobs=jobs)
    reports: dict[int, ErrorReport] = {}
    for k in spec.orders:
        sel = sorted((r for r in rows if r.meta["k"] == k), key=lambda r: -r.h)
        reports[k] = ErrorReport(sel)
    if spec.out:
        summary = {
            "preset": spec.preset,
            "meshes": list(spec.meshes),
            "slopes": {str(k): rep.slopes() for k, rep in reports.items()},
        }
        write_outputs(spec.name, spec.out, [r for k in spec.orders for r in reports[k].rows], summary)
    return reports


@dataclass
class SweepResult:
    rows: list[ErrorRow]
    argmin: dict  # (mesh, k) -> {column: sigma}

    def differing_state_adjoint(self) -> list[tuple[str, int]]:
        return [key for key, am in self.argmin.items() if am["errY_en"] != am["errP_en"]]

    def min_over_sigma(self, mesh: str, k: int) -> dict[str, float]:
        sel = [r for r in self.rows if r.meta["mesh"] == mesh and r.meta["k"] == k]
        return {c: min(getattr(r, c) for r in sel) for c in ERROR_COLUMNS}


def sigma_argmin(rows: Sequence[ErrorRow]) -> dict:
    groups: dict[tuple[str, int], list[ErrorRow]] = {}
    for r in rows:
        groups.setdefault((r.meta["mesh"], r.meta["k"]), []).append(r)
    out = {}
    for key, sel in sorted(groups.items()):
        out[key] = {c: min(sel, key=lambda r: getattr(r, c)).meta["sigma"] for c in ERROR_COLUMNS}
    return out


def run_sigma_sweep(
    spec: ExperimentSpec | None = None,
    reference: ReferenceField | str | None = None,
    jobs: int = 1,
) -> SweepResult:
    spec = spec or ExperimentSpec("sigma_sweep", "test2", TEST2_MESHES, (1, 2, 3, 4), SWEEP_SIGMAS)
    ref_path = None
    if reference is None or isinstance(reference, (str, os.PathLike)):
        reference, ref_path = load_or_build_reference(reference)
    rows = run_many(spec.runs(), reference=str(ref_path) if (jobs > 1 and ref_path) else reference, jobs=jobs)
    result = SweepResult(rows, sigma_argmin(rows))
    if spec.out:
        summary = {
            "preset": spec.preset,
            "argmin_sigma": {f"{m}|k={k}": v for (m, k), v in result.argmin.items()},
            "state_adjoint_energy_argmin_differs": [f"{m}|k={k}" for m, k in result.differing_state_adjoint()],
        }
        write_outputs(spec.name, spec.out, rows, summary, str(ref_path) if ref_path else None)
    return result


@dataclass
class StabFreeComparison:
    rows: list[ErrorRow]  # one stabilization-free row per mesh
    stabilized_min: dict  # mesh -> {column: min over sigma}
    ratios: dict  # mesh -> {column: stabfree / min}
    within: dict  # mesh -> {column: bool}
    factor: float


def run_stabfree_compare(
    meshes: Sequence[str] = TEST2_MESHES,
    reference: ReferenceField | str | None = None,
    sweep: SweepResult | None = None,
    factor: float = 2.0,
    out: str | None = None,
    jobs: int = 1,
) -> StabFreeComparison:
    ref_path = None
    if reference is None or isinstance(reference, (str, os.PathLike)):
        reference, ref_path = load_or_build_reference(reference)
    if sweep is None:
        sweep = run_sigma_sweep(ExperimentSpec("sigma_sweep_k1", "test2", tuple(meshes), (1,), SWEEP_SIGMAS), reference)
    runs = [RunSpec("test2", m, 1, None, None, STABFREE) for m in meshes]
    rows = run_many(runs, reference)
    stab_min, ratios, within = {}, {}, {}
    for r in rows:
        m = r.meta["mesh"]
        stab_min[m] = sweep.min_over_sigma(m, 1)
        ratios[m] = {c: getattr(r, c) / stab_min[m][c] for c in ERROR_COLUMNS}
        within[m] = {c: bool(ratios[m][c] <= factor) for c in ERROR_COLUMNS}
    result = StabFreeComparison(rows, stab_min, ratios, within, factor)
    if out:
        k1 = [r for r in sweep.rows if r.meta["k"] == 1 and r.meta["mesh"] in meshes]
        summary = {"preset": "test2", "factor": factor, "ratio_to_min_stabilized": ratios, "within_factor": within}
        write_outputs("stabfree_compare", out, k1 + rows, summary, str(ref_path) if ref_path else None)
    return result


__all__ = [
    "ExperimentSpec",
    "RunSpec",
    "SweepResult",
    "StabFreeComparison",
    "build_reference",
    "load_or_build_reference",
    "make_mesh",
    "run_convergence",
    "run_many",
    "run_config",
    "run_one",
    "run_sigma_sweep",
    "run_stabfree_compare",
]
