"""Iterate minimizing-movement steps into the approximate flat flow.

Every step re-references onto the accepted surface: step k + 1
minimizes relative to E_k, never to the seed.  The driver manages the
remesh policy (fields are never transferred; everything is recomputed
from geometry, so a restart from a snapshot reproduces the trajectory
exactly), records the full per-step diagnostic ledger, and halts early
with a reported status on step failure or shape-health failure.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import laplace_beltrami as lb
from . import normal_graph as ng
from .geometry import (DiscreteSurface, build_shape, compute_curvature,
                       estimate_ubc_radius, measure, save_surface,
                       _signed_area)
from .mm_step import StepConfig, step

__all__ = [
    "FlowConfig",
    "StepRecord",
    "FlowResult",
    "run",
    "self_convergence",
    "DIAG_COLUMNS",
    "DIAG_HEADER",
]

DIAG_HEADER = "# flatflow-diag v1"
DIAG_COLUMNS = (
    "step", "time", "perimeter", "volumes", "distance", "distance_over_h",
    "max_psi", "l2_psi", "l2_lap_psi", "constraint_margin", "lyapunov",
    "el_residual", "picard_iters", "ubc_estimate", "v_max", "v_l2",
)


@dataclass(frozen=True)
class FlowConfig:
    """Flow parameters: shape spec, step config, horizon, remesh policy.

    ``delta = None`` in the step config resolves per step to one eighth
    of the current UBC-radius estimate (conservative stand-in for the
    smallness thresholds the constraint radius must respect); a user
    delta is additionally capped by the same bound.
    """

    shape: dict
    step: StepConfig
    n_steps: int | None = None
    t_final: float | None = None
    remesh: str = "auto"  # auto | arc_length_2d | quality_3d | off
    snapshot_every: int = 0
    quality_ratio: float = 1.5
    min_angle_deg: float = 15.0
    edge_ratio_cap: float = 4.0

    def __post_init__(self):
        if self.n_steps is None and self.t_final is None:
            raise ValueError("need n_steps or t_final")
        if self.n_steps is not None and self.n_steps <= 0:
            raise ValueError("n_steps must be positive")
        if self.t_final is not None and self.t_final <= 0:
            raise ValueError("t_final must be positive")
        if self.n_steps is not None and self.t_final is not None:
            if abs(self.n_steps * self.step.h - self.t_final) > 1e-9 * self.t_final:
                raise ValueError("n_steps * h and t_final disagree")
        if self.remesh not in ("auto", "arc_length_2d", "quality_3d", "off"):
            raise ValueError(f"unknown remesh policy {self.remesh!r}")

    def horizon(self) -> float:
        return self.t_final if self.t_final is not None else self.n_steps * self.step.h


@dataclass
class StepRecord:
    """One accepted step of the flow ledger (CSV row order = field order)."""

    step: int
    time: float
    perimeter: float
    volumes: tuple
    distance: float
    distance_over_h: float
    max_psi: float
    l2_psi: float
    l2_lap_psi: float
    constraint_margin: float
    lyapunov: float
    el_residual: float
    picard_iters: int
    ubc_estimate: float
    v_max: float
    v_l2: float

    def csv_row(self) -> str:
        vals = []
        for name in DIAG_COLUMNS:
            v = getattr(self, name)
            if name == "volumes":
                vals.append(";".join(f"{x:.17g}" for x in v))
            elif isinstance(v, int):
                vals.append(str(v))
            else:
                vals.append(f"{v:.17g}")
        return ",".join(vals)


@dataclass
class FlowResult:
    final: DiscreteSurface
    records: list
    status: str
    halted_reason: str | None = None
    snapshots: list = field(default_factory=list)
    delta_used: float | None = None

    @property
    def ok(self) -> bool:
        return self.status == "completed"

    def summary(self) -> dict:
        m = measure(self.final)
        out = {
            "status": self.status,
            "halted_reason": self.halted_reason,
            "steps_accepted": len(self.records),
            "final_perimeter": m.perimeter,
            "final_volumes": list(m.volume_per_component),
            "delta_used": self.delta_used,
        }
        if self.records:
            out["final_time"] = self.records[-1].time
            out["dissipation_sum"] = sum(
                r.distance**2 / (2.0 * (r.time - t_prev))
                for r, t_prev in zip(self.records,
                                     [0.0] + [q.time for q in self.records[:-1]]))
            out["max_constraint_margin"] = max(r.constraint_margin for r in self.records)
            out["min_ubc_estimate"] = min(r.ubc_estimate for r in self.records)
        return out


def run(cfg: FlowConfig, out_dir=None,
        seed_surface: DiscreteSurface | None = None) -> FlowResult:
    """Produce the approximate flat flow of the configured seed.

    For every step: curvature and solver are rebuilt on the current
    surface, one incremental minimization runs, the accepted height
    field deforms the surface, and the remesh policy may resample it
    (with a per-component uniform normal shift restoring the enclosed
    volumes).  On step failure the time step is halved once for the
    rest of the run; a second failure halts.  With ``out_dir`` set the
    diagnostics stream to ``diagnostics.csv``, snapshots and a
    ``summary.json`` are written there.
    """
    surface = seed_surface if seed_surface is not None else build_shape(cfg.shape)
    target_volumes = np.asarray(measure(surface).volume_per_component)

    writer = _DiagWriter(out_dir)
    records = []
    snapshots = []
    status = "completed"
    reason = None
    h = cfg.step.h
    halvings_left = 1
    t = 0.0
    horizon = cfg.horizon()
    k = 0
    delta_used = None

    if out_dir and cfg.snapshot_every > 0:
        snapshots.append(_snapshot(surface, out_dir, 0))

    try:
        while t < horizon * (1.0 - 1e-12):
            curvature = compute_curvature(surface)
            solver = lb.assemble(surface)
            delta = _resolve_delta(cfg, surface, curvature)
            delta_used = delta
            ubc = estimate_ubc_radius(surface, curvature,
                                      proximity_cap=5.0 * delta)
            if ubc <= 2.0 * delta:
                status, reason = "halted", "ubc_below_threshold"
                break

            step_cfg = dataclasses.replace(cfg.step, h=h, delta=delta)
            result = step(surface, curvature, solver, step_cfg)
            if not result.converged:
                if halvings_left > 0:
                    halvings_left -= 1
                    h = 0.5 * h
                    continue
                status, reason = "halted", "step_not_converged"
                break

            surface = ng.graph_surface(surface, result.psi, curvature)
            surface = _apply_remesh(cfg, surface, target_volumes)
            k += 1
            t += h
            records.append(_make_record(k, t, h, surface, curvature, solver,
                                        result, ubc))
            writer.write(records[-1])
            if out_dir and cfg.snapshot_every > 0 and k % cfg.snapshot_every == 0:
                snapshots.append(_snapshot(surface, out_dir, k))
    except ng.FoldOverError:
        status, reason = "halted", "fold_over"
    except ng.RayIntersectionError:
        status, reason = "halted", "not_a_graph"
    finally:
        writer.close()

    result = FlowResult(final=surface, records=records, status=status,
                        halted_reason=reason, snapshots=snapshots,
                        delta_used=delta_used)
    if out_dir:
        snapshots.append(_snapshot(surface, out_dir, k, final=True))
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump({"config": _config_echo(cfg), **result.summary()},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def _resolve_delta(cfg, surface, curvature):
    auto = ng.ubc_height_bound(curvature) / 8.0
    if cfg.step.delta is None:
        return auto
    return min(cfg.step.delta, auto)


def _make_record(k, t, h, surface, curvature, solver, result, ubc):
    m = measure(surface)
    psi = result.psi
    lap_psi = lb.apply_laplacian(solver, psi)
    mass = solver.mass
    l2_psi = float(np.sqrt(np.sum(mass * psi**2)))
    l2_lap = float(np.sqrt(np.sum(mass * lap_psi**2)))
    lyap = float(np.sum(mass * (result.xi**2 + 0.5 * h * lap_psi**2)))
    v = psi / h
    return StepRecord(
        step=k, time=t, perimeter=m.perimeter,
        volumes=tuple(m.volume_per_component),
        distance=result.distance, distance_over_h=result.distance / h,
        max_psi=float(np.abs(psi).max()), l2_psi=l2_psi, l2_lap_psi=l2_lap,
        constraint_margin=result.constraint_margin, lyapunov=lyap,
        el_residual=result.el_residual, picard_iters=result.picard_iters,
        ubc_estimate=ubc, v_max=float(np.abs(v).max()),
        v_l2=float(np.sqrt(np.sum(mass * v**2))),
    )


class _DiagWriter:
    def __init__(self, out_dir):
        self.fh = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self.fh = open(os.path.join(out_dir, "diagnostics.csv"), "w",
                           encoding="utf-8")
            self.fh.write(DIAG_HEADER + "\n")
            self.fh.write(",".join(DIAG_COLUMNS) + "\n")

    def write(self, record):
        if self.fh:
            self.fh.write(record.csv_row() + "\n")

    def close(self):
        if self.fh:
            self.fh.close()
            self.fh = None


def _snapshot(surface, out_dir, k, final=False):
    ext = "json" if surface.mode == "curve2d" else "off"
    name = f"snap_final.{ext}" if final else f"snap_{k:06d}.{ext}"
    path = os.path.join(out_dir, name)
    save_surface(surface, path)
    return path


def _config_echo(cfg):
    echo = dataclasses.asdict(cfg)
    echo["step"] = dataclasses.asdict(cfg.step)
    return echo


# ---------------------------------------------------------------------------
# remeshing
# ---------------------------------------------------------------------------


def _apply_remesh(cfg, surface, target_volumes):
    policy = cfg.remesh
    if policy == "auto":
        policy = "arc_length_2d" if surface.mode == "curve2d" else "quality_3d"
    if policy == "off":
        return surface
    if policy == "arc_length_2d" and surface.mode == "curve2d":
        ell = surface.edge_lengths()
        if ell.max() / ell.min() > cfg.quality_ratio:
            surface = _resample_arclength(surface)
            surface = _reproject_volume(surface, target_volumes)
        return surface
    if policy == "quality_3d" and surface.mode == "mesh3d":
        if _needs_quality_pass(surface, cfg):
            surface = _tangential_smooth(surface)
            surface = _reproject_volume(surface, target_volumes)
        return surface
    return surface


def _resample_arclength(surface):
    """Per-loop periodic cubic-spline resampling to uniform arc length."""
    loops = []
    start = 0
    for size in surface.loop_sizes:
        pts = surface.vertices[start:start + size]
        closed = np.vstack([pts, pts[:1]])
        seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        spline = CubicSpline(s, closed, bc_type="periodic")
        dense = np.linspace(0.0, s[-1], 16 * size + 1)
        dpts = spline(dense)
        dseg = np.linalg.norm(np.diff(dpts, axis=0), axis=1)
        ds = np.concatenate([[0.0], np.cumsum(dseg)])
        targets = np.linspace(0.0, ds[-1], size, endpoint=False)
        loops.append(spline(np.interp(targets, ds, dense)))
        start += size
    return DiscreteSurface.from_curve_loops(loops)


def _needs_quality_pass(surface, cfg):
    v = surface.vertices
    t = surface.triangles
    e = [v[t[:, (k + 1) % 3]] - v[t[:, k]] for k in range(3)]
    lengths = np.stack([np.linalg.norm(x, axis=1) for x in e])
    if lengths.max() / lengths.min() > cfg.edge_ratio_cap:
        return True
    angles = []
    for k in range(3):
        a = -e[(k + 2) % 3]
        b = e[k]
        cosang = np.einsum("ij,ij->i", a, b) / (
            np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        angles.append(np.arccos(np.clip(cosang, -1.0, 1.0)))
    min_angle = np.degrees(np.stack(angles).min())
    return min_angle < cfg.min_angle_deg


def _tangential_smooth(surface, weight=0.5):
    """One area-weighted Laplacian pass projected onto the tangent plane."""
    from .geometry import vertex_normals, _triangle_areas

    v = surface.vertices
    t = surface.triangles
    areas = _triangle_areas(v, t)
    centroid = (v[t[:, 0]] + v[t[:, 1]] + v[t[:, 2]]) / 3.0
    target = np.zeros_like(v)
    wsum = np.zeros(surface.n_vertices)
    for k in range(3):
        np.add.at(target, t[:, k], areas[:, None] * centroid)
        np.add.at(wsum, t[:, k], areas)
    target /= wsum[:, None]
    disp = target - v
    normals = vertex_normals(surface)
    disp -= normals * np.einsum("ij,ij->i", disp, normals)[:, None]
    return surface.with_vertices(v + weight * disp)


def _reproject_volume(surface, target_volumes):
    """Uniform normal shift per component restoring enclosed volumes."""
    from .geometry import vertex_normals

    if surface.mode == "curve2d":
        normals = _curve_outward_normals(surface)
    else:
        normals = vertex_normals(surface)
    comp = surface.component_id
    verts = surface.vertices.copy()
    for _ in range(3):
        work = surface.with_vertices(verts)
        m = measure(work)
        gap = np.asarray(m.volume_per_component) - target_volumes
        if np.abs(gap).max() <= 1e-15 * max(np.abs(target_volumes).max(), 1.0):
            break
        # d(volume)/d(shift) = boundary measure of the component
        per_comp = np.zeros(len(target_volumes))
        if surface.mode == "curve2d":
            ell = work.edge_lengths()
            half = 0.5 * (ell + ell[work.prev_index()])
            per_comp = np.bincount(comp, weights=half, minlength=len(gap))
        else:
            from .geometry import _triangle_areas as areas_of

            a = areas_of(work.vertices, work.triangles)
            tri_comp = comp[work.triangles[:, 0]]
            per_comp = np.bincount(tri_comp, weights=a, minlength=len(gap))
        shift = -gap / per_comp
        verts = verts + shift[comp][:, None] * normals
    return surface.with_vertices(verts)


def _curve_outward_normals(surface):
    nxt = surface.next_index()
    prv = surface.prev_index()
    tang = surface.vertices[nxt] - surface.vertices[prv]
    tang /= np.linalg.norm(tang, axis=1)[:, None]
    return np.column_stack([tang[:, 1], -tang[:, 0]])


# ---------------------------------------------------------------------------
# self convergence
# ---------------------------------------------------------------------------


def self_convergence(cfg: FlowConfig, h_list, t_final: float) -> dict:
    """Richardson-style self-convergence table over a list of time steps.

    All runs share the seed and integrate to ``t_final`` (which must be
    an integer multiple of every h).  Final surfaces are compared as
    height fields over the final surface of the finest run; the observed
    order is ``log2`` of the ratio of successive differences.
    """
    h_list = sorted(float(h) for h in h_list)
    finest = h_list[0]
    for h in h_list:
        n = t_final / h
        if abs(n - round(n)) > 1e-9 * max(n, 1.0):
            raise ValueError(f"t_final = {t_final} is not a multiple of h = {h}")
    finals = {}
    for h in h_list:
        run_cfg = dataclasses.replace(
            cfg, step=dataclasses.replace(cfg.step, h=h),
            n_steps=int(round(t_final / h)), t_final=t_final)
        res = run(run_cfg)
        if not res.ok:
            raise RuntimeError(f"run at h = {h} failed: {res.halted_reason}")
        finals[h] = res.final
    ref = finals[finest]
    ref_curv = compute_curvature(ref)
    solver = lb.assemble(ref)
    heights = {h: ng.height_between(ref, finals[h], ref_curv) for h in h_list}
    errors = []
    coarse_sorted = sorted(h_list, reverse=True)
    for ha, hb in zip(coarse_sorted[:-1], coarse_sorted[1:]):
        diff = heights[ha] - heights[hb]
        errors.append(float(np.sqrt(np.sum(solver.mass * diff**2))))
    floor = 1e-8 * ref.bbox_diag
    if all(e <= floor for e in errors):
        order = None
        exact = True
    else:
        exact = False
        order = (float(np.log2(errors[0] / errors[1]))
                 if len(errors) >= 2 and errors[1] > 0 else None)
    return {"h": coarse_sorted, "errors": errors, "order": order, "exact": exact}
