"""Heightfunction calculus over a reference surface.

A height field psi writes a nearby surface as the normal graph
``x + psi(x) nu(x)`` over a reference.  This module evaluates the
signed normal-column volume density xi, the tangential Jacobian of the
graph map, the exact and linearized mean curvature of the graph (their
difference is the expansion remainder R0), and recovers psi between two
given surfaces by normal ray casting.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from . import laplace_beltrami as lb
from .geometry import (CurvatureData, DiscreteSurface, GeometryError,
                       compute_curvature, curve_derivative, _triangle_areas)

__all__ = [
    "FoldOverError",
    "RayIntersectionError",
    "GraphGeometry",
    "ubc_height_bound",
    "xi_from_height",
    "xi_derivative",
    "graph_surface",
    "tangential_gradient",
    "graph_jacobian",
    "mean_curvature_of_graph",
    "height_between",
]


class FoldOverError(GeometryError):
    """The graph surface degenerates (folded cells).  Carries the vertices."""

    def __init__(self, vertices):
        self.vertices = list(vertices)
        super().__init__(f"graph fold-over at vertices {self.vertices[:8]}"
                         + ("..." if len(self.vertices) > 8 else ""))


class RayIntersectionError(GeometryError):
    """A normal ray missed the target or hit it more than once."""

    def __init__(self, vertices, multiplicity):
        self.vertices = list(vertices)
        self.multiplicity = multiplicity
        super().__init__(
            f"normal rays with {multiplicity} hit(s) at vertices "
            f"{self.vertices[:8]}" + ("..." if len(self.vertices) > 8 else ""))


class GraphGeometry(NamedTuple):
    """Derived fields of one normal graph (all per reference vertex)."""

    xi: np.ndarray
    jacobian: np.ndarray
    H_graph: np.ndarray
    H_linear: np.ndarray
    R0: np.ndarray


def ubc_height_bound(curvature: CurvatureData) -> float:
    """Curvature part of the UBC radius: heights must stay below it."""
    if curvature.kappa is not None:
        kmax = float(np.abs(curvature.kappa).max())
    else:
        kmax = float(np.abs(curvature.principal).max())
    return 1.0 / kmax if kmax > 0 else np.inf


def _check_height(curvature, psi, n):
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (n,):
        raise ValueError("height field length does not match surface")
    bound = ubc_height_bound(curvature)
    if np.abs(psi).max() >= bound:
        raise GeometryError(
            f"height {np.abs(psi).max():.3e} exceeds the tubular bound {bound:.3e}")
    return psi


def xi_from_height(curvature: CurvatureData, psi: np.ndarray) -> np.ndarray:
    """Signed volume of the normal column between reference and graph.

    Pointwise closed form ``psi + (H/2) psi^2 + (K/3) psi^3`` (2D:
    ``psi + (kappa/2) psi^2``); integrated over a component it equals
    that component's enclosed-volume change.
    """
    psi = _check_height(curvature, psi, curvature.H.shape[0])
    if curvature.kappa is not None:
        return psi + 0.5 * curvature.kappa * psi**2
    return psi + 0.5 * curvature.H * psi**2 + curvature.K * psi**3 / 3.0


def xi_derivative(curvature: CurvatureData, psi: np.ndarray) -> np.ndarray:
    """d xi / d psi, the offset Jacobian ``1 + H psi + K psi^2``."""
    psi = np.asarray(psi, dtype=np.float64)
    if curvature.kappa is not None:
        return 1.0 + curvature.kappa * psi
    return 1.0 + curvature.H * psi + curvature.K * psi**2


def graph_surface(reference: DiscreteSurface, psi: np.ndarray,
                  curvature: CurvatureData | None = None) -> DiscreteSurface:
    """Deform the reference along its normals by psi (connectivity kept).

    Vertex correspondence with the reference is the identity, so fields
    transfer between the two surfaces without interpolation.

    Raises
    ------
    FoldOverError
        If a deformed cell collapses below the degeneracy floor or flips
        against its reference orientation.
    """
    if curvature is None:
        curvature = compute_curvature(reference)
    psi = _check_height(curvature, psi, reference.n_vertices)
    moved = reference.with_vertices(reference.vertices + psi[:, None] * curvature.normal)
    _check_fold_over(reference, moved)
    return moved


def _check_fold_over(reference, moved):
    floor = reference.eps_geom
    if reference.mode == "curve2d":
        nxt = reference.next_index()
        old_e = reference.vertices[nxt] - reference.vertices
        new_e = moved.vertices[nxt] - moved.vertices
        lengths = np.linalg.norm(new_e, axis=1)
        flipped = np.einsum("ij,ij->i", old_e, new_e) <= 0.0
        bad = flipped | (lengths <= floor)
        if bad.any():
            raise FoldOverError(np.nonzero(bad)[0])
        return
    t = reference.triangles
    old_n = _tri_normals_scaled(reference.vertices, t)
    new_n = _tri_normals_scaled(moved.vertices, t)
    areas = 0.5 * np.linalg.norm(new_n, axis=1)
    bad_tris = (np.einsum("ij,ij->i", old_n, new_n) <= 0.0) | (areas <= floor * floor)
    if bad_tris.any():
        raise FoldOverError(np.unique(t[bad_tris]))


def _tri_normals_scaled(v, t):
    return np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])


def tangential_gradient(surface: DiscreteSurface, f: np.ndarray) -> np.ndarray:
    """Per-cell linear-element gradients, area-averaged to vertices (3D)."""
    v = surface.vertices
    t = surface.triangles
    f = np.asarray(f, dtype=np.float64)
    e0 = v[t[:, 2]] - v[t[:, 1]]
    e1 = v[t[:, 0]] - v[t[:, 2]]
    e2 = v[t[:, 1]] - v[t[:, 0]]
    n = np.cross(e2, -e1)
    areas2 = np.linalg.norm(n, axis=1)
    n_unit = n / areas2[:, None]
    # hat-function gradient of corner k is (n x opposite_edge) / (2 A)
    grad = (f[t[:, 0], None] * np.cross(n_unit, e0)
            + f[t[:, 1], None] * np.cross(n_unit, e1)
            + f[t[:, 2], None] * np.cross(n_unit, e2)) / areas2[:, None]
    areas = 0.5 * areas2
    out = np.zeros_like(v)
    wsum = np.zeros(surface.n_vertices)
    for k in range(3):
        np.add.at(out, t[:, k], areas[:, None] * grad)
        np.add.at(wsum, t[:, k], areas)
    return out / wsum[:, None]


def graph_jacobian(reference: DiscreteSurface, curvature: CurvatureData,
                   psi: np.ndarray) -> np.ndarray:
    """Tangential Jacobian of the graph map at every vertex.

    3D, with principal curvatures k1, k2 and the gradient components
    g1, g2 of psi along the principal directions::

        J = sqrt((1 + psi k1)^2 (1 + psi k2)^2
                 + (1 + psi k1)^2 g2^2 + (1 + psi k2)^2 g1^2)

    2D: ``J = sqrt((1 + kappa psi)^2 + (d psi / ds)^2)``.  Its integral
    over the reference is the measure of the graph surface.
    """
    psi = _check_height(curvature, psi, reference.n_vertices)
    if reference.mode == "curve2d":
        dpsi = curve_derivative(reference, psi, order=1)
        val = (1.0 + curvature.kappa * psi) ** 2 + dpsi**2
        J = np.sqrt(val)
    else:
        grad = tangential_gradient(reference, psi)
        g1 = np.einsum("ij,ij->i", grad, curvature.principal_dirs[:, 0])
        g2 = np.einsum("ij,ij->i", grad, curvature.principal_dirs[:, 1])
        f1 = 1.0 + psi * curvature.principal[:, 0]
        f2 = 1.0 + psi * curvature.principal[:, 1]
        J = np.sqrt(f1**2 * f2**2 + f1**2 * g2**2 + f2**2 * g1**2)
    if (J <= 0.0).any() or not np.isfinite(J).all():
        raise FoldOverError(np.nonzero(~(J > 0.0))[0])
    return J


def mean_curvature_of_graph(reference: DiscreteSurface, curvature: CurvatureData,
                            psi: np.ndarray,
                            solver: "lb.Hm1Solver | None" = None) -> GraphGeometry:
    """Exact and linearized mean curvature of the graph surface.

    ``H_graph`` is the curvature of the deformed surface pulled back by
    the identity vertex correspondence, ``H_linear = -lap psi + H`` its
    linearization on the reference, and ``R0 = H_graph - H_linear`` the
    expansion remainder (identically zero at psi = 0).
    """
    if solver is None:
        solver = lb.assemble(reference)
    psi = np.asarray(psi, dtype=np.float64)
    moved = graph_surface(reference, psi, curvature)
    H_graph = compute_curvature(moved).H
    H_linear = -lb.apply_laplacian(solver, psi) + curvature.H
    return GraphGeometry(
        xi=xi_from_height(curvature, psi),
        jacobian=graph_jacobian(reference, curvature, psi),
        H_graph=H_graph,
        H_linear=H_linear,
        R0=H_graph - H_linear,
    )


# ---------------------------------------------------------------------------
# normal ray casting
# ---------------------------------------------------------------------------


def height_between(reference: DiscreteSurface, target: DiscreteSurface,
                   curvature: CurvatureData | None = None,
                   window: float | None = None) -> np.ndarray:
    """Signed normal distance from every reference vertex to the target.

    Casts the normal ray of each reference vertex and requires exactly
    one target intersection within ``(-window, window)``; the default
    window is the tubular bound of the reference curvature.  Raises
    :class:`RayIntersectionError` when the target is not a normal graph
    over the reference (the flow driver treats that as a remesh/reject
    signal).
    """
    if reference.mode != target.mode:
        raise GeometryError("reference and target must share the mode")
    if curvature is None:
        curvature = compute_curvature(reference)
    if window is None:
        window = ubc_height_bound(curvature)
    tol = 1e-10 * max(reference.bbox_diag, target.bbox_diag)
    if reference.mode == "curve2d":
        return _heights_2d(reference, target, curvature, window, tol)
    return _heights_3d(reference, target, curvature, window, tol)


def _dedupe_hits(tvals, tol):
    """Collapse hits that agree within tol (rays through shared cells)."""
    tvals = np.sort(np.asarray(tvals))
    groups = [tvals[0]]
    for t in tvals[1:]:
        if t - groups[-1] > tol:
            groups.append(t)
    return groups


def _heights_2d(reference, target, curvature, window, tol):
    x = reference.vertices
    n = curvature.normal
    nxt = target.next_index()
    a = target.vertices
    b = target.vertices[nxt]
    e = b - a
    psi = np.zeros(reference.n_vertices)
    misses, multis = [], []
    for i in range(reference.n_vertices):
        # solve x + t n = a + s e for every target edge (Cramer)
        det = n[i, 1] * e[:, 0] - n[i, 0] * e[:, 1]
        det = np.where(np.abs(det) < 1e-300, np.nan, det)
        rhs = a - x[i]
        t = (e[:, 0] * rhs[:, 1] - e[:, 1] * rhs[:, 0]) / det
        s = (n[i, 0] * rhs[:, 1] - n[i, 1] * rhs[:, 0]) / det
        eps_s = tol / np.maximum(np.linalg.norm(e, axis=1), 1e-300)
        ok = (np.abs(t) < window) & (s >= -eps_s) & (s < 1.0 - eps_s) & np.isfinite(t)
        hits = t[ok]
        if hits.size == 0:
            misses.append(i)
            continue
        groups = _dedupe_hits(hits, tol)
        if len(groups) != 1:
            multis.append(i)
            continue
        psi[i] = groups[0]
    if misses:
        raise RayIntersectionError(misses, 0)
    if multis:
        raise RayIntersectionError(multis, 2)
    return psi


def _heights_3d(reference, target, curvature, window, tol):
    v = target.vertices
    t = target.triangles
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    centroids = (p0 + p1 + p2) / 3.0
    radius = np.sqrt(np.maximum.reduce([
        np.einsum("ij,ij->i", p0 - centroids, p0 - centroids),
        np.einsum("ij,ij->i", p1 - centroids, p1 - centroids),
        np.einsum("ij,ij->i", p2 - centroids, p2 - centroids),
    ]))
    tree = cKDTree(centroids)
    reach = window + float(radius.max())
    x = reference.vertices
    nrm = curvature.normal
    psi = np.zeros(reference.n_vertices)
    misses, multis = [], []
    cand = tree.query_ball_point(x, reach)
    for i in range(reference.n_vertices):
        tri_ids = np.asarray(cand[i], dtype=np.int64)
        if tri_ids.size == 0:
            misses.append(i)
            continue
        hits = _ray_triangles(x[i], nrm[i], p0[tri_ids], p1[tri_ids], p2[tri_ids],
                              window, tol)
        if hits.size == 0:
            misses.append(i)
            continue
        groups = _dedupe_hits(hits, tol)
        if len(groups) != 1:
            multis.append(i)
            continue
        psi[i] = groups[0]
    if misses:
        raise RayIntersectionError(misses, 0)
    if multis:
        raise RayIntersectionError(multis, 2)
    return psi


def _ray_triangles(origin, direction, p0, p1, p2, window, tol):
    """Moller-Trumbore intersection of one ray with a triangle batch."""
    e1 = p1 - p0
    e2 = p2 - p0
    h = np.cross(direction[None, :], e2)
    det = np.einsum("ij,ij->i", e1, h)
    scale = np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)
    ok = np.abs(det) > 1e-14 * np.maximum(scale, 1e-300)
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origin[None, :] - p0
    u = np.einsum("ij,ij->i", s, h) * inv
    q = np.cross(s, e1)
    vpar = q @ direction * inv
    tval = np.einsum("ij,ij->i", e2, q) * inv
    eps_b = 1e-9
    ok &= (u >= -eps_b) & (vpar >= -eps_b) & (u + vpar <= 1.0 + eps_b)
    ok &= np.abs(tval) < window
    return tval[ok]
