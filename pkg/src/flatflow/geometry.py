"""Discrete closed hypersurfaces in the plane and in 3-space.

A :class:`DiscreteSurface` is either a set of closed oriented polygonal
curves (mode ``curve2d``) or a closed oriented triangle mesh (mode
``mesh3d``).  The module provides shape builders, per-vertex curvature
(signed curvature in 2D, shape operator with principal curvatures in 3D),
perimeter / enclosed-volume measures, a uniform-ball-condition radius
estimate and normal offsets, plus OFF / OBJ / JSON input and output.

Conventions: normals point out of the enclosed region, mean curvature is
the sum of principal curvatures and is nonnegative for convex shapes
(unit circle: kappa = 1, unit sphere: H = 2, K = 1).
"""

from __future__ import annotations

import json
import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

__all__ = [
    "GeometryError",
    "DiscreteSurface",
    "CurvatureData",
    "Measure",
    "OffsetPoints",
    "build_shape",
    "compute_curvature",
    "cotangent_mean_curvature",
    "measure",
    "estimate_ubc_radius",
    "offset_points",
    "load_curve_json",
    "save_curve_json",
    "load_off",
    "save_off",
    "load_obj",
    "load_surface",
    "save_surface",
]

# Scale-free degeneracy floor: edges / triangle areas below
# EPS_GEOM_FACTOR * bounding-box diagonal are rejected.
EPS_GEOM_FACTOR = 1e-9


class GeometryError(ValueError):
    """Invalid or degenerate geometry (open mesh, zero edge, bad stencil)."""


class DiscreteSurface:
    """Closed oriented curve set (2D) or triangle mesh (3D).

    Vertices of a 2D surface are stored loop-by-loop in cyclic order;
    ``loop_sizes`` gives the vertex count of each closed component.  A 3D
    surface stores an oriented triangle list.  Construction validates
    closedness, consistent orientation, the non-degeneracy floor, and
    normalizes every component to positive enclosed volume (outward
    normals).

    Instances are immutable; derived connectivity (neighbor rings,
    adjacency) is cached lazily and shared with surfaces produced by
    :meth:`with_vertices`, which keeps the connectivity and replaces only
    the vertex positions.
    """

    __slots__ = ("mode", "vertices", "loop_sizes", "triangles", "component_id", "_topo")

    def __init__(self, mode, vertices, loop_sizes=None, triangles=None,
                 component_id=None, _topo=None, _validate=True):
        self.mode = mode
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.loop_sizes = loop_sizes
        self.triangles = triangles
        self.component_id = component_id
        self._topo = _topo if _topo is not None else {}
        if _validate:
            self._validate()

    # -- constructors ---------------------------------------------------

    @classmethod
    def from_curve_loops(cls, loops: Sequence[np.ndarray]) -> "DiscreteSurface":
        """Build a 2D surface from closed loops of [x, y] vertices.

        Each loop is an ordered list of distinct vertices (the closing
        edge from last back to first is implicit).  Loops with negative
        signed area are reversed so that normals point outward.
        """
        if not loops:
            raise GeometryError("curve surface needs at least one loop")
        blocks = []
        sizes = []
        for loop in loops:
            pts = np.asarray(loop, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
                raise GeometryError("each loop must be an (n, 2) array with n >= 3")
            if _signed_area(pts) < 0.0:
                pts = pts[::-1]
            blocks.append(pts)
            sizes.append(pts.shape[0])
        vertices = np.concatenate(blocks, axis=0)
        component_id = np.repeat(np.arange(len(sizes)), sizes)
        return cls("curve2d", vertices, loop_sizes=tuple(sizes),
                   component_id=component_id)

    @classmethod
    def from_triangle_mesh(cls, vertices, triangles) -> "DiscreteSurface":
        """Build a 3D surface from vertices and an oriented triangle list.

        The mesh must be closed (every edge shared by exactly two
        triangles) and consistently oriented.  Components with negative
        signed volume are flipped so that normals point outward.
        """
        vertices = np.asarray(vertices, dtype=np.float64)
        triangles = np.asarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise GeometryError("vertices must be an (n, 3) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3 or triangles.shape[0] < 4:
            raise GeometryError("triangles must be an (m, 3) index array with m >= 4")
        if triangles.min() < 0 or triangles.max() >= vertices.shape[0]:
            raise GeometryError("triangle indices out of range")
        _check_closed_oriented(triangles, vertices.shape[0])
        component_id = _vertex_components(triangles, vertices.shape[0])
        # normalize per-component orientation to positive enclosed volume
        tri_comp = component_id[triangles[:, 0]]
        triangles = triangles.copy()
        for c in range(component_id.max() + 1):
            sel = tri_comp == c
            if _signed_volume(vertices, triangles[sel]) < 0.0:
                triangles[sel] = triangles[sel][:, ::-1]
        return cls("mesh3d", vertices, triangles=triangles, component_id=component_id)

    def with_vertices(self, vertices: np.ndarray) -> "DiscreteSurface":
        """Same connectivity, new vertex positions (shares cached topology)."""
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise GeometryError("vertex array shape must match")
        return DiscreteSurface(self.mode, vertices, loop_sizes=self.loop_sizes,
                               triangles=self.triangles, component_id=self.component_id,
                               _topo=self._topo, _validate=False)

    # -- basic properties -----------------------------------------------

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_components(self) -> int:
        return int(self.component_id.max()) + 1

    @property
    def bbox_diag(self) -> float:
        ext = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(ext))

    @property
    def eps_geom(self) -> float:
        return EPS_GEOM_FACTOR * max(self.bbox_diag, np.finfo(float).tiny)

    def edge_lengths(self) -> np.ndarray:
        """Lengths of all edges (2D: one per vertex, to the next one)."""
        if self.mode == "curve2d":
            nxt = self.next_index()
            return np.linalg.norm(self.vertices[nxt] - self.vertices, axis=1)
        e = self.unique_edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    # -- cached connectivity ---------------------------------------------

    def next_index(self) -> np.ndarray:
        """2D only: index of the cyclic successor of each vertex."""
        if "next" not in self._topo:
            nxt = np.empty(self.n_vertices, dtype=np.int64)
            prv = np.empty(self.n_vertices, dtype=np.int64)
            start = 0
            for size in self.loop_sizes:
                idx = np.arange(start, start + size)
                nxt[idx] = np.roll(idx, -1)
                prv[idx] = np.roll(idx, 1)
                start += size
            self._topo["next"] = nxt
            self._topo["prev"] = prv
        return self._topo["next"]

    def prev_index(self) -> np.ndarray:
        self.next_index()
        return self._topo["prev"]

    def unique_edges(self) -> np.ndarray:
        """3D only: (n_edges, 2) sorted vertex index pairs."""
        if "edges" not in self._topo:
            t = self.triangles
            raw = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            raw = np.sort(raw, axis=1)
            self._topo["edges"] = np.unique(raw, axis=0)
        return self._topo["edges"]

    def vertex_adjacency(self) -> sparse.csr_matrix:
        """3D only: symmetric boolean vertex adjacency."""
        if "adj" not in self._topo:
            e = self.unique_edges()
            n = self.n_vertices
            data = np.ones(e.shape[0], dtype=bool)
            a = sparse.coo_matrix((data, (e[:, 0], e[:, 1])), shape=(n, n))
            self._topo["adj"] = (a + a.T).tocsr()
        return self._topo["adj"]

    def two_ring(self) -> tuple[np.ndarray, np.ndarray]:
        """3D only: CSR-style (offsets, indices) of the 2-ring of each vertex."""
        if "two_ring" not in self._topo:
            adj = self.vertex_adjacency()
            two = ((adj + adj @ adj) > 0).tolil()
            two.setdiag(False)
            two = two.tocsr()
            self._topo["two_ring"] = (two.indptr.copy(), two.indices.copy())
        return self._topo["two_ring"]

    def vertex_triangles(self) -> tuple[np.ndarray, np.ndarray]:
        """3D only: CSR-style (offsets, triangle indices) incident to each vertex."""
        if "vert_tris" not in self._topo:
            t = self.triangles
            m = t.shape[0]
            vids = t.reshape(-1)
            tids = np.repeat(np.arange(m), 3)
            order = np.argsort(vids, kind="stable")
            vids = vids[order]
            tids = tids[order]
            counts = np.bincount(vids, minlength=self.n_vertices)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._topo["vert_tris"] = (offsets, tids)
        return self._topo["vert_tris"]

    # -- validation -------------------------------------------------------

    def _validate(self):
        if self.mode == "curve2d":
            if self.vertices.shape[1] != 2:
                raise GeometryError("curve2d surface needs (n, 2) vertices")
            if self.loop_sizes is None or sum(self.loop_sizes) != self.n_vertices:
                raise GeometryError("loop sizes do not match vertex count")
        elif self.mode == "mesh3d":
            if self.vertices.shape[1] != 3:
                raise GeometryError("mesh3d surface needs (n, 3) vertices")
            if self.triangles is None:
                raise GeometryError("mesh3d surface needs triangles")
        else:
            raise GeometryError(f"unknown mode {self.mode!r}")
        if not np.isfinite(self.vertices).all():
            raise GeometryError("vertices contain NaN or inf")
        floor = self.eps_geom
        lengths = self.edge_lengths()
        if lengths.min() <= floor:
            raise GeometryError(
                f"degenerate edge: min length {lengths.min():.3e} <= floor {floor:.3e}")
        if self.mode == "mesh3d":
            areas = _triangle_areas(self.vertices, self.triangles)
            if areas.min() <= floor * floor:
                raise GeometryError(
                    f"degenerate triangle: min area {areas.min():.3e}")


class CurvatureData(NamedTuple):
    """Per-vertex curvature bundle.

    ``normal``    outward unit normal, (n, dim)
    ``H``         mean curvature (kappa in 2D), (n,)
    ``K``         Gaussian curvature, (n,), 3D only (None in 2D)
    ``kappa``     signed curvature, (n,), 2D only (None in 3D)
    ``B``         second fundamental form as a (n, 3, 3) symmetric operator
                  with the normal in its kernel, 3D only
    ``principal`` principal curvatures (kappa1 >= kappa2), (n, 2), 3D only
    ``principal_dirs`` unit principal directions, (n, 2, 3), 3D only
    """

    normal: np.ndarray
    H: np.ndarray
    K: np.ndarray | None
    kappa: np.ndarray | None
    B: np.ndarray | None
    principal: np.ndarray | None
    principal_dirs: np.ndarray | None


class Measure(NamedTuple):
    perimeter: float
    volume_per_component: np.ndarray


class OffsetPoints(NamedTuple):
    points: np.ndarray
    within_reach: bool


# ---------------------------------------------------------------------------
# shape builders
# ---------------------------------------------------------------------------


def build_shape(spec: dict) -> DiscreteSurface:
    """Build a surface from a shape descriptor.

    Supported kinds (keys beyond ``kind``):

    - ``circle``: R, n
    - ``ellipse``: a, b, n
    - ``perturbed_circle``: R, mode, amplitude, n
    - ``sphere``: R, subdiv
    - ``perturbed_sphere``: R, degree, order, amplitude, subdiv
    - ``curve_file`` / ``mesh_file``: path

    Analytic curves are sampled uniformly in arc length; spheres are
    icospheres with ``subdiv`` 4-way refinement levels.
    """
    spec = dict(spec)
    try:
        kind = spec.pop("kind")
    except KeyError:
        raise GeometryError("shape spec needs a 'kind' entry") from None
    builders = {
        "circle": _build_circle,
        "ellipse": _build_ellipse,
        "perturbed_circle": _build_perturbed_circle,
        "sphere": _build_sphere,
        "perturbed_sphere": _build_perturbed_sphere,
        "curve_file": _build_curve_file,
        "mesh_file": _build_mesh_file,
    }
    if kind not in builders:
        raise GeometryError(f"unknown shape kind {kind!r}")
    try:
        return builders[kind](**spec)
    except TypeError as exc:
        raise GeometryError(f"bad parameters for shape {kind!r}: {exc}") from None


def _require(cond, msg):
    if not cond:
        raise GeometryError(msg)


def _sample_uniform_arclength(gamma, n, oversample=40):
    """Sample a closed parametric curve gamma(t), t in [0, 2pi), uniformly
    in arc length with n vertices, starting at t = 0."""
    m = max(oversample * n, 512)
    t = np.linspace(0.0, 2.0 * np.pi, m + 1)
    pts = gamma(t)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n, endpoint=False)
    ts = np.interp(targets, s, t)
    return gamma(ts)


def _build_circle(R, n):
    _require(R > 0, "circle radius must be positive")
    n = int(n)
    _require(n >= 8, "circle needs n >= 8 vertices")
    theta = 2.0 * np.pi * np.arange(n) / n
    pts = np.column_stack([R * np.cos(theta), R * np.sin(theta)])
    return DiscreteSurface.from_curve_loops([pts])


def _build_ellipse(a, b, n):
    _require(a > 0 and b > 0, "ellipse semi-axes must be positive")
    n = int(n)
    _require(n >= 8, "ellipse needs n >= 8 vertices")

    def gamma(t):
        return np.column_stack([a * np.cos(t), b * np.sin(t)])

    return DiscreteSurface.from_curve_loops([_sample_uniform_arclength(gamma, n)])


def _build_perturbed_circle(R, mode, amplitude, n):
    _require(R > 0, "radius must be positive")
    k = int(mode)
    _require(k >= 0, "mode must be >= 0")
    _require(abs(amplitude) < R, "amplitude must be below the radius")
    n = int(n)
    _require(n >= 8, "perturbed circle needs n >= 8 vertices")

    def gamma(t):
        r = R + amplitude * np.cos(k * t)
        return np.column_stack([r * np.cos(t), r * np.sin(t)])

    return DiscreteSurface.from_curve_loops([_sample_uniform_arclength(gamma, n)])


def _icosahedron():
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v[0])
    t = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v, t


def _subdivide(vertices, triangles):
    """One 4-way triangle subdivision with shared midpoints."""
    edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                            triangles[:, [2, 0]]])
    edges_sorted = np.sort(edges, axis=1)
    uniq, inverse = np.unique(edges_sorted, axis=0, return_inverse=True)
    mids = 0.5 * (vertices[uniq[:, 0]] + vertices[uniq[:, 1]])
    new_vertices = np.concatenate([vertices, mids])
    m = triangles.shape[0]
    e01 = inverse[0 * m:1 * m] + vertices.shape[0]
    e12 = inverse[1 * m:2 * m] + vertices.shape[0]
    e20 = inverse[2 * m:3 * m] + vertices.shape[0]
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    new_triangles = np.concatenate([
        np.column_stack([a, e01, e20]),
        np.column_stack([b, e12, e01]),
        np.column_stack([c, e20, e12]),
        np.column_stack([e01, e12, e20]),
    ])
    return new_vertices, new_triangles


def _unit_icosphere(subdiv):
    v, t = _icosahedron()
    for _ in range(subdiv):
        v, t = _subdivide(v, t)
        v /= np.linalg.norm(v, axis=1)[:, None]
    return v, t


def _build_sphere(R, subdiv):
    _require(R > 0, "sphere radius must be positive")
    subdiv = int(subdiv)
    _require(subdiv >= 1, "sphere needs subdiv >= 1")
    v, t = _unit_icosphere(subdiv)
    return DiscreteSurface.from_triangle_mesh(R * v, t)


def real_sph_harm(degree: int, order: int, directions: np.ndarray) -> np.ndarray:
    """Real orthonormal spherical harmonic Y_{l,m} at unit directions."""
    from scipy.special import sph_harm_y

    x, y, z = directions[:, 0], directions[:, 1], directions[:, 2]
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.arctan2(y, x)
    m = abs(order)
    ylm = sph_harm_y(degree, m, theta, phi)
    if order == 0:
        return np.real(ylm)
    if order > 0:
        return math.sqrt(2.0) * (-1.0) ** m * np.real(ylm)
    return math.sqrt(2.0) * (-1.0) ** m * np.imag(ylm)


def _build_perturbed_sphere(R, degree, amplitude, subdiv, order=0):
    _require(R > 0, "radius must be positive")
    degree = int(degree)
    order = int(order)
    _require(degree >= 0 and abs(order) <= degree, "need degree >= 0, |order| <= degree")
    _require(abs(amplitude) < R, "amplitude must be below the radius")
    subdiv = int(subdiv)
    _require(subdiv >= 1, "perturbed sphere needs subdiv >= 1")
    v, t = _unit_icosphere(subdiv)
    r = R + amplitude * real_sph_harm(degree, order, v)
    return DiscreteSurface.from_triangle_mesh(r[:, None] * v, t)


def _build_curve_file(path):
    return load_curve_json(path)


def _build_mesh_file(path):
    return load_surface(path)


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------


def compute_curvature(surface: DiscreteSurface) -> CurvatureData:
    """Per-vertex curvature of a discrete surface.

    2D: periodic finite differences on the arc-length parametrization,
    second order.  3D: per-vertex shape operator from a quadric-with-cubic
    regression over the two-ring in the local tangent frame; mean and
    Gaussian curvature are products of the principal curvatures, so the
    ``H = kappa1 + kappa2`` and ``K = kappa1 * kappa2`` identities hold
    exactly.

    Raises
    ------
    GeometryError
        If a fitting stencil is degenerate (collinear or rank-deficient
        neighborhood).
    """
    if surface.mode == "curve2d":
        return _curvature_2d(surface)
    return _curvature_3d(surface)


def _nonuniform_fd_weights(h1, h2):
    """3-point first/second derivative weights for spacings h1 (to the
    previous point) and h2 (to the next one)."""
    denom = h1 * h2 * (h1 + h2)
    w1 = np.stack([-h2 * h2 / denom, (h2 * h2 - h1 * h1) / denom, h1 * h1 / denom])
    w2 = np.stack([2.0 * h2 / denom, -2.0 * (h1 + h2) / denom, 2.0 * h1 / denom])
    return w1, w2


def curve_derivative(surface: DiscreteSurface, values: np.ndarray,
                     order: int = 1) -> np.ndarray:
    """d/ds (or d^2/ds^2) of a per-vertex field along each curve loop."""
    nxt = surface.next_index()
    prv = surface.prev_index()
    x = surface.vertices
    h1 = np.linalg.norm(x - x[prv], axis=1)
    h2 = np.linalg.norm(x[nxt] - x, axis=1)
    w1, w2 = _nonuniform_fd_weights(h1, h2)
    w = w1 if order == 1 else w2
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim == 1:
        return w[0] * vals[prv] + w[1] * vals + w[2] * vals[nxt]
    return (w[0][:, None] * vals[prv] + w[1][:, None] * vals
            + w[2][:, None] * vals[nxt])


def _curvature_2d(surface):
    d1 = curve_derivative(surface, surface.vertices, order=1)
    d2 = curve_derivative(surface, surface.vertices, order=2)
    speed = np.linalg.norm(d1, axis=1)
    if speed.min() <= surface.eps_geom:
        raise GeometryError("degenerate curve stencil (zero tangent)")
    tangent = d1 / speed[:, None]
    # loops are oriented counterclockwise, so this rotation points outward
    normal = np.column_stack([tangent[:, 1], -tangent[:, 0]])
    kappa = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / speed**3
    return CurvatureData(normal=normal, H=kappa, K=None, kappa=kappa,
                         B=None, principal=None, principal_dirs=None)


def vertex_normals(surface: DiscreteSurface) -> np.ndarray:
    """Angle-weighted outward vertex normals of a triangle mesh."""
    v = surface.vertices
    t = surface.triangles
    n = np.zeros_like(v)
    p0, p1, p2 = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    fn = np.cross(p1 - p0, p2 - p0)
    for corner, (pa, pb, pc) in enumerate(((p0, p1, p2), (p1, p2, p0), (p2, p0, p1))):
        e1 = pb - pa
        e2 = pc - pa
        cosang = np.einsum("ij,ij->i", e1, e2) / (
            np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))
        ang = np.arccos(np.clip(cosang, -1.0, 1.0))
        np.add.at(n, t[:, corner], ang[:, None] * fn)
    norms = np.linalg.norm(n, axis=1)
    if norms.min() <= 0.0:
        raise GeometryError("degenerate vertex normal")
    return n / norms[:, None]


def _padded_two_ring(surface):
    if "two_ring_padded" not in surface._topo:
        offsets, indices = surface.two_ring()
        counts = np.diff(offsets)
        kmax = int(counts.max())
        n = surface.n_vertices
        pad = np.zeros((n, kmax), dtype=np.int64)
        mask = np.zeros((n, kmax), dtype=bool)
        cols = np.arange(kmax)
        mask[:] = cols[None, :] < counts[:, None]
        pad[mask] = indices
        surface._topo["two_ring_padded"] = (pad, mask)
    return surface._topo["two_ring_padded"]


# cubic-correction columns soak up the odd-order bias of uneven stencils;
# the shape operator is still read off the quadratic block
_FIT_COLS = 9


def _curvature_3d(surface):
    v = surface.vertices
    n_hat = vertex_normals(surface)
    idx, mask = _padded_two_ring(surface)
    d = v[idx] - v[:, None, :]

    # deterministic tangent frame from the smallest normal component
    pick = np.argmin(np.abs(n_hat), axis=1)
    t1 = np.zeros_like(n_hat)
    t1[np.arange(len(pick)), pick] = 1.0
    t1 -= n_hat * np.einsum("ij,ij->i", t1, n_hat)[:, None]
    t1 /= np.linalg.norm(t1, axis=1)[:, None]
    t2 = np.cross(n_hat, t1)

    u = (d @ t1[:, :, None])[..., 0]
    w = (d @ t2[:, :, None])[..., 0]
    z = (d @ n_hat[:, :, None])[..., 0]

    dist = np.linalg.norm(d, axis=2)
    scale = np.where(mask, dist, 0.0).sum(axis=1) / np.maximum(mask.sum(axis=1), 1)
    if scale.min() <= surface.eps_geom:
        raise GeometryError("degenerate curvature stencil (collapsed two-ring)")
    u = u / scale[:, None]
    w = w / scale[:, None]
    z = z / scale[:, None]

    cols = np.empty(u.shape + (_FIT_COLS,))
    cols[..., 0] = 0.5 * u * u
    cols[..., 1] = u * w
    cols[..., 2] = 0.5 * w * w
    cols[..., 3] = u
    cols[..., 4] = w
    cols[..., 5] = u * u * u
    cols[..., 6] = u * u * w
    cols[..., 7] = u * w * w
    cols[..., 8] = w * w * w
    cols[~mask] = 0.0
    z = np.where(mask, z, 0.0)

    cols_t = cols.transpose(0, 2, 1)
    gram = cols_t @ cols
    rhs = (cols_t @ z[..., None])[..., 0]
    try:
        coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        bad = [i for i in range(surface.n_vertices)
               if np.linalg.matrix_rank(gram[i]) < _FIT_COLS]
        raise GeometryError(f"degenerate curvature stencil at vertices {bad[:8]}")

    # unscale: quadratic coefficients gain 1/scale, linear ones are unchanged
    a = coef[:, 0] / scale
    b = coef[:, 1] / scale
    c = coef[:, 2] / scale
    gu = coef[:, 3]
    gv = coef[:, 4]

    denom = np.sqrt(1.0 + gu**2 + gv**2)
    # Weingarten map of the graph: W = I^-1 II with I = id + grad grad^T,
    # II = Hess / denom; sign flipped so convex shapes are positive
    i11 = 1.0 + gu * gu
    i12 = gu * gv
    i22 = 1.0 + gv * gv
    det_i = i11 * i22 - i12 * i12
    h11, h12, h22 = a / denom, b / denom, c / denom
    w11 = (i22 * h11 - i12 * h12) / det_i
    w12 = (i22 * h12 - i12 * h22) / det_i
    w21 = (i11 * h12 - i12 * h11) / det_i
    w22 = (i11 * h22 - i12 * h12) / det_i

    tr = w11 + w22
    det = w11 * w22 - w12 * w21
    disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
    lam1 = 0.5 * (tr - disc)   # after the sign flip this is the larger curvature
    lam2 = 0.5 * (tr + disc)
    k1 = -lam1
    k2 = -lam2

    # eigenvector of the 2x2 map for lam1, with a stable column choice
    use_first = np.abs(w12) >= np.abs(w21)
    e1u = np.where(use_first, w12, lam1 - w22)
    e1v = np.where(use_first, lam1 - w11, w21)
    norm_e = np.hypot(e1u, e1v)
    tiny = norm_e <= 1e-30
    e1u = np.where(tiny, 1.0, e1u)
    e1v = np.where(tiny, 0.0, e1v)
    norm_e = np.where(tiny, 1.0, norm_e)
    e1u /= norm_e
    e1v /= norm_e

    # fitted normal (second-order accurate), then principal directions
    # orthonormalized against it so the normal lies in the kernel of B
    normal = (n_hat - gu[:, None] * t1 - gv[:, None] * t2) / denom[:, None]
    dir1 = e1u[:, None] * t1 + e1v[:, None] * t2
    dir1 -= normal * np.einsum("ij,ij->i", dir1, normal)[:, None]
    dir1 /= np.linalg.norm(dir1, axis=1)[:, None]
    dir2 = np.cross(normal, dir1)

    B = (k1[:, None, None] * dir1[:, :, None] * dir1[:, None, :]
         + k2[:, None, None] * dir2[:, :, None] * dir2[:, None, :])
    principal = np.column_stack([k1, k2])
    dirs = np.stack([dir1, dir2], axis=1)
    return CurvatureData(normal=normal, H=k1 + k2, K=k1 * k2, kappa=None,
                         B=B, principal=principal, principal_dirs=dirs)


def cotangent_mean_curvature(surface: DiscreteSurface,
                             normals: np.ndarray | None = None) -> np.ndarray:
    """Mean curvature from the cotangent mean-curvature normal (3D).

    Independent cross-check of the regression-based estimate: the
    cotangent stiffness applied to the coordinates gives the integrated
    mean-curvature normal; dividing by the barycentric vertex area and
    signing against the outward normal yields H.
    """
    v = surface.vertices
    t = surface.triangles
    if normals is None:
        normals = vertex_normals(surface)
    hn = np.zeros_like(v)
    areas = np.zeros(surface.n_vertices)
    p = [v[t[:, k]] for k in range(3)]
    tri_area = _triangle_areas(v, t)
    for k in range(3):
        a, b, c = t[:, k], t[:, (k + 1) % 3], t[:, (k + 2) % 3]
        # cot at corner a weights the opposite edge (b, c)
        e1 = p[(k + 1) % 3] - p[k]
        e2 = p[(k + 2) % 3] - p[k]
        cot = np.einsum("ij,ij->i", e1, e2) / (2.0 * tri_area)
        contrib = 0.5 * cot[:, None] * (v[b] - v[c])
        np.add.at(hn, b, contrib)
        np.add.at(hn, c, -contrib)
        np.add.at(areas, a, tri_area / 3.0)
    h_signed = np.einsum("ij,ij->i", hn, normals) / areas
    return h_signed


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------


def _signed_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _signed_volume(vertices, triangles):
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    return float(np.einsum("ij,ij->i", p0, np.cross(p1, p2)).sum() / 6.0)


def _triangle_areas(vertices, triangles):
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)


def measure(surface: DiscreteSurface) -> Measure:
    """Total boundary measure and enclosed volume of every component.

    Perimeter is the polygon length (2D) or triangle area (3D); volumes
    come from the divergence theorem (shoelace / signed tetrahedra) and
    are positive under the outward-orientation invariant.
    """
    if surface.mode == "curve2d":
        perimeter = float(surface.edge_lengths().sum())
        vols = []
        start = 0
        for size in surface.loop_sizes:
            vols.append(_signed_area(surface.vertices[start:start + size]))
            start += size
        return Measure(perimeter, np.array(vols))
    areas = _triangle_areas(surface.vertices, surface.triangles)
    tri_comp = surface.component_id[surface.triangles[:, 0]]
    p0 = surface.vertices[surface.triangles[:, 0]]
    p1 = surface.vertices[surface.triangles[:, 1]]
    p2 = surface.vertices[surface.triangles[:, 2]]
    spat = np.einsum("ij,ij->i", p0, np.cross(p1, p2)) / 6.0
    vols = np.bincount(tri_comp, weights=spat, minlength=surface.n_components)
    return Measure(float(areas.sum()), vols)


# ---------------------------------------------------------------------------
# uniform ball condition estimate and offsets
# ---------------------------------------------------------------------------


def estimate_ubc_radius(surface: DiscreteSurface, curvature: CurvatureData,
                        proximity_cap: float | None = None) -> float:
    """Numerical proxy for the uniform-ball-condition radius.

    Combines the curvature bound ``1 / max(|kappa1|, |kappa2|)`` with a
    proximity term: for every spatially close vertex pair the radius of
    the ball tangent at one vertex and passing through the other,
    ``|x_j - x_i|^2 / (2 |n . (x_j - x_i)|)``.  On a sphere every pair
    reproduces the radius exactly; for two facing sheets at gap g the
    term reduces to g / 2.  This is a heuristic lower-bound estimate,
    not a certified bound: features between resolved vertices are
    invisible to it.

    ``proximity_cap`` optionally caps the pair-search radius (cheap
    per-step health checks only need to rule out small radii).
    """
    if surface.mode == "curve2d":
        kmax = float(np.abs(curvature.kappa).max())
    else:
        kmax = float(np.abs(curvature.principal).max())
    r_curv = 1.0 / kmax if kmax > 0 else surface.bbox_diag
    r_best = r_curv

    pts = surface.vertices
    normals = curvature.normal
    tree = cKDTree(pts)
    n = surface.n_vertices
    chunk = 1024
    for start in range(0, n, chunk):
        cap = 2.0 * r_best
        if proximity_cap is not None:
            cap = min(cap, proximity_cap)
        stop = min(start + chunk, n)
        neigh = tree.query_ball_point(pts[start:stop], cap)
        for row, cand in enumerate(neigh):
            i = start + row
            j = np.asarray([c for c in cand if c > i], dtype=np.int64)
            if j.size == 0:
                continue
            dvec = pts[j] - pts[i]
            d2 = np.einsum("kj,kj->k", dvec, dvec)
            proj = np.maximum(np.abs(dvec @ normals[i]),
                              np.abs(np.einsum("kj,kj->k", normals[j], dvec)))
            ok = proj > 1e-30
            if not ok.any():
                continue
            r_pair = np.where(ok, d2 / (2.0 * np.where(ok, proj, 1.0)), np.inf)
            r_best = min(r_best, float(r_pair.min()))
    return r_best


def offset_points(surface: DiscreteSurface, tau: float,
                  curvature: CurvatureData | None = None) -> OffsetPoints:
    """Normal offset ``x + tau * normal(x)`` of every vertex.

    Returns the offset point set together with a ``within_reach`` flag
    that is False when ``|tau|`` reaches the estimated UBC radius (the
    offset may then self-intersect; it is still computed).
    """
    if curvature is None:
        curvature = compute_curvature(surface)
    reach = estimate_ubc_radius(surface, curvature, proximity_cap=2.1 * abs(tau))
    points = surface.vertices + tau * curvature.normal
    return OffsetPoints(points, bool(abs(tau) < reach))


# ---------------------------------------------------------------------------
# topology checks
# ---------------------------------------------------------------------------


def _check_closed_oriented(triangles, n_vertices):
    directed = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                               triangles[:, [2, 0]]])
    key = directed[:, 0] * n_vertices + directed[:, 1]
    if np.unique(key).size != key.size:
        raise GeometryError("mesh not orientable: repeated directed edge")
    rev = directed[:, 1] * n_vertices + directed[:, 0]
    key_sorted = np.sort(key)
    missing = np.setdiff1d(rev, key_sorted, assume_unique=False)
    if missing.size:
        raise GeometryError(
            f"mesh not closed: {missing.size} boundary edge(s) found")


def _vertex_components(triangles, n_vertices):
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]]])
    adj = sparse.coo_matrix((np.ones(e.shape[0], dtype=bool), (e[:, 0], e[:, 1])),
                            shape=(n_vertices, n_vertices))
    n_comp, labels = connected_components(adj, directed=False)
    if np.bincount(labels, minlength=n_comp).min() == 0:
        raise GeometryError("isolated vertex in mesh")
    return labels.astype(np.int64)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def load_curve_json(path) -> DiscreteSurface:
    """Curve input: JSON array of components, each an ordered [x, y] list."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list) or not data:
        raise GeometryError("curve JSON must be a non-empty array of components")
    loops = [np.asarray(comp, dtype=np.float64) for comp in data]
    return DiscreteSurface.from_curve_loops(loops)


def save_curve_json(surface: DiscreteSurface, path) -> None:
    """Save a 2D surface as JSON; round-trips bit-exactly through load."""
    if surface.mode != "curve2d":
        raise GeometryError("save_curve_json expects a 2D surface")
    comps = []
    start = 0
    for size in surface.loop_sizes:
        block = surface.vertices[start:start + size]
        comps.append([[float(x), float(y)] for x, y in block])
        start += size
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(comps, fh)
        fh.write("\n")


def load_off(path) -> DiscreteSurface:
    """Load a closed triangle mesh from an OFF file."""
    with open(path, "r", encoding="utf-8") as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise GeometryError("not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
    pos += 3 * nv
    tris = []
    for _ in range(nf):
        cnt = int(tokens[pos])
        if cnt != 3:
            raise GeometryError("OFF file contains a non-triangle face")
        tris.append([int(tokens[pos + 1]), int(tokens[pos + 2]), int(tokens[pos + 3])])
        pos += 4
    return DiscreteSurface.from_triangle_mesh(verts, np.array(tris, dtype=np.int64))


def save_off(surface: DiscreteSurface, path) -> None:
    if surface.mode != "mesh3d":
        raise GeometryError("save_off expects a 3D surface")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("OFF\n")
        fh.write(f"{surface.n_vertices} {surface.triangles.shape[0]} 0\n")
        for x, y, z in surface.vertices:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in surface.triangles:
            fh.write(f"3 {a} {b} {c}\n")


def load_obj(path) -> DiscreteSurface:
    """Load a closed triangle mesh from an OBJ file (triangles only)."""
    verts = []
    tris = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise GeometryError("OBJ file contains a non-triangle face")
                tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if not verts or not tris:
        raise GeometryError("OBJ file has no geometry")
    return DiscreteSurface.from_triangle_mesh(
        np.array(verts, dtype=np.float64), np.array(tris, dtype=np.int64))


def load_surface(path) -> DiscreteSurface:
    """Dispatch on file extension: .json curves, .off / .obj meshes."""
    name = str(path).lower()
    if name.endswith(".json"):
        return load_curve_json(path)
    if name.endswith(".off"):
        return load_off(path)
    if name.endswith(".obj"):
        return load_obj(path)
    raise GeometryError(f"unknown surface file extension: {path}")


def save_surface(surface: DiscreteSurface, path) -> None:
    if surface.mode == "curve2d":
        save_curve_json(surface, path)
    else:
        save_off(surface, path)
