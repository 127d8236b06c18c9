"""Discrete Laplace-Beltrami operator and the geometric H^-1 norm.

Assembles the stiffness / lumped-mass pair of a closed discrete surface
(2D: linear elements on the polygon, 3D: cotangent weights with
barycentric vertex areas), solves per-component zero-mean Poisson
problems through a bordered factorization, and evaluates the H^-1 norm
of densities: ``|xi|_{H^-1}^2 = integral(f xi)`` with ``-lap f = xi``.

The stiffness kernel is exactly the per-component constants, so mean
compatibility of the right hand side is a hard requirement; violations
signal that the density does not preserve the enclosed volume of some
component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .geometry import DiscreteSurface, GeometryError, _triangle_areas

__all__ = [
    "CompatibilityError",
    "Hm1Solver",
    "assemble",
    "apply_laplacian",
    "solve_poisson",
    "hm1_norm",
    "norm_suite",
    "NormSuite",
]

DEFAULT_COMPAT_TOL = 1e-8
SOLVE_TOL = 1e-10


class CompatibilityError(ValueError):
    """Right hand side has nonzero weighted mean on some component.

    For a density xi this means the enclosed volume of that component is
    not preserved, so its H^-1 distance is infinite.
    """

    def __init__(self, components, means):
        self.components = components
        self.means = means
        super().__init__(
            f"nonzero mean on component(s) {components}: {means}")


@dataclass
class Hm1Solver:
    """Assembled operators of one surface.

    ``stiffness`` is symmetric positive semidefinite with the
    per-component constants as kernel; ``mass`` is the diagonal of the
    lumped mass matrix (vertex lengths in 2D, barycentric vertex areas
    in 3D).  ``solve`` handles are factored lazily and reused.
    """

    surface: DiscreteSurface
    stiffness: sparse.csr_matrix
    mass: np.ndarray
    component_id: np.ndarray
    component_measure: np.ndarray
    compat_tol: float = DEFAULT_COMPAT_TOL
    _bordered_lu: object = field(default=None, repr=False)

    @property
    def n_components(self) -> int:
        return self.component_measure.shape[0]

    def component_means(self, values: np.ndarray) -> np.ndarray:
        """Area-weighted mean of a vertex field on every component."""
        w = self.mass * values
        sums = np.bincount(self.component_id, weights=w,
                           minlength=self.n_components)
        return sums / self.component_measure

    def check_compatibility(self, xi: np.ndarray) -> None:
        """Raise CompatibilityError unless xi has per-component zero mean.

        The tolerance is relative: ``|integral_c xi| <= compat_tol *
        |xi|_L2 * sqrt(measure_c)``, with an absolute floor for fields
        that vanish identically.
        """
        w = self.mass * xi
        sums = np.bincount(self.component_id, weights=w,
                           minlength=self.n_components)
        norm = np.sqrt(float(np.sum(self.mass * xi * xi)))
        scale = max(norm, 1e-300)
        bound = self.compat_tol * scale * np.sqrt(self.component_measure)
        bad = np.abs(sums) > bound
        if bad.any():
            comps = np.nonzero(bad)[0].tolist()
            raise CompatibilityError(comps, sums[bad].tolist())

    def _bordered(self):
        # stiffness bordered with one area-weighted constraint row per
        # component; pins the means and keeps the factorization reusable
        if self._bordered_lu is None:
            n = self.surface.n_vertices
            c = self.n_components
            rows = self.component_id
            cols = np.arange(n)
            B = sparse.coo_matrix((self.mass, (rows, cols)), shape=(c, n))
            K = sparse.bmat([[self.stiffness, B.T], [B, None]], format="csc")
            self._bordered_lu = splu(K)
        return self._bordered_lu

    def solve_zero_mean(self, rhs: np.ndarray) -> np.ndarray:
        """Solve stiffness @ f = rhs with per-component zero-mean f."""
        n = self.surface.n_vertices
        full = np.concatenate([rhs, np.zeros(self.n_components)])
        sol = self._bordered().solve(full)
        return sol[:n]


class NormSuite(NamedTuple):
    l2: float
    h1_semi: float
    hm1: float | None


def assemble(surface: DiscreteSurface,
             compat_tol: float = DEFAULT_COMPAT_TOL) -> Hm1Solver:
    """Assemble stiffness and lumped mass for a discrete surface.

    2D curves get the periodic piecewise-linear stiffness (edge weights
    1 / length) with vertex-length mass; triangle meshes get the
    cotangent stiffness with barycentric vertex areas.  Both are
    assembled element-wise, so a per-component-constant field is
    annihilated to machine precision.
    """
    if surface.mode == "curve2d":
        S, M = _assemble_curve(surface)
    else:
        S, M = _assemble_mesh(surface)
    comp_measure = np.bincount(surface.component_id, weights=M,
                               minlength=surface.n_components)
    return Hm1Solver(surface=surface, stiffness=S, mass=M,
                     component_id=surface.component_id,
                     component_measure=comp_measure, compat_tol=compat_tol)


def _assemble_curve(surface):
    n = surface.n_vertices
    nxt = surface.next_index()
    ell = surface.edge_lengths()
    if ell.min() <= 0:
        raise GeometryError("zero-length edge in stiffness assembly")
    w = 1.0 / ell
    i = np.arange(n)
    j = nxt
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([-w, -w, w, w])
    S = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    M = np.zeros(n)
    np.add.at(M, i, 0.5 * ell)
    np.add.at(M, j, 0.5 * ell)
    return S, M


def _assemble_mesh(surface):
    v = surface.vertices
    t = surface.triangles
    n = surface.n_vertices
    p = [v[t[:, k]] for k in range(3)]
    areas = _triangle_areas(v, t)
    rows, cols, vals = [], [], []
    M = np.zeros(n)
    for k in range(3):
        a = t[:, k]
        b = t[:, (k + 1) % 3]
        c = t[:, (k + 2) % 3]
        e1 = p[(k + 1) % 3] - p[k]
        e2 = p[(k + 2) % 3] - p[k]
        cot = np.einsum("ij,ij->i", e1, e2) / (2.0 * areas)
        w = 0.5 * cot
        rows.extend([b, c, b, c])
        cols.extend([c, b, b, c])
        vals.extend([-w, -w, w, w])
        np.add.at(M, a, areas / 3.0)
    S = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    return S, M


def apply_laplacian(solver: Hm1Solver, f: np.ndarray) -> np.ndarray:
    """Pointwise Laplace-Beltrami approximation, mass-inverse of -stiffness.

    The output has exact zero weighted mean on every component because
    the stiffness columns sum to zero there.
    """
    f = _check_field(solver, f)
    return -(solver.stiffness @ f) / solver.mass


def solve_poisson(solver: Hm1Solver, xi: np.ndarray) -> np.ndarray:
    """Solve ``-lap f = xi`` weakly (stiffness f = mass xi), zero-mean f.

    Raises
    ------
    CompatibilityError
        If xi has nonzero weighted mean on some component (the continuum
        problem has no solution there; for densities this mirrors a
        volume change of that component).
    """
    xi = _check_field(solver, xi)
    solver.check_compatibility(xi)
    rhs = solver.mass * xi
    # project quadrature-level mean defect so the bordered system stays
    # consistent
    means = np.bincount(solver.component_id, weights=rhs,
                        minlength=solver.n_components)
    rhs = rhs - (means / solver.component_measure)[solver.component_id] * solver.mass
    f = solver.solve_zero_mean(rhs)
    residual = solver.stiffness @ f - rhs
    rel = np.linalg.norm(residual) / max(np.linalg.norm(rhs), 1e-300)
    if rel > 1e3 * SOLVE_TOL and np.linalg.norm(rhs) > 0:
        raise GeometryError(f"poisson solve failed: relative residual {rel:.2e}")
    return f


def hm1_norm(solver: Hm1Solver, xi: np.ndarray) -> float:
    """Geometric H^-1 norm of a per-component mean-free density.

    Equals ``sqrt(integral f xi)`` with ``-lap f = xi``; for the
    normal-column density of a volume-preserving deformation this is the
    minimizing-movements distance between the two shapes.
    """
    xi = _check_field(solver, xi)
    if float(np.sum(solver.mass * xi * xi)) == 0.0:
        return 0.0
    f = solve_poisson(solver, xi)
    val = float(np.sum(solver.mass * f * xi))
    return float(np.sqrt(max(val, 0.0)))


def norm_suite(solver: Hm1Solver, f: np.ndarray) -> NormSuite:
    """Discrete L2 norm, H1 seminorm, and (when compatible) H^-1 norm.

    For every per-component zero-mean field the three satisfy the
    interpolation inequality ``l2^2 <= h1_semi * hm1`` exactly up to
    roundoff: ``l2^2 = f' S u = <f, u>_S <= |f|_S |u|_S`` with
    ``S u = M f``, and ``|u|_S = hm1``.
    """
    f = _check_field(solver, f)
    l2 = float(np.sqrt(np.sum(solver.mass * f * f)))
    h1 = float(np.sqrt(max(f @ (solver.stiffness @ f), 0.0)))
    try:
        hm1 = hm1_norm(solver, f)
    except CompatibilityError:
        hm1 = None
    return NormSuite(l2, h1, hm1)


def _check_field(solver, f):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (solver.surface.n_vertices,):
        raise ValueError(
            f"field length {f.shape} does not match surface "
            f"({solver.surface.n_vertices} vertices)")
    return f
