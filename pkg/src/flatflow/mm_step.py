"""One constrained incremental minimization step.

Given the previous surface, find the height field psi minimizing the
graph perimeter plus the squared H^-1 distance to the reference divided
by 2h, with the tubular constraint |psi| <= delta checked a posteriori.
The combined Euler-Lagrange equation on the reference surface is

    (1/h) xi(psi) = lap(-lap psi + H + R0(psi)),

solved by Picard iteration on the semi-implicit linearization: the
stiff symmetric positive definite part (1/h) M + S M^-1 S is treated
implicitly, while the curvature remainder R0 and the superlinear part
of xi are lagged.  At a fixed point the equation holds with the exact
discrete graph curvature, which makes the per-component mean of xi
vanish by construction (the right hand side is a Laplacian).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import splu

from . import laplace_beltrami as lb
from . import normal_graph as ng
from .geometry import CurvatureData, DiscreteSurface

__all__ = ["StepConfig", "StepResult", "step", "energy", "el_residual"]


@dataclass(frozen=True)
class StepConfig:
    """Step parameters.

    ``h`` carries units length^4 per unit normal displacement (curvature
    scales as 1/length and its surface Laplacian as 1/length^3), so
    round-shape mode rates scale as 1/R^4.  ``delta`` is the tubular
    constraint radius and must stay below the reference UBC radius;
    ``None`` lets the flow driver resolve it per step as an eighth of
    the UBC estimate (a bare step call requires a number).
    """

    h: float
    delta: float | None
    max_picard: int = 50
    picard_tol: float = 1e-10
    fallback: str = "none"  # "none" | "gradient_descent"

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("time step h must be positive")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("constraint radius delta must be positive")
        if self.fallback not in ("none", "gradient_descent"):
            raise ValueError(f"unknown fallback {self.fallback!r}")


@dataclass
class StepResult:
    """Solution and per-step ledger of one incremental minimization."""

    psi: np.ndarray
    xi: np.ndarray
    distance: float
    multiplier_per_component: np.ndarray
    el_residual: float
    constraint_margin: float
    converged: bool
    picard_iters: int
    H_graph: np.ndarray = field(repr=False, default=None)


def _step_operator(solver: lb.Hm1Solver, h: float):
    """Factor (1/h) M + S M^-1 S (symmetric positive definite)."""
    S = solver.stiffness
    Minv = diags(1.0 / solver.mass)
    A = diags(solver.mass) / h + (S @ Minv @ S)
    return splu(A.tocsc())


ANDERSON_DEPTH = 6


def _anderson_update(hist_x, hist_f, g, f, bound):
    """Type-II Anderson step from the residual history; falls back to the
    plain Picard iterate when the extrapolation misbehaves."""
    m = len(hist_x)
    if m < 2:
        return g
    df = np.stack([hist_f[j + 1] - hist_f[j] for j in range(m - 1)], axis=1)
    dg = np.stack([(hist_x[j + 1] + hist_f[j + 1]) - (hist_x[j] + hist_f[j])
                   for j in range(m - 1)], axis=1)
    gamma, *_ = np.linalg.lstsq(df, f, rcond=None)
    cand = g - dg @ gamma
    if not np.isfinite(cand).all() or np.abs(cand).max() >= bound:
        return g
    return cand


def _superlinear_xi(curvature: CurvatureData, psi: np.ndarray) -> np.ndarray:
    """q(psi) = xi(psi) - psi, the lagged superlinear part."""
    if curvature.kappa is not None:
        return 0.5 * curvature.kappa * psi**2
    return 0.5 * curvature.H * psi**2 + curvature.K * psi**3 / 3.0


def step(reference: DiscreteSurface, curvature: CurvatureData,
         solver: lb.Hm1Solver, cfg: StepConfig) -> StepResult:
    """Solve one incremental minimization over graphs of the reference.

    Warm start psi = 0 selects the local minimizer near the reference
    (global minimizers of the nonconvex functional can be spurious).
    On return the per-component enclosed volume is restored exactly in
    the xi sense by a constant Newton shift, and the multiplier, H^-1
    distance, Euler-Lagrange residual and constraint margin are
    reported.  Non-convergence and constraint violations are returned
    in the flags, not raised; the caller decides.
    """
    if cfg.delta is None:
        raise ValueError("step() needs a resolved delta (set one or use the driver)")
    n = reference.n_vertices
    lu = _step_operator(solver, cfg.h)
    S = solver.stiffness
    M = solver.mass
    H = curvature.H
    bound = 0.9 * ng.ubc_height_bound(curvature)

    def picard_map(p):
        r0 = np.zeros(n) if not p.any() else \
            ng.mean_curvature_of_graph(reference, curvature, p, solver).R0
        q = _superlinear_xi(curvature, p)
        rhs = -(S @ (H + r0)) - (M * q) / cfg.h
        return lu.solve(rhs)

    # Picard with Anderson mixing: the lagged curvature remainder makes
    # mesh-frequency modes quasi-explicit (contraction h lam^2 / (1 + h
    # lam^2)), which plain iteration resolves too slowly; the tail is
    # affine, so a short residual history removes it.
    psi = np.zeros(n)
    iters = 0
    converged = False
    # absolute floor: stationary shapes have psi at roundoff, and the
    # residual of the map itself bottoms out near eps * coordinate scale
    atol = max(cfg.picard_tol * cfg.delta * 1e-3, 1e-13 * reference.bbox_diag)
    hist_x, hist_f = [], []
    for iters in range(1, cfg.max_picard + 1):
        g = picard_map(psi)
        f = g - psi
        res = float(np.abs(f).max())
        if res <= max(cfg.picard_tol * float(np.abs(g).max()), atol):
            psi = g
            converged = True
            break
        hist_x.append(psi)
        hist_f.append(f)
        if len(hist_x) > ANDERSON_DEPTH:
            hist_x.pop(0)
            hist_f.pop(0)
        psi = _anderson_update(hist_x, hist_f, g, f, bound)

    if not converged and cfg.fallback == "gradient_descent":
        psi, converged = _descent_fallback(reference, curvature, solver, cfg, psi)

    psi = _volume_shift(curvature, solver, psi)
    xi = ng.xi_from_height(curvature, psi)
    distance = lb.hm1_norm(solver, xi)
    geom = ng.mean_curvature_of_graph(reference, curvature, psi, solver)
    residual = _el_residual_fields(solver, xi, geom.H_graph, cfg.h)

    if distance > 0.0:
        f_el = lb.solve_poisson(solver, xi) / distance
    else:
        f_el = np.zeros(n)
    mult_field = geom.H_graph + (distance / cfg.h) * f_el
    multipliers = solver.component_means(mult_field)

    margin = float(np.abs(psi).max() / cfg.delta)
    if margin > 1.0:
        converged = False
    return StepResult(psi=psi, xi=xi, distance=distance,
                      multiplier_per_component=multipliers,
                      el_residual=residual, constraint_margin=margin,
                      converged=converged, picard_iters=iters,
                      H_graph=geom.H_graph)


def _volume_shift(curvature, solver, psi):
    """Per-component constant shift making integral(xi) vanish exactly."""
    for _ in range(3):
        xi = ng.xi_from_height(curvature, psi)
        g = np.bincount(solver.component_id, weights=solver.mass * xi,
                        minlength=solver.n_components)
        dxi = ng.xi_derivative(curvature, psi)
        gp = np.bincount(solver.component_id, weights=solver.mass * dxi,
                         minlength=solver.n_components)
        shift = g / gp
        psi = psi - shift[solver.component_id]
        if np.abs(shift).max() < 1e-16 * max(np.abs(psi).max(), 1e-300):
            break
    return psi


def _el_residual_fields(solver, xi, H_graph, h):
    lap_h = lb.apply_laplacian(solver, H_graph)
    r = xi / h - lap_h
    return float(np.sqrt(np.sum(solver.mass * r * r)))


def energy(reference: DiscreteSurface, curvature: CurvatureData,
           solver: lb.Hm1Solver, psi: np.ndarray, h: float):
    """Incremental energy split of a height field.

    Returns ``(perimeter_term, dissipation_term, total)`` with the
    perimeter term the quadrature of the graph Jacobian and the
    dissipation ``hm1_norm(xi)^2 / (2h)``.  Raises CompatibilityError
    for volume-changing fields.
    """
    psi = np.asarray(psi, dtype=np.float64)
    J = ng.graph_jacobian(reference, curvature, psi)
    perimeter_term = float(np.sum(solver.mass * J))
    xi = ng.xi_from_height(curvature, psi)
    dist = lb.hm1_norm(solver, xi)
    dissipation = dist * dist / (2.0 * h)
    return perimeter_term, dissipation, perimeter_term + dissipation


def el_residual(reference: DiscreteSurface, curvature: CurvatureData,
                solver: lb.Hm1Solver, psi: np.ndarray, h: float) -> float:
    """L2 norm of (1/h) xi(psi) - lap(H_graph(psi)) on the reference.

    This is the combined Euler-Lagrange equation with the exact discrete
    graph curvature in place of the expansion; it decreases along
    converging Picard runs and vanishes at the fixed point.
    """
    psi = np.asarray(psi, dtype=np.float64)
    xi = ng.xi_from_height(curvature, psi)
    geom = ng.mean_curvature_of_graph(reference, curvature, psi, solver)
    return _el_residual_fields(solver, xi, geom.H_graph, h)


def _descent_fallback(reference, curvature, solver, cfg, psi0):
    """Projected gradient descent on the incremental energy.

    Engineering guard for Picard non-convergence: descends the energy
    with per-component volume shifts after every trial step, with
    backtracking, until the relative update drops below picard_tol.
    """
    psi = _volume_shift(curvature, solver, psi0.copy())
    _, _, total = energy(reference, curvature, solver, psi, cfg.h)
    scale = max(float(np.abs(psi).max()), cfg.delta * 1e-6)
    step_len = 0.1 * cfg.h
    for _ in range(200):
        xi = ng.xi_from_height(curvature, psi)
        dist = lb.hm1_norm(solver, xi)
        geom = ng.mean_curvature_of_graph(reference, curvature, psi, solver)
        f_pot = lb.solve_poisson(solver, xi) if dist > 0 else np.zeros_like(psi)
        grad = geom.H_graph + (f_pot / cfg.h) * ng.xi_derivative(curvature, psi)
        grad = grad - solver.component_means(grad)[solver.component_id]
        gnorm = float(np.abs(grad).max())
        if gnorm == 0.0:
            return psi, True
        while step_len * gnorm > 0.25 * cfg.delta:
            step_len *= 0.5
        trial = _volume_shift(curvature, solver, psi - step_len * grad)
        _, _, trial_total = energy(reference, curvature, solver, trial, cfg.h)
        if trial_total <= total:
            moved = float(np.abs(trial - psi).max())
            psi, total = trial, trial_total
            step_len *= 1.5
            if moved <= cfg.picard_tol * max(float(np.abs(psi).max()), scale):
                return psi, True
        else:
            step_len *= 0.5
            if step_len * gnorm < cfg.picard_tol * scale:
                return psi, True
    return psi, False
