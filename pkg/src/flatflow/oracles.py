"""Independent references: stationary shapes and linearized decay spectra.

The surface diffusion law moves the boundary with normal velocity equal
to the surface Laplacian of mean curvature.  Around a circle of radius R
the Fourier mode k decays at rate -(k^4 - k^2) / R^4; around a sphere
the degree-l harmonic decays at -lam (lam - 2) / R^4 with lam = l(l+1).
Both formulas are derived by linearization and are gated by
:func:`verify_linear_rates`, which differentiates the exact discrete
operator at shrinking amplitudes with Richardson extrapolation before
the rates are trusted by any test.
"""

from __future__ import annotations

import json

import numpy as np

from . import laplace_beltrami as lb
from .geometry import (DiscreteSurface, build_shape, compute_curvature,
                       real_sph_harm)

__all__ = [
    "linear_rate",
    "spectral_reference_curve",
    "stationarity_check",
    "verify_linear_rates",
]


def linear_rate(shape: str, R: float, mode: int) -> float:
    """Linearized decay rate of one mode around a round stationary shape.

    ``shape`` is ``"circle"`` (mode = Fourier index k) or ``"sphere"``
    (mode = spherical-harmonic degree l).  Volume and translation
    neutrality give rate zero for the two lowest modes; all higher modes
    are strictly decaying.
    """
    if mode < 0:
        raise ValueError("mode must be >= 0")
    if R <= 0:
        raise ValueError("radius must be positive")
    if shape == "circle":
        k2 = float(mode) ** 2
        return -(k2 * (k2 - 1.0)) / R**4 + 0.0
    if shape == "sphere":
        lam = float(mode) * (mode + 1.0)
        return -(lam * (lam - 2.0)) / R**4 + 0.0
    raise ValueError(f"unknown shape {shape!r}")


def spectral_reference_curve(coefficients: dict, R: float, t_final: float) -> dict:
    """Propagate mode coefficients exactly: u_k(t) = u_k(0) exp(rate t)."""
    return {int(k): float(a) * float(np.exp(linear_rate("circle", R, int(k)) * t_final))
            for k, a in coefficients.items()}


def stationarity_check(surface: DiscreteSurface, curvature=None, solver=None) -> float:
    """L2 norm of the discrete surface Laplacian of mean curvature.

    The direct residual of the continuous law: zero on constant-mean-
    curvature components up to mesh resolution.  On coarse triangle
    meshes the value is dominated by mesh-frequency noise of the
    curvature estimate; it is a resolution-limited indicator, not a
    convergent error norm.
    """
    if curvature is None:
        curvature = compute_curvature(surface)
    if solver is None:
        solver = lb.assemble(surface)
    lap_h = lb.apply_laplacian(solver, curvature.H)
    return float(np.sqrt(np.sum(solver.mass * lap_h**2)))


def _measured_rate_circle(k: int, amplitude: float, n: int) -> float:
    """Discrete velocity response of one circle mode, per unit amplitude."""
    surf = build_shape({"kind": "perturbed_circle", "R": 1.0, "mode": k,
                        "amplitude": amplitude, "n": n})
    curv = compute_curvature(surf)
    solver = lb.assemble(surf)
    velocity = lb.apply_laplacian(solver, curv.H)
    theta = np.arctan2(surf.vertices[:, 1], surf.vertices[:, 0])
    basis = np.cos(k * theta)
    proj = float(np.sum(solver.mass * velocity * basis)
                 / np.sum(solver.mass * basis * basis))
    return proj / amplitude


def _measured_rate_sphere(degree: int, amplitude: float, subdiv: int) -> float:
    surf = build_shape({"kind": "perturbed_sphere", "R": 1.0, "degree": degree,
                        "order": 0, "amplitude": amplitude, "subdiv": subdiv})
    curv = compute_curvature(surf)
    solver = lb.assemble(surf)
    velocity = lb.apply_laplacian(solver, curv.H)
    dirs = surf.vertices / np.linalg.norm(surf.vertices, axis=1)[:, None]
    basis = real_sph_harm(degree, 0, dirs)
    proj = float(np.sum(solver.mass * velocity * basis)
                 / np.sum(solver.mass * basis * basis))
    return proj / amplitude


def _richardson(rates):
    """Eliminate linear and quadratic amplitude bias from rate(a),
    rate(a/2), rate(a/4)."""
    r1, r2, r4 = rates
    return (8.0 * r4 - 6.0 * r2 + r1) / 3.0


def verify_linear_rates(report_path=None, n_curve: int = 1024,
                        subdiv: int = 4) -> dict:
    """Brute-force verification of the shipped spectra.

    Measures the discrete normal-velocity response at three shrinking
    amplitudes, extrapolates the amplitude bias away, and compares with
    :func:`linear_rate`.  Optionally writes the extrapolation table to a
    JSON report.
    """
    report = {"cases": []}
    for k in (2, 3):
        base = 2e-3
        rates = [_measured_rate_circle(k, base / 2**j, n_curve) for j in range(3)]
        extrap = _richardson(rates)
        formula = linear_rate("circle", 1.0, k)
        report["cases"].append({
            "shape": "circle", "mode": k, "amplitudes": [base, base / 2, base / 4],
            "measured": rates, "extrapolated": extrap, "formula": formula,
            "rel_err": abs(extrap - formula) / abs(formula),
        })
    for ell in (2, 3):
        base = 2e-3
        rates = [_measured_rate_sphere(ell, base / 2**j, subdiv) for j in range(3)]
        extrap = _richardson(rates)
        formula = linear_rate("sphere", 1.0, ell)
        report["cases"].append({
            "shape": "sphere", "mode": ell, "amplitudes": [base, base / 2, base / 4],
            "measured": rates, "extrapolated": extrap, "formula": formula,
            "rel_err": abs(extrap - formula) / abs(formula),
        })
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    return report
