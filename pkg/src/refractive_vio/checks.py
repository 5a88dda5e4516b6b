"""Finite-difference verification of the camera model's analytic Jacobians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera as cm
from .camera import EquidistantParams, Intrinsics, RefractiveCamera

JACOBIAN_NAMES = (
    "plane_projection",
    "refraction_wrt_n",
    "refraction_wrt_point",
    "lens_distortion",
    "pixel_wrt_point",
    "pixel_wrt_n",
)
DEFAULT_TOLERANCE = 1e-5


@dataclass
class JacobianCheck:
    name: str
    worst_error: float
    worst_input: dict
    trials: int

    def passed(self, tol: float = DEFAULT_TOLERANCE) -> bool:
        return self.worst_error < tol


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Frobenius-norm relative difference, floored to avoid dividing by ~0."""
    a = np.atleast_1d(np.asarray(analytic, dtype=float))
    b = np.atleast_1d(np.asarray(numeric, dtype=float))
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


def central_difference(f, x, step: float = 1e-6) -> np.ndarray:
    """Jacobian of ``f`` at ``x`` (scalar or vector) by central differences."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def random_camera(rng) -> RefractiveCamera:
    fx = rng.uniform(200.0, 500.0)
    return RefractiveCamera(
        Intrinsics(fx=fx, fy=fx * rng.uniform(0.95, 1.05), cx=rng.uniform(300.0, 340.0), cy=rng.uniform(220.0, 260.0)),
        EquidistantParams(*rng.uniform(-0.02, 0.02, size=4)),
    )


def random_valid_input(rng):
    """Index in [1, 1.6] and a 3-D point whose ray is well inside the refractive field of view."""
    n = rng.uniform(1.0, 1.6)
    max_angle = min(cm.critical_half_angle(n), np.radians(75.0))
    angle = rng.uniform(0.0, 0.9 * max_angle)
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    depth = rng.uniform(0.3, 10.0)
    r = np.tan(angle)
    p = depth * np.array([r * np.cos(azimuth), r * np.sin(azimuth), 1.0])
    return n, p


def _analytic_and_numeric(name, n, p, cam, perturb):
    k = cam.distortion.as_array()
    pbar = cm.project_plane(p)
    if name == "plane_projection":
        a = cm.project_plane_jacobian(p)
        num = central_difference(cm.project_plane, p)
    elif name == "refraction_wrt_n":
        a = cm.refract_jacobian_n(n, pbar)
        num = central_difference(lambda v: cm.refract_forward(v[0], pbar), n)[:, 0]
    elif name == "refraction_wrt_point":
        a = cm.refract_jacobian_point(n, pbar)
        num = central_difference(lambda v: cm.refract_forward(n, v), pbar)
    elif name == "lens_distortion":
        pr = cm.refract_forward(n, pbar)
        a = cm.lens_distort_jacobian(k, pr)
        num = central_difference(lambda v: cm.lens_distort(k, v), pr)
    elif name == "pixel_wrt_point":
        a = cam.project_jacobians(n, p)[0]
        num = central_difference(lambda v: cam.project(n, v), p)
    elif name == "pixel_wrt_n":
        a = cam.project_jacobians(n, p)[1]
        num = central_difference(lambda v: cam.project(v[0], p), n)[:, 0]
    else:
        raise KeyError(name)
    if perturb == name:
        a = np.asarray(a) * (1.0 + 1e-3)
    return a, num


def check_jacobians(seed: int = 0, trials: int = 1000, perturb: str | None = None) -> list[JacobianCheck]:
    """Compare every analytic Jacobian with central differences on random inputs.

    ``perturb`` names one Jacobian whose analytic value is scaled by
    ``1 + 1e-3`` before comparison, to demonstrate that errors are caught.
    """
    if perturb is not None and perturb not in JACOBIAN_NAMES:
        raise KeyError(f"unknown Jacobian {perturb!r}")
    rng = np.random.default_rng(seed)
    worst = {name: (0.0, {}) for name in JACOBIAN_NAMES}
    for _ in range(trials):
        cam = random_camera(rng)
        n, p = random_valid_input(rng)
        for name in JACOBIAN_NAMES:
            a, num = _analytic_and_numeric(name, n, p, cam, perturb)
            err = relative_error(a, num)
            if err > worst[name][0]:
                worst[name] = (err, {"n": n, "point": p.tolist(), "k": cam.distortion.as_array().tolist()})
    return [JacobianCheck(name, worst[name][0], worst[name][1], trials) for name in JACOBIAN_NAMES]
