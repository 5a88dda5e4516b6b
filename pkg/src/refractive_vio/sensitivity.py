"""Epipolar weighting of the refractive-index Jacobian.

Refraction changes the image only radially, so a landmark whose image motion
runs along the radial line (or perpendicular to it) carries little usable
information about ``n`` and is dominated by tracking noise. The weight

    v = |sin(2 theta)|**q * r**k

vanishes in both cases, where ``theta`` is the angle between the local
epipolar direction and the radial direction from the image centre and ``r``
is the pixel radius normalized by the image half-diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rotation import log_so3, skew

DEGENERATE_TRANSLATION = 1e-6
_LINE_STEP = 1e-3


class DegenerateMotion(ValueError):
    """Frame-to-frame translation too small to define an epipolar geometry."""


@dataclass(frozen=True)
class HeuristicParams:
    q: float = 0.5
    k: float = 0.8
    max_rotation_deg: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.q <= 1.0 and 0.0 < self.k <= 1.0):
            raise ValueError("heuristic exponents must satisfy 0 < q, k <= 1")


@dataclass(frozen=True)
class RelativeMotion:
    """Camera motion ``p_next = R p_prev + t`` between consecutive frames."""

    R: np.ndarray
    t: np.ndarray

    @property
    def is_degenerate(self) -> bool:
        return float(np.linalg.norm(self.t)) < DEGENERATE_TRANSLATION

    @property
    def rotation_angle_deg(self) -> float:
        return float(np.degrees(np.linalg.norm(log_so3(self.R))))

    def small_rotation(self, params: HeuristicParams) -> bool:
        """Whether the small-rotation premise of the heuristic holds."""
        return self.rotation_angle_deg <= params.max_rotation_deg


def essential_matrix(motion: RelativeMotion) -> np.ndarray:
    """``E = [t]x R`` so that ``x_next^T E x_prev = 0``."""
    if motion.is_degenerate:
        raise DegenerateMotion("translation below 1e-6 m")
    return skew(np.asarray(motion.t, dtype=float)) @ np.asarray(motion.R, dtype=float)


def heuristic_value(theta: float, r: float, q: float = 0.5, k: float = 0.8) -> float:
    """``|sin 2 theta|**q * r**k``."""
    return float(np.abs(np.sin(2.0 * theta)) ** q * r**k)


def epipolar_image_direction(E: np.ndarray, bearing, u, camera, n: float):
    """Unit image-plane direction of the epipolar line ``E^T bearing`` near pixel ``u``.

    The line lives on the normalized plane of the frame that ``u`` belongs
    to; two points on it around the foot of ``u`` are pushed through the full
    refractive camera and differenced. Returns None when the line is
    degenerate or cannot be projected.
    """
    lam = np.asarray(E, dtype=float).T @ np.asarray(bearing, dtype=float)
    normal = lam[:2]
    nn = np.linalg.norm(normal)
    if nn < 1e-12 or not np.isfinite(nn):
        return None
    mu = camera.unproject(n, np.asarray(u, dtype=float))
    x = mu[:2] / mu[2]
    # foot of x on the line lam0 x + lam1 y + lam2 = 0
    dist = (lam[:2] @ x + lam[2]) / nn
    foot = x - dist * normal / nn
    direction = np.array([normal[1], -normal[0]]) / nn
    pts = np.array([foot - _LINE_STEP * direction, foot + _LINE_STEP * direction])
    rays = np.concatenate([pts, np.ones((2, 1))], axis=1)
    pix, ok = camera.project_batch(n, rays)
    if not np.all(ok):
        return None
    d = pix[1] - pix[0]
    nd = np.linalg.norm(d)
    if nd < 1e-12:
        return None
    return d / nd


def heuristic_weight(E, bearing, u, center, params: HeuristicParams, camera, n: float) -> float:
    """Sensitivity weight ``v`` of one landmark.

    Parameters
    ----------
    E : (3, 3) array
        Essential matrix of the frame-to-frame motion.
    bearing : (3,) array
        Unit bearing of the landmark in the frame the motion ends in.
    u : (2,) array
        Pixel of the landmark in the frame the motion starts from.
    center : (2,) array
        Image centre used for the radial direction.
    """
    u = np.asarray(u, dtype=float)
    radial = u - np.asarray(center, dtype=float)
    rad = np.linalg.norm(radial)
    if rad < 1e-9:
        return 0.0
    line_dir = epipolar_image_direction(E, bearing, u, camera, n)
    if line_dir is None:
        return 0.0
    cos_theta = np.clip(line_dir @ (radial / rad), -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    r = min(rad / camera.half_diagonal, 1.0)
    return heuristic_value(theta, r, params.q, params.k)
