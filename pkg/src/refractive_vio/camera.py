"""Flat-port refractive camera: Snell refraction at a thin planar window,
equidistant fisheye lens and pinhole intrinsics.

The pixel of a camera-frame point is ``K * lens(refract(n, plane(p)))``. The
camera itself is calibrated in air; the refractive index ``n`` of the
surrounding medium is passed to every call so that an estimator can treat it
as a state.

All normalized-plane functions accept arrays with a trailing dimension of 2
(or 3 for camera-frame points) and broadcast over leading dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# rays with 1 + r^2 (1 - n^2) below this are rejected as beyond the critical angle
H_MIN = 1e-9
# below this radius the lens scale and its Jacobian use their series expansion
LENS_SERIES_RADIUS = 1e-6
UNDISTORT_MAX_ITER = 20
UNDISTORT_TOL = 1e-12


class ModelDomainError(ValueError):
    """Input lies outside the domain of the camera model."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def Kf(self) -> np.ndarray:
        return np.diag([self.fx, self.fy])


@dataclass(frozen=True)
class EquidistantParams:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("equidistant coefficients must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.k3, self.k4], dtype=float)


# ---------------------------------------------------------------------------
# plane projection


def project_plane(p: np.ndarray) -> np.ndarray:
    """Project camera-frame points onto the plane at unit depth."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(~(z > 0.0)):
        raise ModelDomainError("point must lie in front of the camera (pz > 0)")
    return p[..., :2] / z[..., None]


def project_plane_jacobian(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if np.any(~(z > 0.0)):
        raise ModelDomainError("point must lie in front of the camera (pz > 0)")
    J = np.zeros(p.shape[:-1] + (2, 3))
    inv_z = 1.0 / z
    J[..., 0, 0] = inv_z
    J[..., 1, 1] = inv_z
    J[..., 0, 2] = -x * inv_z**2
    J[..., 1, 2] = -y * inv_z**2
    return J


# ---------------------------------------------------------------------------
# refraction at the flat port


def _refraction_h(n, r2):
    # written as 1 + r^2 (1 - n^2) so that n == 1 gives exactly h == 1
    return 1.0 + r2 * (1.0 - n * n)


def _check_h(h):
    if np.any(~(h >= H_MIN)):
        raise ModelDomainError("ray is beyond the critical angle of the flat port")


def refraction_gain_from_air(n: float, r) -> np.ndarray:
    """Ratio of refracted to unrefracted normalized radius, ``m(n, r)``.

    ``r`` is the normalized radius of the ray in the medium.
    """
    r = np.asarray(r, dtype=float)
    h = _refraction_h(n, r * r)
    _check_h(h)
    return n / np.sqrt(h)


def refraction_gain_from_refracted(n: float, r_r) -> np.ndarray:
    """Same ratio expressed through the refracted radius ``r_r``."""
    r_r = np.asarray(r_r, dtype=float)
    return np.sqrt(n * n + r_r * r_r * (n * n - 1.0))


def refract_forward(n: float, p: np.ndarray) -> np.ndarray:
    """Map a normalized point in the medium to the normalized point behind the port."""
    p = np.asarray(p, dtype=float)
    r = np.sqrt(np.sum(p * p, axis=-1))
    return refraction_gain_from_air(n, r)[..., None] * p


def refract_inverse(n: float, p_r: np.ndarray) -> np.ndarray:
    """Undo :func:`refract_forward`; defined for every point when ``n >= 1``."""
    if n < 1.0:
        raise ModelDomainError("inverse refraction requires n >= 1")
    p_r = np.asarray(p_r, dtype=float)
    r_r = np.sqrt(np.sum(p_r * p_r, axis=-1))
    return p_r / refraction_gain_from_refracted(n, r_r)[..., None]


def refract_jacobian_n(n: float, p: np.ndarray) -> np.ndarray:
    """Derivative of :func:`refract_forward` with respect to ``n`` (shape ``(..., 2)``)."""
    p = np.asarray(p, dtype=float)
    r2 = np.sum(p * p, axis=-1)
    h = _refraction_h(n, r2)
    _check_h(h)
    sh = np.sqrt(h)
    scale = (sh * n * n * r2 + sh**3) / h**2
    return scale[..., None] * p


def refract_jacobian_point(n: float, p: np.ndarray) -> np.ndarray:
    """Derivative of :func:`refract_forward` with respect to the point (``(..., 2, 2)``)."""
    p = np.asarray(p, dtype=float)
    x, y = p[..., 0], p[..., 1]
    r2 = x * x + y * y
    h = _refraction_h(n, r2)
    _check_h(h)
    sh = np.sqrt(h)
    c = n * n - 1.0
    J = np.empty(p.shape[:-1] + (2, 2))
    J[..., 0, 0] = n * (sh * x * x * c + sh**3) / h**2
    J[..., 1, 1] = n * (sh * y * y * c + sh**3) / h**2
    J[..., 0, 1] = J[..., 1, 0] = n * x * y * c / sh**3
    return J


# ---------------------------------------------------------------------------
# equidistant lens


def _theta_poly(k, theta):
    t2 = theta * theta
    return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))


def _theta_poly_derivative(k, theta):
    t2 = theta * theta
    return 1.0 + t2 * (3 * k[0] + t2 * (5 * k[1] + t2 * (7 * k[2] + t2 * 9 * k[3])))


def _as_k(k) -> np.ndarray:
    return k.as_array() if isinstance(k, EquidistantParams) else np.asarray(k, dtype=float)


def lens_distort(k, p_r: np.ndarray) -> np.ndarray:
    """Equidistant fisheye distortion of a refracted normalized point."""
    k = _as_k(k)
    p_r = np.asarray(p_r, dtype=float)
    r = np.sqrt(np.sum(p_r * p_r, axis=-1))
    small = r < LENS_SERIES_RADIUS
    r_safe = np.where(small, 1.0, r)
    theta = np.arctan(r_safe)
    scale = _theta_poly(k, theta) / r_safe
    r2 = r * r
    series = 1.0 + (k[0] - 1.0 / 3.0) * r2 + (0.2 - k[0] + k[1]) * r2 * r2
    scale = np.where(small, series, scale)
    return scale[..., None] * p_r


def lens_distort_jacobian(k, p_r: np.ndarray) -> np.ndarray:
    """2x2 Jacobian of :func:`lens_distort`.

    Sum of the direct scaling term, the radius term and the angle-polynomial
    term; near the optical axis the series limit is used.
    """
    k = _as_k(k)
    p_r = np.asarray(p_r, dtype=float)
    r = np.sqrt(np.sum(p_r * p_r, axis=-1))
    small = r < LENS_SERIES_RADIUS
    r_safe = np.where(small, 1.0, r)
    theta = np.arctan(r_safe)
    theta_e = _theta_poly(k, theta)
    outer = p_r[..., :, None] * p_r[..., None, :]
    eye = np.eye(2)
    # d(pl)/d(pr) + d(pl)/d(rr) d(rr)/d(pr) + d(pl)/d(theta_e) d(theta_e)/d(theta) d(theta)/d(rr) d(rr)/d(pr)
    direct = (theta_e / r_safe)[..., None, None] * eye
    radial = (-theta_e / r_safe**2 / r_safe)[..., None, None] * outer
    angular = (_theta_poly_derivative(k, theta) / (r_safe**2 + 1.0) / r_safe**2)[..., None, None] * outer
    J = direct + radial + angular
    if np.any(small):
        r2 = r * r
        s = 1.0 + (k[0] - 1.0 / 3.0) * r2 + (0.2 - k[0] + k[1]) * r2 * r2
        ds_over_r = 2.0 * (k[0] - 1.0 / 3.0) + 4.0 * (0.2 - k[0] + k[1]) * r2
        series = s[..., None, None] * eye + ds_over_r[..., None, None] * outer
        J = np.where(small[..., None, None], series, J)
    return J


def lens_undistort(k, p_l: np.ndarray) -> np.ndarray:
    """Invert :func:`lens_distort` by Newton iteration on the incidence angle."""
    k = _as_k(k)
    p_l = np.asarray(p_l, dtype=float)
    theta_e = np.sqrt(np.sum(p_l * p_l, axis=-1))
    theta = theta_e.copy()
    converged = False
    for _ in range(UNDISTORT_MAX_ITER):
        step = (_theta_poly(k, theta) - theta_e) / _theta_poly_derivative(k, theta)
        theta = theta - step
        if np.all(np.abs(step) < UNDISTORT_TOL):
            converged = True
            break
    if not converged or np.any(~np.isfinite(theta)):
        raise ModelDomainError("lens undistortion did not converge")
    if np.any((theta < 0.0) | (theta >= 0.5 * np.pi)):
        raise ModelDomainError("pixel lies outside the lens model (incidence >= 90 deg)")
    small = theta_e < LENS_SERIES_RADIUS
    te_safe = np.where(small, 1.0, theta_e)
    scale = np.where(small, 1.0, np.tan(theta) / te_safe)
    return scale[..., None] * p_l


def _lens_undistort_masked(k, p_l):
    """Vectorized undistortion that flags failures instead of raising."""
    theta_e = np.sqrt(np.sum(p_l * p_l, axis=-1))
    theta = theta_e.copy()
    for _ in range(UNDISTORT_MAX_ITER):
        step = (_theta_poly(k, theta) - theta_e) / _theta_poly_derivative(k, theta)
        theta = theta - step
        if np.all(np.abs(step) < UNDISTORT_TOL):
            break
    ok = np.isfinite(theta) & (np.abs(_theta_poly(k, theta) - theta_e) < 1e-9)
    ok &= (theta >= 0.0) & (theta < 0.5 * np.pi)
    small = theta_e < LENS_SERIES_RADIUS
    te_safe = np.where(small, 1.0, theta_e)
    with np.errstate(invalid="ignore"):
        scale = np.where(small, 1.0, np.tan(np.where(ok, theta, 0.0)) / te_safe)
    return scale[..., None] * p_l, ok


# ---------------------------------------------------------------------------
# full camera


@dataclass(frozen=True)
class RefractiveCamera:
    """In-air calibrated fisheye camera behind a flat port.

    Parameters
    ----------
    intrinsics : Intrinsics
        Pinhole focal lengths and principal point in pixels.
    distortion : EquidistantParams
        Equidistant polynomial coefficients.
    width, height : int
        Image size in pixels.
    """

    intrinsics: Intrinsics
    distortion: EquidistantParams = field(default_factory=EquidistantParams)
    width: int = 640
    height: int = 480

    @property
    def center(self) -> np.ndarray:
        return np.array([self.intrinsics.cx, self.intrinsics.cy])

    @property
    def half_diagonal(self) -> float:
        return 0.5 * float(np.hypot(self.width, self.height))

    def _pixel(self, p_l):
        i = self.intrinsics
        return np.stack([i.fx * p_l[..., 0] + i.cx, i.fy * p_l[..., 1] + i.cy], axis=-1)

    def _normalized(self, u):
        i = self.intrinsics
        u = np.asarray(u, dtype=float)
        return np.stack([(u[..., 0] - i.cx) / i.fx, (u[..., 1] - i.cy) / i.fy], axis=-1)

    def project(self, n: float, p: np.ndarray) -> np.ndarray:
        """Pixel of camera-frame point(s) ``p`` seen through a medium of index ``n``."""
        p_bar = project_plane(p)
        return self._pixel(lens_distort(self.distortion, refract_forward(n, p_bar)))

    def project_jacobians(self, n: float, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(du/dp, du/dn)`` with shapes ``(..., 2, 3)`` and ``(..., 2)``."""
        p = np.asarray(p, dtype=float)
        p_bar = project_plane(p)
        p_r = refract_forward(n, p_bar)
        Jl = self.intrinsics.Kf @ lens_distort_jacobian(self.distortion, p_r)
        du_dp = Jl @ refract_jacobian_point(n, p_bar) @ project_plane_jacobian(p)
        du_dn = (Jl @ refract_jacobian_n(n, p_bar)[..., None])[..., 0]
        return du_dp, du_dn

    def project_batch(self, n: float, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Non-raising projection; returns ``(pixels, valid)``."""
        p = np.asarray(p, dtype=float)
        valid = p[..., 2] > 0.0
        z = np.where(valid, p[..., 2], 1.0)
        p_bar = p[..., :2] / z[..., None]
        r2 = np.sum(p_bar * p_bar, axis=-1)
        h = _refraction_h(n, r2)
        valid &= h >= H_MIN
        m = n / np.sqrt(np.where(valid, h, 1.0))
        p_r = m[..., None] * p_bar
        return self._pixel(lens_distort(self.distortion, p_r)), valid

    def unproject(self, n: float, u: np.ndarray) -> np.ndarray:
        """Unit bearing vector(s) of pixel(s) ``u``."""
        p_l = self._normalized(u)
        p_bar = refract_inverse(n, lens_undistort(self.distortion, p_l))
        ray = np.concatenate([p_bar, np.ones(p_bar.shape[:-1] + (1,))], axis=-1)
        return ray / np.linalg.norm(ray, axis=-1, keepdims=True)

    def unproject_batch(self, n: float, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Non-raising unprojection; returns ``(bearings, valid)``."""
        if n < 1.0:
            raise ModelDomainError("inverse refraction requires n >= 1")
        p_r, valid = _lens_undistort_masked(self.distortion.as_array(), self._normalized(u))
        p_r = np.where(valid[..., None], p_r, 0.0)
        p_bar = refract_inverse(n, p_r)
        ray = np.concatenate([p_bar, np.ones(p_bar.shape[:-1] + (1,))], axis=-1)
        return ray / np.linalg.norm(ray, axis=-1, keepdims=True), valid

    def unproject_jacobian(self, n: float, u: np.ndarray) -> np.ndarray:
        """3x2 derivative of the unit bearing with respect to the pixel."""
        mu = self.unproject(n, u)
        du_dp, _ = self.project_jacobians(n, mu)
        # du/dp_bar is the left 2x2 block of du/dp at unit depth
        A = du_dp[:2, :2] * mu[2]
        dpbar_du = np.linalg.inv(A)
        ray = np.array([mu[0] / mu[2], mu[1] / mu[2], 1.0])
        norm = np.linalg.norm(ray)
        dmu_dray = (np.eye(3) - np.outer(mu, mu)) / norm
        return dmu_dray[:, :2] @ dpbar_du

    def in_image(self, u: np.ndarray, margin: float = 0.0) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return (
            (u[..., 0] >= margin)
            & (u[..., 1] >= margin)
            & (u[..., 0] <= self.width - 1 - margin)
            & (u[..., 1] <= self.height - 1 - margin)
        )

    def pixel_grid(self) -> np.ndarray:
        """Pixel centres as an ``(H, W, 2)`` array of ``(u, v)``."""
        uu, vv = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return np.stack([uu, vv], axis=-1)


def critical_half_angle(n: float) -> float:
    """Largest incidence angle (radians) in the medium that reaches the sensor."""
    return float(np.arcsin(1.0 / n)) if n > 1.0 else 0.5 * np.pi


def rectification_map(camera: RefractiveCamera, n: float, out_camera: RefractiveCamera | None = None):
    """Per-pixel source coordinates that rectify an image taken in a medium.

    For every pixel of ``out_camera`` (an ideal in-air view, ``n = 1``) the
    viewing ray is traced and re-projected through ``camera`` under index
    ``n``. Returns ``(map_u, map_v, valid)`` of shape ``(H_out, W_out)``.
    Rays beyond the port's critical angle, and rays that do not land inside
    the source image, are invalid.
    """
    out_camera = camera if out_camera is None else out_camera
    rays, valid = out_camera.unproject_batch(1.0, out_camera.pixel_grid())
    src, ok = camera.project_batch(n, rays)
    # small slack keeps the border pixels of an identity map valid despite round-off
    valid &= ok & camera.in_image(src, margin=-1e-6)
    return src[..., 0], src[..., 1], valid


def remap_bilinear(image: np.ndarray, map_u, map_v, valid, fill: float = 128.0) -> np.ndarray:
    """Bilinear resampling of ``image`` at ``(map_u, map_v)``; invalid pixels get ``fill``."""
    from .frontend import bilinear

    img = np.asarray(image, dtype=float)
    h, w = img.shape
    out = np.full(map_u.shape, float(fill))
    # valid sources may sit a round-off outside the border; clamp them onto it
    vals, _ = bilinear(img, np.clip(map_u[valid], 0.0, w - 1), np.clip(map_v[valid], 0.0, h - 1))
    out[valid] = vals
    return out
