"""Synthetic pool: analytic trajectories, IMU synthesis and refraction-aware
ray-cast rendering of textured walls.

The rendered camera uses exactly :class:`~refractive_vio.camera.RefractiveCamera`,
so any disagreement between estimator and ground truth comes from the filter,
not from a model mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import EquidistantParams, Intrinsics, RefractiveCamera
from .filter import GRAVITY
from .rotation import quat_from_matrix, rotation_about

PATTERNS = ("rectangle", "figure8", "lengthwise")
MID_GRAY = 128


# ---------------------------------------------------------------------------
# trajectories


def _smoothstep_integral(tau):
    # integral of 6t^5 - 15t^4 + 10t^3 from 0 to tau
    return tau**6 - 3.0 * tau**5 + 2.5 * tau**4


def _smoothstep(tau):
    return tau**3 * (10.0 - 15.0 * tau + 6.0 * tau**2)


def _smoothstep_derivative(tau):
    return 30.0 * tau**2 * (1.0 - tau) ** 2


@dataclass
class SimTrajectory:
    """Closed horizontal path driven with a smooth start from rest.

    The body x axis follows the path tangent (camera looks in the direction
    of motion), z is up, with small roll/pitch wobbles for excitation.
    """

    pattern: str = "rectangle"
    period: float = 60.0
    laps: float = 3.0
    center: tuple = (5.0, 3.0)
    half_extent: tuple | None = None
    depth: float = 0.75
    heave: float = 0.1
    roll_amp: float = 0.04
    pitch_amp: float = 0.03
    static_time: float = 1.0
    ramp_time: float = 4.0
    sharpness: float = 2.5

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if self.half_extent is None:
            self.half_extent = {"rectangle": (3.5, 2.0), "figure8": (3.5, 2.2), "lengthwise": (4.0, 0.6)}[self.pattern]

    @property
    def duration(self) -> float:
        return self.static_time + 0.5 * self.ramp_time + self.laps * self.period

    # phase and its first two time derivatives
    def phase(self, t):
        t = np.asarray(t, dtype=float)
        omega = 2.0 * np.pi / self.period
        tau = np.clip((t - self.static_time) / self.ramp_time, 0.0, 1.0)
        ramp = self.ramp_time * _smoothstep_integral(tau)
        after = np.maximum(t - self.static_time - self.ramp_time, 0.0)
        phi = omega * (ramp + after)
        dphi = omega * np.where(tau < 1.0, _smoothstep(tau), 1.0)
        ddphi = omega * np.where((tau > 0.0) & (tau < 1.0), _smoothstep_derivative(tau) / self.ramp_time, 0.0)
        return phi, dphi, ddphi

    def _curve(self, phi):
        """Planar path and its first two phase derivatives, each ``(..., 2)``."""
        a, b = self.half_extent
        s, c = np.sin(phi), np.cos(phi)
        if self.pattern == "figure8":
            p = np.stack([a * s, b * s * c], -1)
            d1 = np.stack([a * c, b * (c * c - s * s)], -1)
            d2 = np.stack([-a * s, -4.0 * b * s * c], -1)
            return p, d1, d2
        k = self.sharpness
        norm = np.tanh(k)
        g = np.tanh(k * c)
        h = np.tanh(k * s)
        g1 = -k * s * (1.0 - g * g)
        h1 = k * c * (1.0 - h * h)
        g2 = -k * c * (1.0 - g * g) + 2.0 * k * s * g * g1
        h2 = -k * s * (1.0 - h * h) - 2.0 * k * c * h * h1
        p = np.stack([a * g, b * h], -1) / norm
        return p, np.stack([a * g1, b * h1], -1) / norm, np.stack([a * g2, b * h2], -1) / norm

    def state(self, t):
        """Position, velocity, acceleration (world) and R_WB, body angular rate at time(s) t."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        phi, dphi, ddphi = self.phase(t)
        p2, d1, d2 = self._curve(phi)
        cx, cy = self.center
        pos = np.stack([cx + p2[:, 0], cy + p2[:, 1], self.depth + self.heave * np.sin(2.0 * phi)], -1)
        vel_xy = d1 * dphi[:, None]
        acc_xy = d2 * (dphi**2)[:, None] + d1 * ddphi[:, None]
        vz = self.heave * 2.0 * np.cos(2.0 * phi) * dphi
        az = -self.heave * 4.0 * np.sin(2.0 * phi) * dphi**2 + self.heave * 2.0 * np.cos(2.0 * phi) * ddphi
        vel = np.column_stack([vel_xy, vz])
        acc = np.column_stack([acc_xy, az])

        yaw = np.arctan2(d1[:, 1], d1[:, 0])
        dyaw = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / np.sum(d1 * d1, axis=1) * dphi
        roll = self.roll_amp * np.sin(3.0 * phi)
        droll = self.roll_amp * 3.0 * np.cos(3.0 * phi) * dphi
        pitch = self.pitch_amp * np.sin(2.0 * phi + 0.5)
        dpitch = self.pitch_amp * 2.0 * np.cos(2.0 * phi + 0.5) * dphi

        R = np.array([rotation_about("z", y) @ rotation_about("y", pt) @ rotation_about("x", r) for y, pt, r in zip(yaw, pitch, roll)])
        # body rates of a z-y-x Euler sequence
        omega = np.stack(
            [
                droll - dyaw * np.sin(pitch),
                dpitch * np.cos(roll) + dyaw * np.cos(pitch) * np.sin(roll),
                -dpitch * np.sin(roll) + dyaw * np.cos(pitch) * np.cos(roll),
            ],
            -1,
        )
        return pos, vel, acc, R, omega

    def pose(self, t):
        pos, _, _, R, _ = self.state(t)
        return pos[0], R[0]


# ---------------------------------------------------------------------------
# scene


@dataclass
class Wall:
    """Textured rectangle ``origin + s1 * e1 + s2 * e2`` with ``0 <= s_i <= extent_i``."""

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    extent: tuple
    seed: int = 0
    base_frequency: float = 1.5
    octaves: int = 4
    amplitude: float = 1.0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._angles = rng.uniform(0.0, np.pi, size=(self.octaves, 2))
        self._phases = rng.uniform(0.0, 2.0 * np.pi, size=(self.octaves, 2))
        self._amps = self.amplitude * 0.75 ** np.arange(self.octaves)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.e1, self.e2)

    def texture(self, s1, s2, footprint=None) -> np.ndarray:
        """Band-limited texture in ``[-1, 1]``.

        ``footprint`` (metres per pixel) attenuates octaves that the sampling
        grid cannot resolve.
        """
        total = np.zeros_like(s1, dtype=float)
        norm = max(float(np.sum(np.abs(self._amps))), 1e-12)
        for k in range(self.octaves):
            f = self.base_frequency * 2.0**k
            amp = self._amps[k]
            if amp == 0.0:
                continue
            if footprint is not None:
                amp = amp * np.exp(-2.0 * (np.pi * f * footprint) ** 2)
            a1, a2 = self._angles[k]
            ph1, ph2 = self._phases[k]
            w1 = 2.0 * np.pi * f * (np.cos(a1) * s1 + np.sin(a1) * s2) + ph1
            w2 = 2.0 * np.pi * f * (np.cos(a2) * s1 + np.sin(a2) * s2) + ph2
            total = total + amp * np.sin(w1) * np.sin(w2)
        return total / norm


@dataclass
class SimScene:
    walls: list
    ambient: float = 1.0
    base_level: float = 128.0
    contrast: float = 90.0
    intensity_noise: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.ambient <= 1.0:
            raise ValueError("ambient gain must be in (0, 1]")


def pool_scene(size=(10.0, 6.0, 1.5), seed: int = 7, ambient: float = 1.0, intensity_noise: float = 0.0, amplitude: float = 1.0, base_frequency: float = 1.5) -> SimScene:
    """Closed box pool: floor, surface and four side walls, each with its own texture."""
    L, B, D = size
    o = np.zeros(3)
    ex, ey, ez = np.eye(3)
    specs = [
        (o, ex, ey, (L, B)),  # floor, normal +z
        (np.array([0.0, 0.0, D]), ey, ex, (B, L)),  # surface, normal -z
        (o, ez, ex, (D, L)),  # y = 0 wall, normal +y
        (np.array([0.0, B, 0.0]), ex, ez, (L, D)),  # y = B wall, normal -y
        (o, ey, ez, (B, D)),  # x = 0 wall, normal +x
        (np.array([L, 0.0, 0.0]), ez, ey, (D, B)),  # x = L wall, normal -x
    ]
    walls = [
        Wall(origin=org, e1=a, e2=b, extent=ext, seed=seed * 100 + i, amplitude=amplitude, base_frequency=base_frequency)
        for i, (org, a, b, ext) in enumerate(specs)
    ]
    return SimScene(walls=walls, ambient=ambient, intensity_noise=intensity_noise)


def default_camera() -> RefractiveCamera:
    """Wide-angle fisheye at a reduced resolution for fast rendering."""
    return RefractiveCamera(
        Intrinsics(fx=150.0, fy=150.0, cx=159.5, cy=119.5),
        EquidistantParams(k1=-0.01, k2=0.002, k3=0.0, k4=0.0),
        width=320,
        height=240,
    )


def default_extrinsics(inclination_deg: float = 16.0, lever=(0.15, 0.0, 0.05)) -> np.ndarray:
    """Camera-to-body transform of a forward camera tilted down by ``inclination_deg``."""
    a = np.radians(inclination_deg)
    z_c = np.array([np.cos(a), 0.0, -np.sin(a)])
    x_c = np.array([0.0, -1.0, 0.0])
    y_c = np.cross(z_c, x_c)
    T = np.eye(4)
    T[:3, :3] = np.column_stack([x_c, y_c, z_c])
    T[:3, 3] = lever
    return T


class Renderer:
    """Caches the per-pixel bearings of one camera under one refractive index."""

    def __init__(self, scene: SimScene, camera: RefractiveCamera, n: float):
        self.scene = scene
        self.camera = camera
        self.n = n
        bearings, valid = camera.unproject_batch(n, camera.pixel_grid())
        self.bearings = bearings.reshape(-1, 3)
        self.valid = valid.reshape(-1)
        self.pixel_angle = 1.0 / camera.intrinsics.fx

    def cast(self, R_WC: np.ndarray, p_WC: np.ndarray):
        """Nearest wall hit of every pixel ray: ``(range, wall index, s1, s2, cos_incidence)``."""
        d = self.bearings @ R_WC.T
        npx = d.shape[0]
        best = np.full(npx, np.inf)
        wall_idx = np.full(npx, -1)
        s1b = np.zeros(npx)
        s2b = np.zeros(npx)
        cosb = np.ones(npx)
        for i, w in enumerate(self.scene.walls):
            nrm = w.normal
            denom = d @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((w.origin - p_WC) @ nrm) / denom
            hit = (denom < -1e-12) & (t > 0.0) & (t < best)
            if not np.any(hit):
                continue
            q = p_WC + t[hit, None] * d[hit]
            s1 = (q - w.origin) @ w.e1
            s2 = (q - w.origin) @ w.e2
            inside = (s1 >= -1e-9) & (s1 <= w.extent[0] + 1e-9) & (s2 >= -1e-9) & (s2 <= w.extent[1] + 1e-9)
            idx = np.flatnonzero(hit)[inside]
            best[idx] = t[hit][inside]
            wall_idx[idx] = i
            s1b[idx] = s1[inside]
            s2b[idx] = s2[inside]
            cosb[idx] = -denom[idx]
        wall_idx[~self.valid] = -1
        return best, wall_idx, s1b, s2b, cosb

    def render(self, R_WC: np.ndarray, p_WC: np.ndarray, rng: np.random.Generator | None = None, return_range: bool = False):
        sc = self.scene
        rng_t, wall_idx, s1, s2, cos_inc = self.cast(R_WC, p_WC)
        shade = np.full(rng_t.shape, float(MID_GRAY))
        footprint = rng_t * self.pixel_angle / np.maximum(cos_inc, 0.2)
        for i, w in enumerate(sc.walls):
            sel = wall_idx == i
            if np.any(sel):
                tex = w.texture(s1[sel], s2[sel], footprint[sel])
                shade[sel] = sc.ambient * (sc.base_level + sc.contrast * tex)
        hit = wall_idx >= 0
        if sc.intensity_noise > 0.0:
            if rng is None:
                raise ValueError("intensity noise requires an rng")
            shade[hit] += rng.normal(0.0, sc.intensity_noise, size=int(hit.sum()))
        shade[~hit] = MID_GRAY
        img = np.clip(np.rint(shade), 0, 255).astype(np.uint8).reshape(self.camera.height, self.camera.width)
        if return_range:
            r = np.where(hit, rng_t, np.nan).reshape(self.camera.height, self.camera.width)
            return img, r
        return img


def camera_pose(p_WB, R_WB, T_BC):
    R_WC = R_WB @ T_BC[:3, :3]
    p_WC = p_WB + R_WB @ T_BC[:3, 3]
    return R_WC, p_WC


def render_frame(scene: SimScene, camera: RefractiveCamera, n_true: float, pose, T_BC=None, rng=None, return_range=False):
    """Render one 8-bit frame.

    ``pose`` is ``(p_WB, R_WB)`` of the body; with ``T_BC=None`` it is taken
    to be the camera pose directly.
    """
    p, R = pose
    if T_BC is not None:
        R, p = camera_pose(np.asarray(p, float), np.asarray(R, float), T_BC)
    return Renderer(scene, camera, n_true).render(np.asarray(R, float), np.asarray(p, float), rng=rng, return_range=return_range)


# ---------------------------------------------------------------------------
# sensors and datasets


@dataclass
class SimConfig:
    n_true: float = 1.33
    camera: RefractiveCamera = field(default_factory=default_camera)
    T_BC: np.ndarray = field(default_factory=default_extrinsics)
    frame_rate: float = 10.0
    imu_rate: float = 200.0
    seed: int = 0
    accel_bias: tuple = (0.02, -0.015, 0.01)
    gyro_bias: tuple = (0.002, -0.001, 0.0015)
    accel_noise: float = 2e-3
    gyro_noise: float = 2e-4
    light: str = "good"

    def __post_init__(self):
        if self.imu_rate < 5.0 * self.frame_rate:
            raise ValueError("IMU rate must be at least 5x the frame rate")
        if self.light not in ("good", "low"):
            raise ValueError("light must be 'good' or 'low'")


def sample_times(duration: float, rate: float) -> np.ndarray:
    """Integer-nanosecond sample times ``k / rate`` for ``k < duration * rate``."""
    count = int(np.floor(duration * rate + 1e-9))
    return np.array([int(round(k * 1e9 / rate)) for k in range(count)], dtype=np.int64)


def specific_force(traj: SimTrajectory, t):
    """Noise-free specific force and body rate at times ``t``."""
    _, _, acc, R, omega = traj.state(t)
    f = np.einsum("nji,nj->ni", R, acc - GRAVITY)
    return f, omega


def synthesize_imu(traj: SimTrajectory, config: SimConfig, noiseless: bool = False):
    """IMU stream ``(t_ns, accel, gyro)`` with constant biases and white noise."""
    t_ns = sample_times(traj.duration, config.imu_rate)
    f, omega = specific_force(traj, t_ns * 1e-9)
    if noiseless:
        return t_ns, f, omega
    rng = np.random.default_rng([config.seed, 1])
    sq = np.sqrt(config.imu_rate)
    accel = f + np.asarray(config.accel_bias) + rng.normal(0.0, config.accel_noise * sq, size=f.shape)
    gyro = omega + np.asarray(config.gyro_bias) + rng.normal(0.0, config.gyro_noise * sq, size=omega.shape)
    return t_ns, accel, gyro


def scene_for(config: SimConfig, seed: int | None = None) -> SimScene:
    low = config.light == "low"
    return pool_scene(seed=7 if seed is None else seed, ambient=0.25 if low else 1.0, intensity_noise=2.0 if low else 0.0)


def generate_dataset(scene: SimScene, traj: SimTrajectory, config: SimConfig, out_path, progress=None):
    """Render and write a complete dataset directory; returns its path."""
    from .dataset import write_dataset

    out = Path(out_path)
    t_imu, accel, gyro = synthesize_imu(traj, config)
    t_cam = sample_times(traj.duration, config.frame_rate)
    pos, _, _, R, _ = traj.state(t_cam * 1e-9)
    quats = np.array([quat_from_matrix(r) for r in R])
    renderer = Renderer(scene, config.camera, config.n_true)
    rng = np.random.default_rng([config.seed, 2])

    def frames():
        for i, t in enumerate(t_cam):
            R_WC, p_WC = camera_pose(pos[i], R[i], config.T_BC)
            if progress is not None:
                progress(i, len(t_cam))
            yield int(t), renderer.render(R_WC, p_WC, rng=rng)

    noise = {
        "accel_noise_density": config.accel_noise,
        "gyro_noise_density": config.gyro_noise,
        "accel_bias_walk": 2e-4,
        "gyro_bias_walk": 2e-5,
    }
    write_dataset(
        out,
        config.camera,
        config.T_BC,
        t_imu,
        accel,
        gyro,
        frames(),
        groundtruth=(t_cam, pos, quats),
        noise=noise,
    )
    return out
