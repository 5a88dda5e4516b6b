"""Robocentric iterated EKF with the refractive index of the medium as a state.

Error-state layout (``22 + 3J``)::

    0:3   r    robocentric IMU position, body frame
    3:6   q    attitude (global rotation-vector perturbation)
    6:9   v    robocentric velocity, body frame
    9:12  b_f  accelerometer bias
    12:15 b_w  gyroscope bias
    15:18 c    camera position in body frame (pinned)
    18:21 z    camera rotation (pinned)
    21    n    refractive index
    22+3j .. 22+3j+1  bearing tangent of feature j
    22+3j+2           inverse distance of feature j

Landmarks are unit bearings ``mu`` and inverse distances ``rho`` in the
current camera frame, i.e. the camera-frame point is ``mu / rho``.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from . import frontend
from .camera import ModelDomainError, RefractiveCamera
from .dataset import StateRecord
from .rotation import (
    bearing_basis,
    bearing_boxminus,
    bearing_boxplus,
    exp_so3,
    quat_from_matrix,
    quat_from_rotvec,
    quat_multiply,
    quat_conjugate,
    quat_normalize,
    quat_to_matrix,
    quat_to_rotvec,
    right_jacobian_so3,
    skew,
)
from .sensitivity import DegenerateMotion, HeuristicParams, RelativeMotion, essential_matrix, heuristic_weight

log = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])

IR, IQ, IV, IBF, IBW, IC, IZ = (slice(3 * i, 3 * i + 3) for i in range(7))
IN = 21
BASE_DIM = 22
N_MIN, N_MAX = 1.0, 2.0
RHO_MIN, RHO_MAX = 0.02, 20.0


def feature_slice(j: int) -> slice:
    return slice(BASE_DIM + 3 * j, BASE_DIM + 3 * j + 3)


@dataclass
class ImuMeasurement:
    t: float
    accel: np.ndarray
    gyro: np.ndarray


@dataclass
class NoiseConfig:
    """Continuous-time noise densities and the photometric noise.

    ``n_walk`` is the refractive-index random-walk density (1/sqrt(s)).
    """

    accel_noise: float = 0.02
    gyro_noise: float = 0.002
    accel_bias_walk: float = 2e-4
    gyro_bias_walk: float = 2e-5
    n_walk: float = 1e-3
    pixel_intensity: float = 10.0
    position_walk: float = 1e-3
    bearing_walk: float = 1e-3
    inverse_depth_walk: float = 1e-3

    def __post_init__(self):
        for name, val in vars(self).items():
            if not val >= 0.0:
                raise ValueError(f"noise density {name} must be >= 0")


@dataclass
class FilterConfig:
    n0: float = 1.33
    n_std0: float = 0.1
    estimate_n: bool = True
    heuristic: HeuristicParams = field(default_factory=HeuristicParams)
    # "epipolar": |sin 2theta|^q r^k, "none": weight 1, "zero": weight 0
    heuristic_mode: str = "epipolar"
    patch_size: int = frontend.DEFAULT_PATCH_SIZE
    levels: int = frontend.DEFAULT_LEVELS
    max_features: int = 20
    iekf_max_iter: int = 5
    iekf_tol: float = 1e-4
    gating_probability: float = 0.999
    rho0: float = 1.0 / 1.5
    rho_std0: float = 1.0
    bearing_pixel_std0: float = 1.0
    init_duration: float = 0.5
    min_feature_distance: float = 20.0
    min_corner_score: float = 4.0
    patch_refresh_warp: float = 0.25
    max_prealign_shift: float = 8.0
    check_invariants: bool = False

    def __post_init__(self):
        if self.heuristic_mode not in ("epipolar", "none", "zero"):
            raise ValueError(f"unknown heuristic mode {self.heuristic_mode!r}")
        if not N_MIN <= self.n0 <= N_MAX:
            raise ValueError("initial refractive index must be within [1, 2]")
        if self.max_features < 0 or self.levels < 0 or self.patch_size < 2:
            raise ValueError("invalid frontend sizes")


@dataclass
class FilterState:
    r: np.ndarray
    q: np.ndarray
    v: np.ndarray
    bf: np.ndarray
    bw: np.ndarray
    c: np.ndarray
    z: np.ndarray
    n: float
    mus: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rhos: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def num_features(self) -> int:
        return self.mus.shape[0]

    @property
    def dim(self) -> int:
        return BASE_DIM + 3 * self.num_features

    @property
    def R_WB(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def R_CB(self) -> np.ndarray:
        return quat_to_matrix(self.z)

    @property
    def position(self) -> np.ndarray:
        """IMU position in the world frame."""
        return self.R_WB @ self.r

    def copy(self) -> "FilterState":
        return FilterState(
            self.r.copy(), self.q.copy(), self.v.copy(), self.bf.copy(), self.bw.copy(),
            self.c.copy(), self.z.copy(), float(self.n), self.mus.copy(), self.rhos.copy(),
        )


def boxplus(state: FilterState, delta: np.ndarray) -> FilterState:
    """Apply an error-state increment on the state manifold."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (state.dim,):
        raise ValueError(f"delta has shape {delta.shape}, expected ({state.dim},)")
    out = state.copy()
    out.r = state.r + delta[IR]
    out.q = quat_normalize(quat_multiply(quat_from_rotvec(delta[IQ]), state.q))
    out.v = state.v + delta[IV]
    out.bf = state.bf + delta[IBF]
    out.bw = state.bw + delta[IBW]
    out.c = state.c + delta[IC]
    out.z = quat_normalize(quat_multiply(quat_from_rotvec(delta[IZ]), state.z))
    out.n = float(state.n + delta[IN])
    for j in range(state.num_features):
        d = delta[feature_slice(j)]
        out.mus[j] = bearing_boxplus(state.mus[j], d[:2])
        out.rhos[j] = state.rhos[j] + d[2]
    return out


def boxminus(s1: FilterState, s2: FilterState) -> np.ndarray:
    """Error-state difference ``s1 - s2`` expressed at ``s2``."""
    if s1.num_features != s2.num_features:
        raise ValueError("states have different feature counts")
    d = np.zeros(s2.dim)
    d[IR] = s1.r - s2.r
    d[IQ] = quat_to_rotvec(quat_multiply(s1.q, quat_conjugate(s2.q)))
    d[IV] = s1.v - s2.v
    d[IBF] = s1.bf - s2.bf
    d[IBW] = s1.bw - s2.bw
    d[IC] = s1.c - s2.c
    d[IZ] = quat_to_rotvec(quat_multiply(s1.z, quat_conjugate(s2.z)))
    d[IN] = s1.n - s2.n
    for j in range(s2.num_features):
        sl = feature_slice(j)
        d[sl.start : sl.start + 2] = bearing_boxminus(s1.mus[j], s2.mus[j])
        d[sl.start + 2] = s1.rhos[j] - s2.rhos[j]
    return d


def _bearing_bases(mus: np.ndarray) -> np.ndarray:
    x, y, z = mus[:, 0], mus[:, 1], mus[:, 2]
    a = 1.0 / (1.0 + z)
    N = np.empty((mus.shape[0], 3, 2))
    N[:, 0, 0] = 1.0 - a * x * x
    N[:, 0, 1] = N[:, 1, 0] = -a * x * y
    N[:, 1, 1] = 1.0 - a * y * y
    N[:, 2, 0] = -x
    N[:, 2, 1] = -y
    return N


def _skew_batch(v: np.ndarray) -> np.ndarray:
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def _propagate(state: FilterState, cov: np.ndarray, accel, gyro, dt: float, noise: NoiseConfig, gravity=GRAVITY):
    """Discrete IMU step; returns ``(state, cov, dR, dp)``.

    ``dR`` and ``dp`` are the body rotation and body-origin displacement over
    the step, both in the old body frame.
    """
    w_hat = np.asarray(gyro, dtype=float) - state.bw
    f_hat = np.asarray(accel, dtype=float) - state.bf
    R = quat_to_matrix(state.q)
    g_B = R.T @ gravity
    a = f_hat + g_B
    phi = w_hat * dt
    dR = exp_so3(phi)
    dRt = dR.T
    Jr = right_jacobian_so3(phi)
    dp = state.v * dt + 0.5 * a * dt * dt

    new = state.copy()
    new.r = dRt @ (state.r + dp)
    new.v = dRt @ (state.v + a * dt)
    new.q = quat_normalize(quat_multiply(state.q, quat_from_rotvec(phi)))
    R_new = R @ dR

    R_CB = state.R_CB
    R_BC = R_CB.T
    c = state.c
    R_rel = R_CB @ dRt @ R_BC
    t_rel = R_CB @ (dRt @ (c - dp) - c)

    dim = state.dim
    F = np.eye(dim)
    dg_dq = R.T @ skew(gravity)
    F[IR, IR] = dRt
    F[IR, IV] = dRt * dt
    F[IR, IQ] = dRt @ dg_dq * (0.5 * dt * dt)
    F[IR, IBF] = -dRt * (0.5 * dt * dt)
    F[IR, IBW] = -skew(new.r) @ Jr * dt
    F[IQ, IBW] = -R_new @ Jr * dt
    F[IV, IV] = dRt
    F[IV, IQ] = dRt @ dg_dq * dt
    F[IV, IBF] = -dRt * dt
    F[IV, IBW] = -skew(new.v) @ Jr * dt

    J = state.num_features
    if J:
        mus, rhos = state.mus, state.rhos
        w = mus @ R_rel.T + rhos[:, None] * t_rel
        nw = np.linalg.norm(w, axis=1)
        mu_new = w / nw[:, None]
        rho_new = rhos / nw
        N_old = _bearing_bases(mus)
        N_new = _bearing_bases(mu_new)
        proj = (np.eye(3)[None] - mu_new[:, :, None] * mu_new[:, None, :]) / nw[:, None, None]
        A_mu = np.einsum("jia,jik->jak", N_new, proj)  # d(tangent')/dw, (J, 2, 3)
        A_rho = -(rhos / nw**2)[:, None] * mu_new  # d(rho')/dw, (J, 3)
        dw_dmu = np.einsum("ik,jkl->jil", R_rel, N_old)  # (J, 3, 2)
        dw_ddp = -rhos[:, None, None] * (R_CB @ dRt)[None]  # (J, 3, 3)
        dw_dv = dw_ddp * dt
        dw_dq = dw_ddp @ (dg_dq * (0.5 * dt * dt))
        dw_dbf = -dw_ddp * (0.5 * dt * dt)
        lever = (mus @ R_BC.T + rhos[:, None] * (c - dp)) @ dRt  # rows: dRt @ (...)
        dw_dbw = -np.einsum("ik,jkl->jil", R_CB, _skew_batch(lever)) @ (Jr * dt)
        for j in range(J):
            sl = feature_slice(j)
            i0 = sl.start
            rows_mu = slice(i0, i0 + 2)
            F[rows_mu, i0 : i0 + 2] = A_mu[j] @ dw_dmu[j]
            F[rows_mu, i0 + 2] = A_mu[j] @ t_rel
            F[i0 + 2, i0 : i0 + 2] = A_rho[j] @ dw_dmu[j]
            F[i0 + 2, i0 + 2] = 1.0 / nw[j] + A_rho[j] @ t_rel
            for idx, dw in ((IV, dw_dv[j]), (IQ, dw_dq[j]), (IBF, dw_dbf[j]), (IBW, dw_dbw[j])):
                F[rows_mu, idx] = A_mu[j] @ dw
                F[i0 + 2, idx] = A_rho[j] @ dw
        new.mus = mu_new
        new.rhos = rho_new

    # IMU white noise enters exactly like the biases
    G_a = F[:, IBF].copy()
    G_a[IBF] = 0.0
    G_w = F[:, IBW].copy()
    G_w[IBW] = 0.0
    Q = (noise.accel_noise**2 / dt) * (G_a @ G_a.T) + (noise.gyro_noise**2 / dt) * (G_w @ G_w.T)
    Q[IR, IR] += noise.position_walk**2 * dt * np.eye(3)
    Q[IBF, IBF] += noise.accel_bias_walk**2 * dt * np.eye(3)
    Q[IBW, IBW] += noise.gyro_bias_walk**2 * dt * np.eye(3)
    for j in range(J):
        i0 = feature_slice(j).start
        Q[i0, i0] += noise.bearing_walk**2 * dt
        Q[i0 + 1, i0 + 1] += noise.bearing_walk**2 * dt
        Q[i0 + 2, i0 + 2] += noise.inverse_depth_walk**2 * dt

    Q[IN, IN] += noise.n_walk**2 * dt
    new_cov = F @ cov @ F.T + Q
    new_cov = 0.5 * (new_cov + new_cov.T)
    return new, new_cov, dR, dp


def propagate(state: FilterState, cov: np.ndarray, imu: ImuMeasurement, dt: float, noise: NoiseConfig | None = None):
    """Propagate state and covariance over ``dt`` with one IMU sample.

    Returns the new ``(state, cov)``.
    """
    if not (0.0 < dt < 0.1):
        raise ValueError(f"propagation step {dt} outside (0, 0.1) s")
    if not (np.all(np.isfinite(imu.accel)) and np.all(np.isfinite(imu.gyro))):
        raise ValueError("non-finite IMU measurement")
    noise = NoiseConfig() if noise is None else noise
    new, new_cov, _, _ = _propagate(state, cov, imu.accel, imu.gyro, dt, noise)
    return new, new_cov


def check_invariants(state: FilterState, cov: np.ndarray, tol: float = 1e-9) -> None:
    """Raise AssertionError if unit norms, symmetry or PSD-ness are violated."""
    assert abs(np.linalg.norm(state.q) - 1.0) < tol, "attitude quaternion not unit"
    assert abs(np.linalg.norm(state.z) - 1.0) < tol, "extrinsic quaternion not unit"
    if state.num_features:
        assert np.all(np.abs(np.linalg.norm(state.mus, axis=1) - 1.0) < tol), "bearing not unit"
        assert np.all(state.rhos > 0.0), "non-positive inverse distance"
    assert N_MIN <= state.n <= N_MAX, "refractive index out of range"
    assert cov.shape == (state.dim, state.dim), "covariance dimension mismatch"
    assert np.max(np.abs(cov - cov.T)) <= tol, "covariance not symmetric"
    assert np.linalg.eigvalsh(cov).min() >= -tol, "covariance not PSD"


# ---------------------------------------------------------------------------
# measurement model


@dataclass
class Track:
    """Frontend bookkeeping of one landmark, parallel to the state's feature arrays."""

    id: int
    patch: frontend.MultiLevelPatch
    warp: np.ndarray
    pixel: np.ndarray  # last posterior pixel
    mu_prev: np.ndarray
    rho_prev: float
    history: deque = field(default_factory=lambda: deque(maxlen=10))
    weight: float = 1.0
    age: int = 0

    def record(self, ok: bool) -> None:
        self.history.append(bool(ok))

    @property
    def score(self) -> float:
        return float(np.mean(self.history)) if self.history else 1.0


@dataclass
class Innovation:
    y: np.ndarray
    H: np.ndarray
    rank: int
    pixel: np.ndarray


def innovation(state: FilterState, j: int, track: Track, pyr: frontend.ImagePyramid, camera: RefractiveCamera, weight: float = 1.0) -> Innovation:
    """Reduced photometric innovation of feature ``j`` at ``state`` and its Jacobian.

    ``y = Q1^T e(pi(n, mu))``; the Jacobian rows are ``R1 dpi/dmu N(mu)`` on
    the bearing columns and ``weight * R1 dpi/dn`` on the index column.

    Raises ModelDomainError or a FrontendError when the feature cannot be
    evaluated at this iterate.
    """
    mu = state.mus[j]
    if mu[2] <= 0.0:
        raise ModelDomainError("feature behind the camera")
    u = camera.project(state.n, mu)
    Jpix, e = frontend.stack_and_linearize(track.patch, pyr, u, track.warp)
    red = frontend.qr_reduce(Jpix, e)
    du_dmu, du_dn = camera.project_jacobians(state.n, mu)
    H = np.zeros((red.rank, state.dim))
    i0 = feature_slice(j).start
    H[:, i0 : i0 + 2] = red.R1 @ du_dmu @ bearing_basis(mu)
    H[:, IN] = weight * (red.R1 @ du_dn)
    return Innovation(y=red.e_reduced, H=H, rank=red.rank, pixel=u)


@dataclass
class UpdateInfo:
    used: list = field(default_factory=list)
    outliers: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    iterations: int = 0


def iterated_update(
    state: FilterState,
    cov: np.ndarray,
    pyr: frontend.ImagePyramid,
    camera: RefractiveCamera,
    tracks: list,
    weights: np.ndarray,
    candidates: list,
    sigma_intensity: float,
    max_iter: int = 5,
    tol: float = 1e-4,
    gating_probability: float = 0.999,
):
    """Iterated EKF update with the stacked photometric innovations.

    ``candidates`` lists the feature indices to use. Returns the posterior
    ``(state, cov, info)``; with no usable feature the inputs are returned
    unchanged.
    """
    info = UpdateInfo()
    active = list(candidates)
    if not active:
        return state, cov, info
    prior = state
    current = state
    var = sigma_intensity**2
    K = H = None
    for it in range(max_iter):
        rows, ys = [], []
        kept = []
        for j in active:
            try:
                inn = innovation(current, j, tracks[j], pyr, camera, weights[j])
            except (ModelDomainError, frontend.FrontendError):
                info.dropped.append(j)
                continue
            if it == 0:
                S = inn.H @ cov @ inn.H.T + var * np.eye(inn.rank)
                d2 = float(inn.y @ np.linalg.solve(S, inn.y))
                if d2 > chi2.ppf(gating_probability, inn.rank):
                    info.outliers.append(j)
                    continue
            rows.append(inn.H)
            ys.append(inn.y)
            kept.append(j)
        active = kept
        if not active:
            return state, cov, info
        H = np.vstack(rows)
        y = np.concatenate(ys)
        PHt = cov @ H.T
        S = H @ PHt + var * np.eye(H.shape[0])
        K = np.linalg.solve(S, PHt.T).T
        dx_prev = boxminus(current, prior)
        dx = K @ (-y + H @ dx_prev)
        current = _clamp(boxplus(prior, dx))
        info.iterations = it + 1
        if np.linalg.norm(dx - dx_prev) < tol:
            break
    info.used = active
    I_KH = np.eye(cov.shape[0]) - K @ H
    new_cov = I_KH @ cov @ I_KH.T + var * (K @ K.T)
    new_cov = 0.5 * (new_cov + new_cov.T)
    return current, new_cov, info


def _clamp(state: FilterState) -> FilterState:
    state.n = float(np.clip(state.n, N_MIN, N_MAX))
    if state.num_features:
        state.rhos = np.clip(state.rhos, RHO_MIN, RHO_MAX)
    return state


# ---------------------------------------------------------------------------
# estimator


def gravity_aligned_attitude(mean_accel: np.ndarray) -> np.ndarray:
    """Quaternion (B->W) whose body 'up' matches the mean specific force."""
    up_b = np.asarray(mean_accel, dtype=float)
    up_b = up_b / np.linalg.norm(up_b)
    ez = np.array([0.0, 0.0, 1.0])
    axis = np.cross(up_b, ez)
    s = np.linalg.norm(axis)
    c = float(up_b @ ez)
    if s < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0]) if c > 0 else np.array([0.0, 1.0, 0.0, 0.0])
    return quat_from_rotvec(np.arctan2(s, c) * axis / s)


class RefractiveVIO:
    """Stateful estimator: feed IMU samples and images in timestamp order.

    Parameters
    ----------
    camera : RefractiveCamera
        In-air calibration of the camera.
    T_BC : (4, 4) array
        Camera-to-body transform, ``p_B = T_BC p_C``.
    config : FilterConfig
    noise : NoiseConfig
    """

    def __init__(self, camera: RefractiveCamera, T_BC: np.ndarray, config: FilterConfig | None = None, noise: NoiseConfig | None = None):
        self.camera = camera
        self.config = FilterConfig() if config is None else config
        self.noise = NoiseConfig() if noise is None else noise
        if not self.config.estimate_n:
            self.noise = replace(self.noise, n_walk=0.0)
        T_BC = np.asarray(T_BC, dtype=float)
        self._R_BC = T_BC[:3, :3]
        self._c = T_BC[:3, 3].copy()
        self.state: FilterState | None = None
        self.cov: np.ndarray | None = None
        self.tracks: list[Track] = []
        self.t: float | None = None
        self._init_accel: list = []
        self._init_t0: float | None = None
        self._next_id = 0
        self._motion_R = np.eye(3)
        self._motion_t = np.zeros(3)
        self.last_info = UpdateInfo()

    @property
    def initialized(self) -> bool:
        return self.state is not None

    # -- initialization -----------------------------------------------------

    def add_imu_for_init(self, t: float, accel: np.ndarray) -> bool:
        """Collect accelerometer samples; initializes once enough time passed."""
        if self._init_t0 is None:
            self._init_t0 = t
        self._init_accel.append(np.asarray(accel, dtype=float))
        if t - self._init_t0 >= self.config.init_duration:
            self.initialize(t, np.mean(self._init_accel, axis=0))
            return True
        return False

    def initialize(self, t: float, mean_accel: np.ndarray) -> None:
        cfg = self.config
        self.state = FilterState(
            r=np.zeros(3),
            q=gravity_aligned_attitude(mean_accel),
            v=np.zeros(3),
            bf=np.zeros(3),
            bw=np.zeros(3),
            c=self._c.copy(),
            z=quat_from_matrix(self._R_BC.T),
            n=float(cfg.n0),
        )
        P = np.zeros((BASE_DIM, BASE_DIM))
        P[IR, IR] = 1e-6 * np.eye(3)
        P[IQ, IQ] = np.diag([1e-4, 1e-4, 1e-8])
        P[IV, IV] = 1e-4 * np.eye(3)
        P[IBF, IBF] = 0.05**2 * np.eye(3)
        P[IBW, IBW] = 0.01**2 * np.eye(3)
        P[IN, IN] = cfg.n_std0**2 if cfg.estimate_n else 0.0
        self.cov = P
        self.t = t

    # -- propagation --------------------------------------------------------

    def propagate_to(self, t: float, accel: np.ndarray, gyro: np.ndarray) -> None:
        dt = t - self.t
        if dt <= 0.0:
            return
        if dt >= 0.1:
            raise ValueError(f"IMU gap of {dt:.3f} s")
        self.state, self.cov, dR, dp = _propagate(self.state, self.cov, accel, gyro, dt, self.noise)
        # body motion since the last frame: p_B(now) = M_R p_B(frame) + M_t
        self._motion_R = dR.T @ self._motion_R
        self._motion_t = dR.T @ (self._motion_t - dp)
        self.t = t
        if self.config.check_invariants:
            check_invariants(self.state, self.cov)

    def camera_motion(self) -> RelativeMotion:
        """Camera motion since the previous frame from the accumulated IMU motion."""
        R_CB = self.state.R_CB
        R_BC = R_CB.T
        c = self.state.c
        R = R_CB @ self._motion_R @ R_BC
        t = R_CB @ (self._motion_R @ c + self._motion_t - c)
        return RelativeMotion(R=R, t=t)

    # -- frame processing ---------------------------------------------------

    def process_frame(self, t: float, image: np.ndarray) -> StateRecord:
        cfg = self.config
        pyr = frontend.build_pyramid(image, cfg.levels)
        motion = self.camera_motion()
        cam = self.camera
        self._predict_tracks(pyr, motion)
        candidates = self._prealign_tracks(pyr)
        weights = self._heuristic_weights(motion)
        new_state, new_cov, info = iterated_update(
            self.state,
            self.cov,
            pyr,
            cam,
            self.tracks,
            weights,
            candidates,
            self.noise.pixel_intensity,
            max_iter=cfg.iekf_max_iter,
            tol=cfg.iekf_tol,
            gating_probability=cfg.gating_probability,
        )
        self.state, self.cov = new_state, new_cov
        self.last_info = info
        used = set(info.used)
        for j, tr in enumerate(self.tracks):
            tr.record(j in used)
        self.manage_features(pyr)
        self._motion_R = np.eye(3)
        self._motion_t = np.zeros(3)
        if cfg.check_invariants:
            check_invariants(self.state, self.cov)
        return self.record(t)

    def _predict_tracks(self, pyr, motion: RelativeMotion) -> None:
        """Propagate patch warps to the predicted feature locations; prune invisible features."""
        remove = []
        for j, tr in enumerate(self.tracks):
            mu = self.state.mus[j]
            try:
                if mu[2] <= 0.0:
                    raise ModelDomainError("behind camera")
                u = self.camera.project(self.state.n, mu)
                transport = frontend.bearing_transport_jacobian(motion.R, motion.t, tr.mu_prev, tr.rho_prev)
                D = frontend.compute_warp(self.camera, self.state.n, tr.pixel, mu, transport) @ tr.warp
            except (ModelDomainError, np.linalg.LinAlgError):
                remove.append(j)
                continue
            if not np.all(np.isfinite(D)) or abs(np.linalg.det(D)) < 1e-6 or not frontend.patch_in_bounds(pyr, u, tr.patch.size, D):
                remove.append(j)
                continue
            tr.warp = D
        self._remove(remove)

    def _prealign_tracks(self, pyr) -> list:
        candidates = []
        for j, tr in enumerate(self.tracks):
            u_pred = self.camera.project(self.state.n, self.state.mus[j])
            try:
                u_al, a, b = frontend.prealign(tr.patch, pyr, u_pred, tr.warp)
            except frontend.FrontendError:
                continue
            if np.linalg.norm(u_al - u_pred) > self.config.max_prealign_shift or not (0.2 < a < 5.0):
                continue
            tr.patch.a, tr.patch.b = a, b
            candidates.append(j)
        return candidates

    def _heuristic_weights(self, motion: RelativeMotion) -> np.ndarray:
        cfg = self.config
        J = self.state.num_features
        if not cfg.estimate_n or cfg.heuristic_mode == "zero":
            return np.zeros(J)
        if cfg.heuristic_mode == "none":
            return np.ones(J)
        try:
            E = essential_matrix(motion)
        except DegenerateMotion:
            return np.zeros(J)
        if not motion.small_rotation(cfg.heuristic):
            # no better direction estimate is available, so the weights are still used
            log.debug("frame rotation %.2f deg exceeds the small-rotation premise", motion.rotation_angle_deg)
        w = np.zeros(J)
        for j, tr in enumerate(self.tracks):
            try:
                w[j] = heuristic_weight(E, self.state.mus[j], tr.pixel, self.camera.center, cfg.heuristic, self.camera, self.state.n)
            except ModelDomainError:
                w[j] = 0.0
        for tr, wj in zip(self.tracks, w):
            tr.weight = float(wj)
        return w

    # -- feature management -------------------------------------------------

    def _remove(self, indices) -> None:
        if not indices:
            return
        keep = [j for j in range(len(self.tracks)) if j not in set(indices)]
        idx = list(range(BASE_DIM))
        for j in keep:
            idx.extend(range(feature_slice(j).start, feature_slice(j).stop))
        self.cov = self.cov[np.ix_(idx, idx)]
        self.state.mus = self.state.mus[keep]
        self.state.rhos = self.state.rhos[keep]
        self.tracks = [self.tracks[j] for j in keep]

    def manage_features(self, pyr) -> None:
        """Prune lost or unreliable features, refresh patches and detect new ones."""
        cfg = self.config
        cam = self.camera
        n = self.state.n
        margin = cfg.patch_size * 2**cfg.levels
        remove = []
        for j, tr in enumerate(self.tracks):
            mu = self.state.mus[j]
            tr.age += 1
            try:
                if mu[2] <= 0.0:
                    raise ModelDomainError("behind camera")
                u = cam.project(n, mu)
            except ModelDomainError:
                remove.append(j)
                continue
            if not cam.in_image(u, margin=margin / 2 + 2):
                remove.append(j)
                continue
            recent = list(tr.history)
            if len(recent) >= 3 and not any(recent[-3:]):
                remove.append(j)
                continue
            if len(recent) >= 6 and tr.score < 0.5:
                remove.append(j)
                continue
            tr.pixel = u
            tr.mu_prev = mu.copy()
            tr.rho_prev = float(self.state.rhos[j])
            if recent and recent[-1] and np.linalg.norm(tr.warp - np.eye(2)) > cfg.patch_refresh_warp:
                try:
                    tr.patch = frontend.extract_patch(pyr, u, cfg.patch_size, cfg.levels)
                    tr.warp = np.eye(2)
                except frontend.PatchOutOfBounds:
                    remove.append(j)
        self._remove(remove)
        free = cfg.max_features - len(self.tracks)
        if free > 0:
            self._detect(pyr, free)

    def _detect(self, pyr, free: int) -> None:
        cfg = self.config
        cam = self.camera
        margin = cfg.patch_size * 2**cfg.levels
        existing = [tr.pixel for tr in self.tracks]
        pts = frontend.detect_features(
            pyr.levels[0],
            existing,
            max_new=free,
            min_distance=cfg.min_feature_distance,
            margin=int(margin / 2 + 4),
            min_score=cfg.min_corner_score,
        )
        n = self.state.n
        for u in pts:
            try:
                patch = frontend.extract_patch(pyr, u, cfg.patch_size, cfg.levels)
                mu = cam.unproject(n, u)
                dmu_du = cam.unproject_jacobian(n, u)
                frontend.qr_reduce(*frontend.stack_and_linearize(patch, pyr, u, np.eye(2)))
            except (ModelDomainError, frontend.FrontendError):
                continue
            T = bearing_basis(mu).T @ dmu_du
            # the bearing is read off through the current index estimate, so it inherits its error
            du_dmu, du_dn = cam.project_jacobians(n, mu)
            A = None
            if cfg.estimate_n and cfg.heuristic_mode != "zero":
                A = -np.linalg.solve(du_dmu @ bearing_basis(mu), du_dn)
            self._append_feature(mu, cfg.rho0, cfg.bearing_pixel_std0**2 * T @ T.T, cfg.rho_std0**2, A)
            self.tracks.append(
                Track(id=self._next_id, patch=patch, warp=np.eye(2), pixel=np.asarray(u, dtype=float), mu_prev=mu.copy(), rho_prev=cfg.rho0)
            )
            self._next_id += 1

    def _append_feature(self, mu, rho, P_mu, var_rho, dtangent_dn=None) -> None:
        """Augment state and covariance with one landmark.

        ``dtangent_dn`` is the sensitivity of the new bearing tangent to the
        index estimate it was computed with.
        """
        s = self.state
        s.mus = np.vstack([s.mus, mu[None]])
        s.rhos = np.append(s.rhos, rho)
        d = self.cov.shape[0]
        P = np.zeros((d + 3, d + 3))
        P[:d, :d] = self.cov
        P[d : d + 2, d : d + 2] = P_mu
        P[d + 2, d + 2] = var_rho
        if dtangent_dn is not None:
            A = np.asarray(dtangent_dn, dtype=float)
            cross = np.outer(A, self.cov[IN, :d])
            P[d : d + 2, :d] = cross
            P[:d, d : d + 2] = cross.T
            P[d : d + 2, d : d + 2] += self.cov[IN, IN] * np.outer(A, A)
        self.cov = P

    # -- output -------------------------------------------------------------

    def record(self, t: float) -> StateRecord:
        s = self.state
        return StateRecord(
            t_ns=int(round(t * 1e9)),
            position=s.position,
            quaternion=s.q.copy(),
            n=float(s.n),
            n_std=float(np.sqrt(max(self.cov[IN, IN], 0.0))),
            num_features=s.num_features,
        )
