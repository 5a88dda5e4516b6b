"""On-disk dataset format, state logs and absolute position error.

Layout of a dataset directory::

    config.txt        key=value calibration (in air) and IMU noise
    imu.csv           t_ns,ax,ay,az,gx,gy,gz
    cam0/<t_ns>.pgm   8-bit binary PGM frames
    groundtruth.csv   t_ns,px,py,pz,qw,qx,qy,qz   (optional)

All parsers reject malformed input with an error naming the file and line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .camera import EquidistantParams, Intrinsics, RefractiveCamera

IMU_HEADER = "t_ns,ax,ay,az,gx,gy,gz"
GT_HEADER = "t_ns,px,py,pz,qw,qx,qy,qz"
STATE_HEADER = "t_ns,px,py,pz,qw,qx,qy,qz,n,n_std,num_features"
_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "k1", "k2", "k3", "k4", "width", "height", "T_BC")


class DatasetError(Exception):
    """Base class of all dataset reading errors."""

    def __init__(self, path, message, line: int | None = None):
        self.path = Path(path)
        self.line = line
        where = f"{self.path}" if line is None else f"{self.path}:{line}"
        super().__init__(f"{where}: {message}")


class MissingFileError(DatasetError):
    pass


class ParseError(DatasetError):
    pass


class TimestampOrderError(DatasetError):
    pass


class ValidationError(DatasetError):
    pass


@dataclass
class StateRecord:
    """Estimator output at one frame."""

    t_ns: int
    position: np.ndarray
    quaternion: np.ndarray
    n: float
    n_std: float
    num_features: int


def _fmt(x) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-D uint8 image")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(path, "file not found") from None
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(path, "truncated PGM header", line=1)
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ParseError(path, f"expected binary PGM magic P5, got {tokens[0]!r}", line=1)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError(path, "non-integer PGM header field", line=1) from None
    if maxval != 255:
        raise ParseError(path, f"only 8-bit PGM supported (maxval {maxval})", line=1)
    pixels = data[pos:]
    if len(pixels) != w * h:
        raise ParseError(path, f"expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# CSV helpers


def _read_csv(path: Path, header: str) -> np.ndarray:
    """Rows of a fixed-header numeric CSV as a float array; t_ns kept exact separately."""
    if not path.is_file():
        raise MissingFileError(path, "file not found")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != header:
        raise ParseError(path, f"expected header '{header}'", line=1)
    ncol = header.count(",") + 1
    times = []
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != ncol:
            raise ParseError(path, f"expected {ncol} columns, found {len(parts)}", line=i)
        try:
            t = int(parts[0])
            vals = [float(p) for p in parts[1:]]
        except ValueError:
            raise ParseError(path, f"malformed number in '{line}'", line=i) from None
        if not all(np.isfinite(vals)):
            raise ParseError(path, "non-finite value", line=i)
        if times and t <= times[-1]:
            raise TimestampOrderError(path, f"timestamp {t} not after {times[-1]}", line=i)
        times.append(t)
        rows.append(vals)
    return np.array(times, dtype=np.int64), np.array(rows, dtype=float).reshape(-1, ncol - 1)


def _write_csv(path: Path, header: str, t_ns, columns: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write(header + "\n")
        for t, row in zip(t_ns, columns):
            f.write(str(int(t)) + "," + ",".join(_fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# config


def parse_config(path: Path) -> dict:
    if not path.is_file():
        raise MissingFileError(path, "file not found")
    out = {}
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ParseError(path, f"expected key=value, got '{s}'", line=i)
        key, value = (p.strip() for p in s.split("=", 1))
        try:
            if key == "T_BC":
                vals = [float(v) for v in value.replace(",", " ").split()]
                if len(vals) != 16:
                    raise ParseError(path, f"T_BC needs 16 values, found {len(vals)}", line=i)
                out[key] = np.array(vals).reshape(4, 4)
            elif key in ("width", "height"):
                out[key] = int(value)
            else:
                out[key] = float(value)
        except ValueError:
            raise ParseError(path, f"malformed value for '{key}'", line=i) from None
    missing = [k for k in _CAMERA_KEYS if k not in out]
    if missing:
        raise ParseError(path, f"missing keys: {', '.join(missing)}")
    return out


def camera_from_config(cfg: dict) -> RefractiveCamera:
    return RefractiveCamera(
        Intrinsics(cfg["fx"], cfg["fy"], cfg["cx"], cfg["cy"]),
        EquidistantParams(cfg["k1"], cfg["k2"], cfg["k3"], cfg["k4"]),
        width=cfg["width"],
        height=cfg["height"],
    )


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    """Validated handle on a dataset directory; images are loaded on demand."""

    root: Path
    camera: RefractiveCamera
    T_BC: np.ndarray
    noise: dict
    imu_t_ns: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    frame_t_ns: np.ndarray
    groundtruth: tuple | None = None
    frame_paths: list = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.frame_t_ns)

    def image(self, i: int) -> np.ndarray:
        img = read_pgm(self.frame_paths[i])
        if img.shape != (self.camera.height, self.camera.width):
            raise ValidationError(self.frame_paths[i], f"image size {img.shape[::-1]} differs from calibration")
        return img

    def frames(self):
        for i, t in enumerate(self.frame_t_ns):
            yield int(t), self.image(i)

    def groundtruth_records(self) -> list[StateRecord]:
        if self.groundtruth is None:
            return []
        t, pos, quat = self.groundtruth
        return [StateRecord(int(ti), p, q, float("nan"), float("nan"), 0) for ti, p, q in zip(t, pos, quat)]


def read_dataset(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise MissingFileError(root, "dataset directory not found")
    cfg = parse_config(root / "config.txt")
    camera = camera_from_config(cfg)
    noise = {k: v for k, v in cfg.items() if k not in _CAMERA_KEYS}

    t_imu, imu = _read_csv(root / "imu.csv", IMU_HEADER)
    if len(t_imu) < 2:
        raise ValidationError(root / "imu.csv", "need at least two IMU samples")

    cam_dir = root / "cam0"
    if not cam_dir.is_dir():
        raise MissingFileError(cam_dir, "frame directory not found")
    frames = []
    for p in cam_dir.iterdir():
        if p.suffix != ".pgm":
            continue
        try:
            frames.append((int(p.stem), p))
        except ValueError:
            raise ParseError(p, "frame file name is not an integer timestamp") from None
    frames.sort()
    if not frames:
        raise ValidationError(cam_dir, "no frames")
    frame_t = np.array([t for t, _ in frames], dtype=np.int64)
    for t, p in frames:
        if t < t_imu[0] or t > t_imu[-1]:
            raise ValidationError(p, f"frame timestamp {t} outside IMU span [{t_imu[0]}, {t_imu[-1]}]")

    gt = None
    gt_path = root / "groundtruth.csv"
    if gt_path.exists():
        t_gt, rows = _read_csv(gt_path, GT_HEADER)
        q = rows[:, 3:7]
        norms = np.linalg.norm(q, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
        if bad.size:
            raise ParseError(gt_path, "quaternion not unit norm", line=int(bad[0]) + 2)
        gt = (t_gt, rows[:, :3], q)

    return Dataset(
        root=root,
        camera=camera,
        T_BC=cfg["T_BC"],
        noise=noise,
        imu_t_ns=t_imu,
        accel=imu[:, :3],
        gyro=imu[:, 3:],
        frame_t_ns=frame_t,
        groundtruth=gt,
        frame_paths=[p for _, p in frames],
    )


def write_dataset(path, camera: RefractiveCamera, T_BC, imu_t_ns, accel, gyro, frames: Iterable, groundtruth=None, noise: dict | None = None) -> Path:
    """Write a dataset directory.

    ``frames`` yields ``(t_ns, uint8 image)``; ``groundtruth`` is
    ``(t_ns, positions, quaternions)`` or None.
    """
    root = Path(path)
    (root / "cam0").mkdir(parents=True, exist_ok=True)
    K = camera.intrinsics
    d = camera.distortion
    lines = [
        f"fx={_fmt(K.fx)}",
        f"fy={_fmt(K.fy)}",
        f"cx={_fmt(K.cx)}",
        f"cy={_fmt(K.cy)}",
        f"k1={_fmt(d.k1)}",
        f"k2={_fmt(d.k2)}",
        f"k3={_fmt(d.k3)}",
        f"k4={_fmt(d.k4)}",
        f"width={camera.width}",
        f"height={camera.height}",
        "T_BC=" + " ".join(_fmt(v) for v in np.asarray(T_BC, float).ravel()),
    ]
    for k, v in (noise or {}).items():
        lines.append(f"{k}={_fmt(v)}")
    (root / "config.txt").write_text("\n".join(lines) + "\n")
    _write_csv(root / "imu.csv", IMU_HEADER, imu_t_ns, np.column_stack([accel, gyro]))
    for t, img in frames:
        write_pgm(root / "cam0" / f"{int(t)}.pgm", img)
    if groundtruth is not None:
        t, pos, quat = groundtruth
        _write_csv(root / "groundtruth.csv", GT_HEADER, t, np.column_stack([pos, quat]))
    return root


# ---------------------------------------------------------------------------
# state logs


def write_state_log(records: Iterable[StateRecord], path) -> None:
    with open(path, "w") as f:
        f.write(STATE_HEADER + "\n")
        for r in records:
            vals = list(r.position) + list(r.quaternion) + [r.n, r.n_std]
            f.write(f"{int(r.t_ns)}," + ",".join(_fmt(v) for v in vals) + f",{int(r.num_features)}\n")


def read_state_log(path) -> list[StateRecord]:
    t, rows = _read_csv(Path(path), STATE_HEADER)
    return [
        StateRecord(int(ti), row[0:3].copy(), row[3:7].copy(), float(row[7]), float(row[8]), int(row[9]))
        for ti, row in zip(t, rows)
    ]


def write_n_series(records: Iterable[StateRecord], path) -> None:
    """Refractive index against time (seconds) for external plotting."""
    with open(path, "w") as f:
        f.write("t_s,n,n_std\n")
        for r in records:
            f.write(f"{_fmt(r.t_ns * 1e-9)},{_fmt(r.n)},{_fmt(r.n_std)}\n")


# ---------------------------------------------------------------------------
# absolute position error


class NoOverlapError(ValueError):
    """Estimate and ground truth share fewer than two timestamps."""


@dataclass
class ApeReport:
    rmse: float
    mean: float
    median: float
    max: float
    rotation: np.ndarray
    translation: np.ndarray
    count: int

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "count": self.count,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }


def interpolate_poses(t_ns, positions, quaternions, query_ns):
    """Linear position and slerp attitude at ``query_ns`` (must lie inside ``t_ns``)."""
    t = np.asarray(t_ns, dtype=float)
    q = np.asarray(query_ns, dtype=float)
    pos = np.column_stack([np.interp(q, t, positions[:, i]) for i in range(3)])
    quat = np.asarray(quaternions, float)
    rots = Rotation.from_quat(quat[:, [1, 2, 3, 0]])
    xyzw = Slerp(t, rots)(q).as_quat()
    wxyz = xyzw[:, [3, 0, 1, 2]]
    wxyz *= np.where(wxyz[:, :1] < 0.0, -1.0, 1.0)
    return pos, wxyz


def align_se3(src: np.ndarray, dst: np.ndarray):
    """Least-squares rigid ``R, t`` minimizing ``sum |R src + t - dst|^2`` (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def compute_ape(estimate: list[StateRecord], truth: list[StateRecord], align: str = "se3", start_time: float = 0.0) -> ApeReport:
    """Translational error statistics of ``estimate`` against interpolated ``truth``.

    Parameters
    ----------
    align : {"se3", "none"}
    start_time : float
        Estimate samples earlier than this many seconds after the first
        estimate timestamp are ignored.
    """
    if align not in ("se3", "none"):
        raise ValueError("align must be 'se3' or 'none'")
    if len(truth) < 2 or not estimate:
        raise NoOverlapError("need at least two samples in each trajectory")
    t_true = np.array([r.t_ns for r in truth], dtype=np.int64)
    p_true = np.array([r.position for r in truth], dtype=float)
    q_true = np.array([r.quaternion for r in truth], dtype=float)
    t_est = np.array([r.t_ns for r in estimate], dtype=np.int64)
    p_est = np.array([r.position for r in estimate], dtype=float)
    cutoff = t_est[0] + int(round(start_time * 1e9))
    keep = (t_est >= t_true[0]) & (t_est <= t_true[-1]) & (t_est >= cutoff)
    if keep.sum() < 2:
        raise NoOverlapError("fewer than two temporally overlapping samples")
    t_est, p_est = t_est[keep], p_est[keep]
    p_ref, _ = interpolate_poses(t_true, p_true, q_true, t_est)
    if align == "se3":
        R, t = align_se3(p_est, p_ref)
    else:
        R, t = np.eye(3), np.zeros(3)
    err = np.linalg.norm(p_est @ R.T + t - p_ref, axis=1)
    return ApeReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        mean=float(np.mean(err)),
        median=float(np.median(err)),
        max=float(np.max(err)),
        rotation=R,
        translation=t,
        count=int(err.size),
    )


def trajectory_length(positions: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(np.asarray(positions, float), axis=0), axis=1)))
