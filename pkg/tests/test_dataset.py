import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from refractive_vio.camera import EquidistantParams, Intrinsics, RefractiveCamera
from refractive_vio.dataset import (
    MissingFileError,
    NoOverlapError,
    ParseError,
    StateRecord,
    TimestampOrderError,
    ValidationError,
    compute_ape,
    interpolate_poses,
    read_dataset,
    read_pgm,
    read_state_log,
    trajectory_length,
    write_dataset,
    write_n_series,
    write_pgm,
    write_state_log,
)


@pytest.fixture
def camera():
    return RefractiveCamera(Intrinsics(150.0, 151.0, 80.5, 60.25), EquidistantParams(0.01, -0.002, 0.0, 0.0), width=160, height=120)


def _records(t_ns, pos, quat):
    return [StateRecord(int(t), p, q, 1.33, 0.01, 10) for t, p, q in zip(t_ns, pos, quat)]


def _small_dataset(path, camera, rng, groundtruth=True):
    imu_t = np.arange(0, 1_000_000_001, 5_000_000, dtype=np.int64)
    accel = rng.normal(size=(len(imu_t), 3))
    gyro = rng.normal(size=(len(imu_t), 3))
    frame_t = imu_t[::20]
    frames = [(t, rng.integers(0, 256, size=(120, 160), dtype=np.uint8)) for t in frame_t]
    gt = None
    if groundtruth:
        q = Rotation.random(len(frame_t), random_state=1).as_quat()[:, [3, 0, 1, 2]]
        gt = (frame_t, rng.normal(size=(len(frame_t), 3)), q)
    T_BC = np.eye(4)
    T_BC[:3, 3] = [0.1, 0.0, -0.05]
    write_dataset(path, camera, T_BC, imu_t, accel, gyro, frames, gt, noise={"accel_noise": 0.002})
    return imu_t, accel, gyro, frames, gt, T_BC


def test_dataset_roundtrip(tmp_path, camera):
    imu_t, accel, gyro, frames, gt, T_BC = _small_dataset(tmp_path / "ds", camera, np.random.default_rng(0))
    ds = read_dataset(tmp_path / "ds")
    assert np.array_equal(ds.imu_t_ns, imu_t)
    assert np.array_equal(ds.accel, accel) and np.array_equal(ds.gyro, gyro)
    assert np.array_equal(ds.T_BC, T_BC)
    assert ds.noise == {"accel_noise": 0.002}
    assert ds.camera.intrinsics == camera.intrinsics and ds.camera.distortion == camera.distortion
    assert (ds.camera.width, ds.camera.height) == (160, 120)
    assert ds.num_frames == len(frames)
    for (t, img), (t2, img2) in zip(frames, ds.frames()):
        assert t == t2 and np.array_equal(img, img2)
    for a, b in zip(gt, ds.groundtruth):
        assert np.array_equal(a, b)


def _rewrite_line(path, lineno, text):
    lines = path.read_text().splitlines()
    lines[lineno - 1] = text
    path.write_text("\n".join(lines) + "\n")


def test_short_imu_row(tmp_path, camera):
    _small_dataset(tmp_path, camera, np.random.default_rng(1))
    _rewrite_line(tmp_path / "imu.csv", 5, "15000000,1,2,3,4,5")
    with pytest.raises(ParseError) as err:
        read_dataset(tmp_path)
    assert err.value.line == 5
    assert "imu.csv:5" in str(err.value)


def test_non_numeric_field(tmp_path, camera):
    _small_dataset(tmp_path, camera, np.random.default_rng(1))
    _rewrite_line(tmp_path / "imu.csv", 3, "5000000,1,2,x,4,5,6")
    with pytest.raises(ParseError) as err:
        read_dataset(tmp_path)
    assert err.value.line == 3


def test_non_monotone_timestamps(tmp_path, camera):
    _small_dataset(tmp_path, camera, np.random.default_rng(2))
    _rewrite_line(tmp_path / "imu.csv", 4, "5000000,0,0,0,0,0,0")
    with pytest.raises(TimestampOrderError):
        read_dataset(tmp_path)


def test_frame_outside_imu_span(tmp_path, camera):
    _small_dataset(tmp_path, camera, np.random.default_rng(3))
    write_pgm(tmp_path / "cam0" / "2000000000.pgm", np.zeros((120, 160), np.uint8))
    with pytest.raises(ValidationError, match="outside IMU span"):
        read_dataset(tmp_path)


def test_missing_files(tmp_path, camera):
    with pytest.raises(MissingFileError):
        read_dataset(tmp_path / "nowhere")
    _small_dataset(tmp_path, camera, np.random.default_rng(4))
    (tmp_path / "imu.csv").unlink()
    with pytest.raises(MissingFileError, match="imu.csv"):
        read_dataset(tmp_path)


def test_missing_calibration_key(tmp_path, camera):
    _small_dataset(tmp_path, camera, np.random.default_rng(5))
    cfg = tmp_path / "config.txt"
    cfg.write_text("\n".join(l for l in cfg.read_text().splitlines() if not l.startswith("fy=")) + "\n")
    with pytest.raises(ParseError):
        read_dataset(tmp_path)


def test_non_unit_groundtruth_quaternion(tmp_path, camera):
    _small_dataset(tmp_path, camera, np.random.default_rng(6))
    _rewrite_line(tmp_path / "groundtruth.csv", 2, "0,0,0,0,1,1,0,0")
    with pytest.raises(ParseError) as err:
        read_dataset(tmp_path)
    assert err.value.line == 2


def test_wrong_image_size(tmp_path, camera):
    _small_dataset(tmp_path, camera, np.random.default_rng(7))
    write_pgm(tmp_path / "cam0" / "0.pgm", np.zeros((10, 10), np.uint8))
    ds = read_dataset(tmp_path)
    with pytest.raises(ValidationError):
        ds.image(0)


def test_pgm_roundtrip_and_comments(tmp_path):
    img = np.random.default_rng(8).integers(0, 256, size=(7, 11), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "b.pgm").write_bytes(b"P5\n# a comment\n11 7\n255\n" + img.tobytes())
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), img)
    (tmp_path / "c.pgm").write_bytes(b"P2\n11 7\n255\n" + img.tobytes())
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "c.pgm")
    (tmp_path / "d.pgm").write_bytes(b"P5\n11 7\n255\n" + img.tobytes()[:-1])
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "d.pgm")
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "e.pgm", img.astype(float))


def test_state_log_is_exact(tmp_path):
    rng = np.random.default_rng(9)
    q = Rotation.random(5, random_state=2).as_quat()[:, [3, 0, 1, 2]]
    recs = [
        StateRecord(int(t), rng.normal(size=3), qi, float(rng.uniform(1, 2)), float(rng.uniform()), int(k))
        for t, qi, k in zip(range(0, 500, 100), q, range(5))
    ]
    path = tmp_path / "state.csv"
    write_state_log(recs, path)
    assert path.read_text().splitlines()[0] == "t_ns,px,py,pz,qw,qx,qy,qz,n,n_std,num_features"
    back = read_state_log(path)
    for a, b in zip(recs, back):
        assert a.t_ns == b.t_ns and a.num_features == b.num_features
        assert np.array_equal(a.position, b.position) and np.array_equal(a.quaternion, b.quaternion)
        assert a.n == b.n and a.n_std == b.n_std
    write_n_series(recs, tmp_path / "n.csv")
    rows = (tmp_path / "n.csv").read_text().splitlines()
    assert rows[0] == "t_s,n,n_std" and len(rows) == 6
    assert float(rows[2].split(",")[1]) == recs[1].n


# --- APE --------------------------------------------------------------------


def _truth(rng, count=50):
    t = np.arange(count, dtype=np.int64) * 100_000_000
    pos = np.cumsum(rng.normal(size=(count, 3)), axis=0)
    q = Rotation.random(count, random_state=3).as_quat()[:, [3, 0, 1, 2]]
    return t, pos, q


def test_ape_identity():
    t, pos, q = _truth(np.random.default_rng(0))
    rep = compute_ape(_records(t, pos, q), _records(t, pos, q))
    assert rep.rmse < 1e-12 and rep.count == len(t)


def test_ape_rigid_offset_removed_by_alignment():
    t, pos, q = _truth(np.random.default_rng(1))
    R = Rotation.from_rotvec([0.3, -0.2, 0.5]).as_matrix()
    moved = pos @ R.T + np.array([1.0, -2.0, 3.0])
    assert compute_ape(_records(t, moved, q), _records(t, pos, q), align="se3").rmse < 1e-10
    rep = compute_ape(_records(t, pos + [0.1, 0.0, 0.0], q), _records(t, pos, q), align="none")
    assert rep.rmse == pytest.approx(0.1, abs=1e-12)
    assert rep.max == pytest.approx(0.1, abs=1e-12)


def test_ape_invariant_to_rigid_motion_of_truth():
    rng = np.random.default_rng(2)
    t, pos, q = _truth(rng)
    est = pos + rng.normal(scale=0.05, size=pos.shape)
    R = Rotation.from_rotvec([1.0, 0.2, -0.4]).as_matrix()
    a = compute_ape(_records(t, est, q), _records(t, pos, q)).rmse
    b = compute_ape(_records(t, est, q), _records(t, pos @ R.T + 5.0, q)).rmse
    assert a == pytest.approx(b, rel=1e-9)


def test_ape_interpolates_truth_and_skips_warmup():
    rng = np.random.default_rng(3)
    t, pos, q = _truth(rng)
    t_mid = t[:-1] + 50_000_000
    p_mid = 0.5 * (pos[:-1] + pos[1:])
    rep = compute_ape(_records(t_mid, p_mid, q[:-1]), _records(t, pos, q), align="none")
    assert rep.rmse < 1e-12
    bad = p_mid.copy()
    bad[:5] += 10.0
    # the first five estimates lie in the first 0.45 s
    assert compute_ape(_records(t_mid, bad, q[:-1]), _records(t, pos, q), align="none", start_time=0.46).rmse < 1e-12


def test_ape_errors():
    t, pos, q = _truth(np.random.default_rng(4))
    with pytest.raises(NoOverlapError):
        compute_ape(_records(t + 10**12, pos, q), _records(t, pos, q))
    with pytest.raises(ValueError):
        compute_ape(_records(t, pos, q), _records(t, pos, q), align="sim3")


def test_interpolate_poses_slerp_midpoint():
    q0 = np.array([1.0, 0.0, 0.0, 0.0])
    q1 = np.array([np.cos(0.5), 0.0, 0.0, np.sin(0.5)])
    _, q = interpolate_poses([0, 10], np.zeros((2, 3)), np.stack([q0, q1]), [5])
    np.testing.assert_allclose(q[0], [np.cos(0.25), 0.0, 0.0, np.sin(0.25)], atol=1e-12)


def test_trajectory_length():
    assert trajectory_length(np.array([[0.0, 0, 0], [3, 4, 0], [3, 4, 2]])) == pytest.approx(7.0)
