"""Drive the estimator over a recorded dataset."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .dataset import Dataset, StateRecord
from .filter import FilterConfig, NoiseConfig, RefractiveVIO

_NOISE_KEYS = {
    "accel_noise_density": "accel_noise",
    "gyro_noise_density": "gyro_noise",
    "accel_bias_walk": "accel_bias_walk",
    "gyro_bias_walk": "gyro_bias_walk",
}


def noise_from_dataset(dataset: Dataset, base: NoiseConfig | None = None) -> NoiseConfig:
    """Filter noise with the IMU densities declared in the dataset config."""
    base = NoiseConfig() if base is None else base
    overrides = {field: float(dataset.noise[key]) for key, field in _NOISE_KEYS.items() if key in dataset.noise}
    return replace(base, **overrides)


def run_estimator(dataset: Dataset, config: FilterConfig | None = None, noise: NoiseConfig | None = None, max_frames: int | None = None, progress=None) -> list[StateRecord]:
    """Process every frame in timestamp order and return one record per processed frame.

    IMU samples are integrated with the mean of each bracketing pair; the last
    interval before a frame is cut at the frame time using the linearly
    interpolated sample. Frames arriving before the gravity initialization
    finishes are skipped.
    """
    vio = RefractiveVIO(dataset.camera, dataset.T_BC, config, noise_from_dataset(dataset, noise))
    t_imu = dataset.imu_t_ns
    acc = dataset.accel
    gyr = dataset.gyro
    records = []
    k = 0  # index of the next unused IMU sample
    last_a = last_g = None
    n_frames = dataset.num_frames if max_frames is None else min(max_frames, dataset.num_frames)

    for i in range(n_frames):
        t_frame = int(dataset.frame_t_ns[i])
        while k < len(t_imu) and t_imu[k] <= t_frame:
            t = t_imu[k] * 1e-9
            if not vio.initialized:
                vio.add_imu_for_init(t, acc[k])
            else:
                vio.propagate_to(t, 0.5 * (last_a + acc[k]), 0.5 * (last_g + gyr[k]))
            last_a, last_g = acc[k], gyr[k]
            k += 1
        if not vio.initialized:
            continue
        if k < len(t_imu) and vio.t < t_frame * 1e-9:
            # partial step to the frame time
            w = (t_frame - t_imu[k - 1]) / (t_imu[k] - t_imu[k - 1])
            a_f = (1 - w) * acc[k - 1] + w * acc[k]
            g_f = (1 - w) * gyr[k - 1] + w * gyr[k]
            vio.propagate_to(t_frame * 1e-9, 0.5 * (last_a + a_f), 0.5 * (last_g + g_f))
            last_a, last_g = a_f, g_f
        rec = vio.process_frame(t_frame * 1e-9, dataset.image(i))
        records.append(replace(rec, t_ns=t_frame))
        if progress is not None:
            progress(i, n_frames, rec)
    return records


def first_entry_time(records, lo: float, hi: float) -> float | None:
    """Seconds from the first record until n enters ``[lo, hi]`` for good, or None."""
    n = np.array([r.n for r in records])
    inside = (n >= lo) & (n <= hi)
    if not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    first = 0 if outside.size == 0 else outside[-1] + 1
    return (records[first].t_ns - records[0].t_ns) * 1e-9
