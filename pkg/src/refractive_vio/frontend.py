"""Multi-level patch frontend: image pyramids, patch extraction, linear warps,
photometric residuals, patch pre-alignment and QR reduction of the residual.

Pixel coordinates are ``(u, v) = (column, row)`` with integer values at pixel
centres. A level-0 location ``u`` maps to ``u * 0.5**l`` on level ``l``;
patch offsets are expressed in level-``l`` pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy import ndimage

DEFAULT_PATCH_SIZE = 8
DEFAULT_LEVELS = 2
RANK_RATIO = 0.05
MIN_GRADIENT_NORM = 1e-9


class FrontendError(RuntimeError):
    """Base class for frontend failures."""


class PatchOutOfBounds(FrontendError):
    pass


class AlignmentFailure(FrontendError):
    pass


class RankDeficient(FrontendError):
    pass


def bilinear(image: np.ndarray, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``image`` at columns ``x`` and rows ``y``.

    Returns the interpolated values and a mask of samples that fell inside
    the image (outside samples are returned as 0).
    """
    h, w = image.shape
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = (x >= 0.0) & (y >= 0.0) & (x <= w - 1) & (y <= h - 1)
    xc = np.clip(x, 0.0, w - 1)
    yc = np.clip(y, 0.0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    fx = xc - x0
    fy = yc - y0
    i00 = image[y0, x0]
    i01 = image[y0, x0 + 1]
    i10 = image[y0 + 1, x0]
    i11 = image[y0 + 1, x0 + 1]
    top = i00 + fx * (i01 - i00)
    bottom = i10 + fx * (i11 - i10)
    vals = top + fy * (bottom - top)
    return np.where(inside, vals, 0.0), inside


def central_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients along columns (x) and rows (y); zero on the border."""
    gx = np.zeros_like(image)
    gy = np.zeros_like(image)
    gx[:, 1:-1] = 0.5 * (image[:, 2:] - image[:, :-2])
    gy[1:-1, :] = 0.5 * (image[2:, :] - image[:-2, :])
    return gx, gy


@dataclass
class ImagePyramid:
    """Grayscale pyramid; level ``l`` is the input downsampled by ``2**l``."""

    levels: list[np.ndarray]
    gradients: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    stacked: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.gradients:
            self.gradients = [central_gradients(img) for img in self.levels]
        # intensity and both gradients interleaved, so one gather samples all three
        self.stacked = [np.stack([img, gx, gy], axis=-1) for img, (gx, gy) in zip(self.levels, self.gradients)]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


def build_pyramid(image: np.ndarray, L: int = DEFAULT_LEVELS) -> ImagePyramid:
    """Build an ``L + 1`` level pyramid with 2x2 box downsampling."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    if L < 0:
        raise ValueError("L must be >= 0")
    if min(img.shape) < 2**L:
        raise ValueError(f"image {img.shape} too small for {L} pyramid levels")
    levels = [img]
    for _ in range(L):
        prev = levels[-1]
        h, w = prev.shape[0] // 2, prev.shape[1] // 2
        crop = prev[: 2 * h, : 2 * w]
        levels.append(0.25 * (crop[0::2, 0::2] + crop[1::2, 0::2] + crop[0::2, 1::2] + crop[1::2, 1::2]))
    return ImagePyramid(levels)


@lru_cache(maxsize=16)
def _offsets(size: int) -> np.ndarray:
    r = np.arange(size, dtype=float) - size // 2
    uu, vv = np.meshgrid(r, r)
    out = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    out.flags.writeable = False
    return out


def patch_offsets(size: int) -> np.ndarray:
    """``(size*size, 2)`` integer offsets ``-size/2 .. size/2 - 1`` in (u, v) order."""
    return _offsets(int(size))


@dataclass
class MultiLevelPatch:
    """Intensity and gradient patches of one feature on every pyramid level.

    ``intensities`` has shape ``(L+1, s*s)`` and ``gradients`` ``(L+1, s*s, 2)``;
    ``a`` and ``b`` are the affine illumination parameters of the residual.
    """

    center: np.ndarray
    size: int
    intensities: np.ndarray
    gradients: np.ndarray
    a: float = 1.0
    b: float = 0.0

    @property
    def num_levels(self) -> int:
        return self.intensities.shape[0]

    @property
    def offsets(self) -> np.ndarray:
        return patch_offsets(self.size)


def extract_patch(pyr: ImagePyramid, u, s: int = DEFAULT_PATCH_SIZE, L: int | None = None) -> MultiLevelPatch:
    """Sample a multi-level patch centred at level-0 pixel ``u``."""
    u = np.asarray(u, dtype=float)
    L = pyr.num_levels - 1 if L is None else L
    if L > pyr.num_levels - 1:
        raise ValueError("pyramid has too few levels")
    offsets = patch_offsets(s)
    intens = np.empty((L + 1, s * s))
    grads = np.empty((L + 1, s * s, 2))
    for l in range(L + 1):
        pos = u * 0.5**l + offsets
        # one extra pixel so that central-difference gradients stay valid
        if not _footprint_inside(pyr.levels[l], pos, margin=1.0):
            raise PatchOutOfBounds(f"patch at {u} leaves level {l}")
        sampled = _sample_stacked(pyr.stacked[l], pos)
        intens[l] = sampled[:, 0]
        grads[l] = sampled[:, 1:]
    return MultiLevelPatch(center=u.copy(), size=s, intensities=intens, gradients=grads)


def _footprint_inside(image, pos, margin=0.0) -> bool:
    h, w = image.shape
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    return bool(lo[0] >= margin and lo[1] >= margin and hi[0] <= w - 1 - margin and hi[1] <= h - 1 - margin)


def patch_in_bounds(pyr: ImagePyramid, u, s: int, D=None) -> bool:
    """True if the warped footprint fits on at least the finest level."""
    D = np.eye(2) if D is None else D
    pos = np.asarray(u, dtype=float) + patch_offsets(s) @ np.asarray(D).T
    return _footprint_inside(pyr.levels[0], pos, margin=1.0)


def compute_warp(camera, n: float, u_prev, bearing_cur, transport) -> np.ndarray:
    """2x2 linear warp of a patch between two frames.

    Product of the bearing-to-pixel Jacobian in the current frame, the
    frame-to-frame bearing transport Jacobian ``transport`` (3x3) and the
    pixel-to-bearing Jacobian in the previous frame.
    """
    du_dmu, _ = camera.project_jacobians(n, np.asarray(bearing_cur, dtype=float))
    dmu_du = camera.unproject_jacobian(n, np.asarray(u_prev, dtype=float))
    return du_dmu @ np.asarray(transport) @ dmu_du


def bearing_transport_jacobian(R: np.ndarray, t: np.ndarray, bearing: np.ndarray, rho: float) -> np.ndarray:
    """Jacobian of ``mu -> normalize(R mu + rho t)`` with respect to ``mu``."""
    w = R @ bearing + rho * t
    nw = np.linalg.norm(w)
    mu2 = w / nw
    return (np.eye(3) - np.outer(mu2, mu2)) / nw @ R


def _warped_positions(patch: MultiLevelPatch, u, D, l):
    return np.asarray(u, dtype=float) * 0.5**l + patch.offsets @ np.asarray(D).T


def photometric_error(patch: MultiLevelPatch, pyr: ImagePyramid, u, D, a: float, b: float, l: int):
    """Per-pixel residual ``P_l - a * I_l(u c_l + D offsets) - b`` for level ``l``.

    Raises :class:`PatchOutOfBounds` when the warped footprint leaves the
    level; callers drop the level in that case.
    """
    pos = _warped_positions(patch, u, D, l)
    img = pyr.levels[l]
    if not _footprint_inside(img, pos):
        raise PatchOutOfBounds(f"warped patch leaves level {l}")
    vals, _ = bilinear(img, pos[:, 0], pos[:, 1])
    return patch.intensities[l] - a * vals - b


def _sample_stacked(stack: np.ndarray, pos: np.ndarray) -> np.ndarray:
    # caller guarantees pos lies inside the image
    x0 = np.floor(pos[:, 0]).astype(np.intp)
    y0 = np.floor(pos[:, 1]).astype(np.intp)
    x0 = np.minimum(x0, stack.shape[1] - 2)
    y0 = np.minimum(y0, stack.shape[0] - 2)
    fx = (pos[:, 0] - x0)[:, None]
    fy = (pos[:, 1] - y0)[:, None]
    top = stack[y0, x0] * (1.0 - fx) + stack[y0, x0 + 1] * fx
    bottom = stack[y0 + 1, x0] * (1.0 - fx) + stack[y0 + 1, x0 + 1] * fx
    return top * (1.0 - fy) + bottom * fy


def _level_terms(patch, pyr, u, D, l):
    """Sampled intensities and image gradients at the warped footprint, or None."""
    pos = _warped_positions(patch, u, D, l)
    if not _footprint_inside(pyr.levels[l], pos, margin=1.0):
        return None
    s = _sample_stacked(pyr.stacked[l], pos)
    return s[:, 0], s[:, 1:]


def stack_and_linearize(patch: MultiLevelPatch, pyr: ImagePyramid, u, D, a=None, b=None, levels=None):
    """Stacked multi-level residual and its Jacobian w.r.t. the level-0 location.

    Returns ``(J, e)`` with ``J`` of shape ``(N, 2)``. Levels whose warped
    footprint leaves the image are skipped.
    """
    a = patch.a if a is None else a
    b = patch.b if b is None else b
    levels = range(patch.num_levels) if levels is None else levels
    Js, es = [], []
    for l in levels:
        terms = _level_terms(patch, pyr, u, D, l)
        if terms is None:
            continue
        vals, grad = terms
        es.append(patch.intensities[l] - a * vals - b)
        Js.append(-a * 0.5**l * grad)
    if not es:
        raise PatchOutOfBounds("no pyramid level in bounds")
    return np.concatenate(Js), np.concatenate(es)


def prealign(
    patch: MultiLevelPatch,
    pyr: ImagePyramid,
    u0,
    D,
    max_iter: int = 10,
    tol: float = 0.01,
    estimate_illumination: bool = True,
):
    """Gauss-Newton alignment of ``patch`` in ``pyr`` starting at ``u0``.

    Coarse to fine: each pyramid level is aligned on its own, starting from
    the result of the level above, so the final estimate comes from level 0
    alone. Location and (optionally) the illumination ``a, b`` are solved
    jointly.

    Returns
    -------
    u, a, b : ndarray, float, float

    Raises
    ------
    AlignmentFailure
        Singular normal equations, divergence, or the footprint leaving the image.
    """
    u = np.asarray(u0, dtype=float).copy()
    a, b = patch.a, patch.b
    top = patch.num_levels - 1
    for start in range(top, -1, -1):
        levels = (start,)
        prev_cost = np.inf
        worse = 0
        for _ in range(max_iter):
            rows, res = [], []
            for l in levels:
                terms = _level_terms(patch, pyr, u, D, l)
                if terms is None:
                    continue
                vals, grad = terms
                res.append(patch.intensities[l] - a * vals - b)
                cols = [-a * 0.5**l * grad]
                if estimate_illumination:
                    cols += [-vals[:, None], -np.ones((vals.size, 1))]
                rows.append(np.hstack(cols))
            if not res:
                raise AlignmentFailure("patch left the image during alignment")
            J = np.vstack(rows)
            e = np.concatenate(res)
            cost = float(e @ e)
            worse = worse + 1 if cost > prev_cost else 0
            if worse >= 3:
                raise AlignmentFailure("alignment diverged")
            prev_cost = cost
            H = J.T @ J
            s = np.sqrt(np.maximum(np.linalg.eigvalsh(H[:2, :2])[::-1], 0.0))
            if s[0] < MIN_GRADIENT_NORM or s[1] < RANK_RATIO * s[0]:
                raise AlignmentFailure("singular alignment problem")
            try:
                delta = -np.linalg.solve(H, J.T @ e)
            except np.linalg.LinAlgError as exc:
                raise AlignmentFailure("singular alignment problem") from exc
            u = u + delta[:2]
            if estimate_illumination:
                a += delta[2]
                b += delta[3]
            if not np.all(np.isfinite(u)):
                raise AlignmentFailure("alignment produced non-finite location")
            if np.linalg.norm(delta[:2]) < tol:
                break
    return u, a, b


@dataclass
class ReducedError:
    """Residual and Jacobian compressed to at most two rows by a thin QR."""

    e_reduced: np.ndarray
    R1: np.ndarray
    rank: int
    q1: np.ndarray


def qr_reduce(J: np.ndarray, e: np.ndarray, rank_ratio: float = RANK_RATIO) -> ReducedError:
    """Reduce ``(J, e)`` with ``J = [Q1 Q2] [R1; 0]``.

    Rank 2 keeps the full upper-triangular ``R1``; rank 1 (line-like
    gradients) keeps the dominant row of a column-pivoted QR.
    """
    J = np.asarray(J, dtype=float)
    e = np.asarray(e, dtype=float)
    if J.ndim != 2 or J.shape[1] != 2 or J.shape[0] < 2:
        raise ValueError("J must be N x 2 with N >= 2")
    s = np.linalg.svd(J, compute_uv=False)
    if s[0] < MIN_GRADIENT_NORM:
        raise RankDeficient("patch has no gradient")
    if s[1] >= rank_ratio * s[0]:
        Q, R = np.linalg.qr(J)
        return ReducedError(e_reduced=Q.T @ e, R1=R, rank=2, q1=Q)
    Q, R, perm = scipy.linalg.qr(J, mode="economic", pivoting=True)
    row = np.empty(2)
    row[perm] = R[0]
    q = Q[:, :1]
    return ReducedError(e_reduced=q.T @ e, R1=row[None, :], rank=1, q1=q)


def shi_tomasi_score(image: np.ndarray, window: int = 5) -> np.ndarray:
    """Minimum eigenvalue of the locally averaged gradient structure tensor."""
    gx, gy = central_gradients(np.asarray(image, dtype=float))
    sxx = ndimage.uniform_filter(gx * gx, window)
    syy = ndimage.uniform_filter(gy * gy, window)
    sxy = ndimage.uniform_filter(gx * gy, window)
    half_tr = 0.5 * (sxx + syy)
    return half_tr - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy**2, 0.0))


def detect_features(
    image: np.ndarray,
    existing=(),
    max_new: int = 10,
    min_distance: float = 20.0,
    margin: int = 20,
    min_score: float = 1.0,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Greedy Shi-Tomasi corner selection away from ``existing`` pixels.

    Returns an ``(k, 2)`` array of ``(u, v)`` integer pixel locations.
    """
    if max_new <= 0:
        return np.zeros((0, 2))
    score = shi_tomasi_score(image)
    peaks = score == ndimage.maximum_filter(score, size=5)
    peaks &= score > min_score
    peaks[:margin, :] = False
    peaks[-margin:, :] = False
    peaks[:, :margin] = False
    peaks[:, -margin:] = False
    if mask is not None:
        peaks &= mask
    rows, cols = np.nonzero(peaks)
    order = np.lexsort((cols, rows, -score[rows, cols]))
    chosen = [np.asarray(p, dtype=float) for p in existing]
    new = []
    d2 = min_distance**2
    for idx in order:
        cand = np.array([cols[idx], rows[idx]], dtype=float)
        if all(np.sum((cand - c) ** 2) >= d2 for c in chosen):
            chosen.append(cand)
            new.append(cand)
            if len(new) >= max_new:
                break
    return np.array(new).reshape(-1, 2)
