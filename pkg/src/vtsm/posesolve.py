"""Stereo triangulation, least-squares rigid alignment and RANSAC."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, StereoRig

D_MIN = 0.5
COLLINEAR_TOL = 1e-9


class TriangulationError(ValueError):
    pass


class DegenerateConfigurationError(ValueError):
    pass


class AlignmentError(RuntimeError):
    """No transformation could be estimated from the correspondences."""


@dataclass(frozen=True, eq=False)
class Correspondence:
    p_world: np.ndarray
    p_camera: np.ndarray
    score: float = 1.0
    reused: bool = False

    def __post_init__(self):
        pw = np.asarray(self.p_world, dtype=np.float64).reshape(3)
        pc = np.asarray(self.p_camera, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(pw)) and np.all(np.isfinite(pc))):
            raise ValueError("correspondence points must be finite")
        if pc[2] <= 0:
            raise ValueError("camera-frame point must have positive depth")
        object.__setattr__(self, "p_world", pw)
        object.__setattr__(self, "p_camera", pc)

    def as_reused(self) -> "Correspondence":
        return Correspondence(self.p_world, self.p_camera, self.score, True)


@dataclass(eq=False)
class AlignmentResult:
    transform: Pose
    inliers: np.ndarray
    inlier_count: int
    rms: float
    # (pose, inlier count) of the best distinct hypotheses, best first
    candidates: list = field(default_factory=list)
    minimal_rms: float = float("nan")


def stereo_triangulate(u_l: float, v_l: float, u_r: float, v_r: float, rig: StereoRig,
                       d_min: float = D_MIN) -> np.ndarray:
    """Left-camera-frame point from a rectified stereo match.

    Depth from the horizontal disparity, height from the mean row of the two
    observations, lateral position from the left column.
    """
    d = v_l - v_r
    if not d > d_min:
        raise TriangulationError(f"disparity {d:.3f} px not above {d_min} px")
    z = rig.focal * rig.baseline / d
    u = 0.5 * (u_l + u_r)
    return np.array([(v_l - rig.cv) * z / rig.focal, (u - rig.cu) * z / rig.focal, z])


def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Batched rigid fit dst ~ R @ src + t over the second-to-last axis."""
    ms = src.mean(axis=-2, keepdims=True)
    md = dst.mean(axis=-2, keepdims=True)
    cov = np.swapaxes(dst - md, -1, -2) @ (src - ms)
    u, _, vt = np.linalg.svd(cov)
    s = np.ones(u.shape[:-2] + (3,))
    s[..., 2] = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    s[..., 2][s[..., 2] == 0] = 1.0
    r = (u * s[..., None, :]) @ vt
    t = md[..., 0, :] - np.einsum("...ij,...j->...i", r, ms[..., 0, :])
    return r, t


def _spread(points: np.ndarray) -> np.ndarray:
    c = points - points.mean(axis=-2, keepdims=True)
    return np.linalg.svd(c, compute_uv=False)


def umeyama_align(source, target, source_frame: str = "camera",
                  target_frame: str = "world") -> Pose:
    """Rigid (unit-scale) least-squares transform T minimising sum |target_i - T(source_i)|^2.

    SVD of the cross-covariance with the determinant sign correction. The
    returned pose maps ``source_frame`` coordinates into ``target_frame``.
    """
    p = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(p) != len(q):
        raise ValueError("point sets differ in size")
    if len(p) < 3:
        raise DegenerateConfigurationError("at least three point pairs are required")
    for pts in (p, q):
        sv = _spread(pts)
        if sv[1] <= COLLINEAR_TOL * max(1.0, sv[0]):
            raise DegenerateConfigurationError("points are collinear")
    r, t = _kabsch(p, q)
    return Pose.from_matrix(np.block([[r, t[:, None]], [np.zeros((1, 3)), np.ones((1, 1))]]),
                            target_frame, source_frame)


def _residuals(r, t, src, dst):
    return np.linalg.norm(dst - (src @ np.swapaxes(r, -1, -2) + t[..., None, :]), axis=-1)


def ransac_align(corrs: list[Correspondence], inlier_threshold: float = 0.03,
                 max_iterations: int = 500, rng: np.random.Generator | None = None,
                 min_inliers: int = 20, n_candidates: int = 3) -> AlignmentResult:
    """Max-inlier rigid camera->world transform from 3-point hypotheses, refit on the inliers.

    Hypotheses are drawn up front from ``rng``; the kept model is the first
    one reaching the maximum inlier count.
    """
    if len(corrs) < 3:
        raise AlignmentError("at least three correspondences are required")
    if rng is None:
        rng = np.random.default_rng()
    src = np.array([c.p_camera for c in corrs])
    dst = np.array([c.p_world for c in corrs])
    n = len(corrs)
    samples = np.array([rng.choice(n, size=3, replace=False) for _ in range(max_iterations)])
    s_src, s_dst = src[samples], dst[samples]
    ok = (_spread(s_src)[:, 1] > COLLINEAR_TOL * np.maximum(1.0, _spread(s_src)[:, 0])) & \
         (_spread(s_dst)[:, 1] > COLLINEAR_TOL * np.maximum(1.0, _spread(s_dst)[:, 0]))
    if not np.any(ok):
        raise AlignmentError("every minimal sample is degenerate")
    r, t = _kabsch(s_src, s_dst)
    res = _residuals(r, t, src[None], dst[None])
    inl = res < inlier_threshold
    counts = np.where(ok, inl.sum(axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < max(min_inliers, 3):
        raise AlignmentError(f"best hypothesis has {max(counts[best], 0)} inliers, "
                             f"need {min_inliers}")
    idx = np.flatnonzero(inl[best])
    minimal_rms = float(np.sqrt(np.mean(res[best, idx] ** 2)))
    try:
        pose = umeyama_align(src[idx], dst[idx])
    except DegenerateConfigurationError as exc:
        raise AlignmentError(str(exc)) from None
    rr = _residuals(pose.rotation, pose.translation, src[idx], dst[idx])
    rms = float(np.sqrt(np.mean(rr ** 2)))

    candidates = []
    seen = []
    for h in np.argsort(-counts, kind="stable"):
        if counts[h] < 3 or len(candidates) >= n_candidates:
            break
        members = inl[h]
        if any(np.array_equal(members, m) for m in seen):
            continue
        seen.append(members)
        if h == best:
            candidates.append((pose, int(counts[h])))
            continue
        try:
            cp = umeyama_align(src[members], dst[members])
        except DegenerateConfigurationError:
            continue
        candidates.append((cp, int(counts[h])))
    return AlignmentResult(pose, idx, len(idx), rms, candidates, minimal_rms)
