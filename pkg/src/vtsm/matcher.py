"""Masked zero-mean NCC template search, search windows, and epipolar-gated stereo matching."""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .geometry import Pose, SearchBounds, Side, StereoRig, compose, project_points, \
    rotation_from_axis_angle
from .meshmap import MapPoint
from .renderer import Patch

FILTERS = ("gray", "sobel", "laplacian")
# candidates within this band of the approximate maximum are re-scored exactly
RESCORE_BAND = 2e-3
RESCORE_MAX = 512


class MatchError(ValueError):
    """Template cannot be matched (too few valid pixels, window too small)."""


@dataclass(frozen=True)
class MatchModality:
    size: int
    filter: str = "gray"

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise ValueError(f"unknown filter {self.filter!r}")
        if self.size <= 0:
            raise ValueError("modality size must be positive")

    def to_dict(self):
        return {"size": self.size, "filter": self.filter}


def default_modalities(size: int) -> list[MatchModality]:
    return [MatchModality(size, "gray"), MatchModality(size // 2, "gray"),
            MatchModality(size, "sobel"), MatchModality(size, "laplacian")]


@dataclass(frozen=True)
class MatchResult:
    u: int
    v: int
    score: float
    modality: MatchModality
    valid_fraction: float


_SOBEL_U = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])
_SOBEL_V = _SOBEL_U.T.copy()
_LAPLACE = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def apply_filter(image: np.ndarray, name: str) -> np.ndarray:
    """3x3 stencil response; border pixels use reflected values."""
    img = np.asarray(image, dtype=np.float64)
    if name == "gray":
        return img
    if name == "sobel":
        gu = ndimage.correlate(img, _SOBEL_U, mode="reflect")
        gv = ndimage.correlate(img, _SOBEL_V, mode="reflect")
        return np.sqrt(gu * gu + gv * gv)
    if name == "laplacian":
        return ndimage.correlate(img, _LAPLACE, mode="reflect")
    raise ValueError(f"unknown filter {name!r}")


def prepare_template(intensity: np.ndarray, valid: np.ndarray, modality: MatchModality):
    """Crop to the modality size (centred on the anchor) and filter; validity shrinks by the stencil."""
    n = intensity.shape[0]
    s = modality.size
    if s > n or n % s:
        raise MatchError(f"modality size {s} does not divide template size {n}")
    a = n // 2 - s // 2
    img = np.asarray(intensity[a:a + s, a:a + s], dtype=np.float64)
    ok = np.asarray(valid[a:a + s, a:a + s], dtype=bool)
    if modality.filter != "gray":
        img = apply_filter(np.where(ok, img, 0.0), modality.filter)
        ok = ndimage.binary_erosion(ok, structure=np.ones((3, 3), bool), border_value=0)
    return img, ok


def prepare_query(image: np.ndarray, window, modality: MatchModality) -> np.ndarray:
    """Query sub-image for ``window`` (r0, c0, r1, c1), filtered over a 1-pixel inflated region."""
    r0, c0, r1, c1 = window
    if modality.filter == "gray":
        return np.asarray(image[r0:r1, c0:c1], dtype=np.float64)
    rows, cols = image.shape
    a0, b0 = max(r0 - 1, 0), max(c0 - 1, 0)
    a1, b1 = min(r1 + 1, rows), min(c1 + 1, cols)
    sub = apply_filter(image[a0:a1, b0:b1], modality.filter)
    return sub[r0 - a0:r0 - a0 + (r1 - r0), c0 - b0:c0 - b0 + (c1 - c0)]


def ncc_at(tmpl: np.ndarray, mask: np.ndarray, query: np.ndarray, i: int, j: int) -> float:
    """Exact zero-mean NCC over valid template pixels with the template's top-left at (i, j)."""
    h, w = tmpl.shape
    t = tmpl[mask]
    q = query[i:i + h, j:j + w][mask]
    tc = t - t.mean()
    qc = q - q.mean()
    den = np.sqrt(np.dot(tc, tc) * np.dot(qc, qc))
    if not den > 1e-12:
        return 0.0
    return float(min(1.0, max(-1.0, np.dot(tc, qc) / den)))


def ncc_surface(tmpl: np.ndarray, mask: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Approximate NCC at every offset via three float32 correlations (single precision)."""
    w = mask.astype(np.float64)
    n = w.sum()
    t = np.where(mask, tmpl - tmpl[mask].mean(), 0.0)
    q = query - query.mean()
    f32 = np.float32
    num = cv2.matchTemplate(q.astype(f32), t.astype(f32), cv2.TM_CCORR).astype(np.float64)
    s1 = cv2.matchTemplate(q.astype(f32), w.astype(f32), cv2.TM_CCORR).astype(np.float64)
    s2 = cv2.matchTemplate((q * q).astype(f32), w.astype(f32), cv2.TM_CCORR).astype(np.float64)
    var_q = s2 - s1 * s1 / n
    tt = float(np.dot(t[mask], t[mask]))
    # flat query regions carry no signal; their single-precision ratio is noise
    floor = 1e-6 * max(float(np.abs(s2).max()), 1e-12)
    den = np.sqrt(np.maximum(var_q, 0.0) * tt)
    out = np.zeros_like(num)
    good = (var_q > floor) & (den > 0)
    out[good] = num[good] / den[good]
    return out


def ncc_match(template: np.ndarray, valid: np.ndarray, query: np.ndarray, window,
              modality: MatchModality, f_min: float = 0.3) -> MatchResult:
    """Exhaustive integer-offset masked NCC search of a template inside ``window``.

    ``template``/``valid`` are the full template arrays (the modality picks
    size and filter); ``window`` is (r0, c0, r1, c1) in query pixels. The
    returned location is the template centre in query coordinates. Ties go
    to the smallest row, then column.
    """
    r0, c0, r1, c1 = (int(x) for x in window)
    rows, cols = query.shape
    if r0 < 0 or c0 < 0 or r1 > rows or c1 > cols:
        raise MatchError("search window exceeds the query image")
    tmpl, mask = prepare_template(template, valid, modality)
    frac = float(mask.mean())
    if frac < f_min or mask.sum() < 3:
        raise MatchError(f"valid-pixel fraction {frac:.3f} below {f_min}")
    h, w = tmpl.shape
    if r1 - r0 < h or c1 - c0 < w:
        raise MatchError("search window smaller than the template")
    q = prepare_query(query, (r0, c0, r1, c1), modality)
    approx = ncc_surface(tmpl, mask, q)
    top = float(approx.max())
    cand = np.flatnonzero(approx >= top - RESCORE_BAND)
    if len(cand) > RESCORE_MAX:
        cand = np.sort(cand[np.argsort(-approx.ravel()[cand], kind="stable")[:RESCORE_MAX]])
    best, bi, bj = -np.inf, 0, 0
    ncols = approx.shape[1]
    for c in cand:  # row-major order, so strict '>' keeps the smallest (u, v) on ties
        i, j = divmod(int(c), ncols)
        s = ncc_at(tmpl, mask, q, i, j)
        if s > best:
            best, bi, bj = s, i, j
    return MatchResult(r0 + bi + h // 2, c0 + bj + w // 2, best, modality, frac)


def _extremal_poses(bounds: SearchBounds):
    out = []
    for a in range(3):
        for sgn in (-1.0, 1.0):
            t = np.zeros(3)
            t[a] = sgn * bounds.t_tilde
            out.append((np.eye(3), t))
    for a in range(3):
        for sgn in (-1.0, 1.0):
            axis = np.zeros(3)
            axis[a] = 1.0
            out.append((rotation_from_axis_angle(axis, sgn * np.radians(bounds.r_tilde)), np.zeros(3)))
    return out


def compute_search_window(bounds: SearchBounds, estimate: Pose, point: MapPoint, rig: StereoRig,
                          side: Side, template_size: int, margin: int = 16):
    """Query-image rectangle (r0, c0, r1, c1) that can contain the template.

    The map point is projected from the nominal camera pose and from the 12
    poses displaced by +-t along and +-r about each camera axis; the bounding
    box of those projections is inflated by half the template plus ``margin``
    and clipped to the image.
    """
    us, vs = [], []
    for rot, t in [(np.eye(3), np.zeros(3))] + _extremal_poses(bounds):
        cam = compose(estimate, Pose(rot, t, estimate.frame_to, estimate.frame_to))
        pc = (point.position - cam.translation) @ cam.rotation
        if pc[2] <= rig.near:
            continue
        u, v, _ = project_points(pc, rig, side)
        us.append(float(u[0]))
        vs.append(float(v[0]))
    if not us:
        raise MatchError("map point behind the camera for every bounding pose")
    pad = template_size / 2 + margin
    r0 = int(np.floor(min(us) - pad))
    r1 = int(np.ceil(max(us) + pad)) + 1
    c0 = int(np.floor(min(vs) - pad))
    c1 = int(np.ceil(max(vs) + pad)) + 1
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, rig.rows), min(c1, rig.cols)
    if r1 - r0 < template_size or c1 - c0 < template_size:
        raise MatchError("search window leaves the image")
    return (r0, c0, r1, c1)


@dataclass(frozen=True)
class StereoMatch:
    left: MatchResult
    right: MatchResult

    @property
    def modality(self) -> MatchModality:
        return self.left.modality


def score_floor(s_min, modality: MatchModality) -> float:
    """Minimum accepted score for ``modality``; ``s_min`` is a number or a per-filter mapping."""
    if isinstance(s_min, dict):
        return float(s_min.get(modality.filter, s_min.get("gray", 0.5)))
    return float(s_min)


def match_stereo(left: Patch, right: Patch, left_image: np.ndarray, right_image: np.ndarray,
                 left_window, right_window, modalities: list[MatchModality], eps_u: float = 8.0,
                 s_min=0.5, f_min: float = 0.3) -> StereoMatch | None:
    """First modality whose left and right matches pass all gates, else ``None``.

    Gates: both scores >= the modality's score floor (``s_min``, a number or
    a {filter: floor} mapping), ``|u_L - u_R| <= eps_u`` and a positive
    disparity ``v_L - v_R``. Both sides always use the same modality.
    """
    for mod in modalities:
        floor = score_floor(s_min, mod)
        try:
            ml = ncc_match(left.intensity, left.valid, left_image, left_window, mod, f_min)
        except MatchError:
            continue
        if ml.score < floor:
            continue
        try:
            mr = ncc_match(right.intensity, right.valid, right_image, right_window, mod, f_min)
        except MatchError:
            continue
        if mr.score < floor:
            continue
        if abs(ml.u - mr.u) <= eps_u and ml.v - mr.v > 0:
            assert abs(ml.u - mr.u) <= eps_u and ml.v > mr.v
            return StereoMatch(ml, mr)
    return None
