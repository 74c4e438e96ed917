"""Rigid transforms, perturbation sampling and the rectified stereo camera.

Conventions used throughout the package:

* A :class:`Pose` labelled ``frame_from="world", frame_to="camera"`` is the pose
  of the camera expressed in the world frame. It maps camera coordinates to
  world coordinates: ``p_world = R @ p_camera + t``.
* Camera frames follow the usual optical convention: x right, y down, z forward.
* Pixel coordinates are ``u`` = row (downward) and ``v`` = column (rightward),
  with the origin at the centre of the top-left pixel.
* The right camera of a :class:`StereoRig` sits ``baseline`` metres along the
  left camera's +x axis with identical orientation and intrinsics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

Side = Literal["left", "right"]

ORTHO_TOL = 1e-9


class FrameMismatchError(ValueError):
    """Raised when two poses are combined across incompatible frames."""


def _readonly(a, shape):
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues' formula; ``angle`` in radians, ``axis`` need not be unit."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0 or angle == 0.0:
        return np.eye(3)
    k = axis / n
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rotation_angle(rotation: np.ndarray) -> float:
    """Rotation angle in radians, numerically stable near 0 and pi."""
    r = np.asarray(rotation)
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    c = 0.5 * (np.trace(r) - 1.0)
    return float(np.arctan2(s, c))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping ``frame_to`` coordinates into ``frame_from``."""

    rotation: np.ndarray
    translation: np.ndarray
    frame_from: str = "world"
    frame_to: str = "camera"

    def __post_init__(self):
        r = _readonly(self.rotation, (3, 3))
        t = _readonly(self.translation, (3,))
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err > ORTHO_TOL or np.linalg.det(r) <= 0:
            raise ValueError(f"rotation is not a proper orthonormal matrix (error {err:.2e})")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, frame_from: str = "world", frame_to: str = "camera") -> "Pose":
        return cls(np.eye(3), np.zeros(3), frame_from, frame_to)

    @classmethod
    def from_matrix(cls, m, frame_from: str = "world", frame_to: str = "camera") -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(orthonormalize(m[:3, :3]), m[:3, 3], frame_from, frame_to)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation, self.frame_to, self.frame_from)

    def apply(self, points) -> np.ndarray:
        """Map points given in ``frame_to`` coordinates into ``frame_from``."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def relabel(self, frame_from: str | None = None, frame_to: str | None = None) -> "Pose":
        return Pose(self.rotation, self.translation,
                    self.frame_from if frame_from is None else frame_from,
                    self.frame_to if frame_to is None else frame_to)

    @property
    def center(self) -> np.ndarray:
        """Origin of ``frame_to`` expressed in ``frame_from``."""
        return self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
            "from": self.frame_from,
            "to": self.frame_to,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        r = np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3)
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            r = orthonormalize(r)
        return cls(r, d["translation"], d.get("from", "world"), d.get("to", "camera"))

    def __repr__(self):
        ang = np.degrees(rotation_angle(self.rotation))
        return (f"Pose({self.frame_from}->{self.frame_to}, t={np.round(self.translation, 4).tolist()}, "
                f"angle={ang:.3f} deg)")


def compose(a: Pose, b: Pose) -> Pose:
    """``a`` then ``b``: for a: A->B and b: B->C returns A->C.

    The product rotation is re-projected onto SO(3) so that arbitrarily long
    chains stay orthonormal to machine precision.
    """
    if a.frame_to != b.frame_from:
        raise FrameMismatchError(f"cannot compose {a.frame_from}->{a.frame_to} with "
                                 f"{b.frame_from}->{b.frame_to}")
    r = a.rotation @ b.rotation
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-12:
        r = orthonormalize(r)
    return Pose(r, a.rotation @ b.translation + a.translation, a.frame_from, b.frame_to)


@dataclass(frozen=True)
class SearchBounds:
    """Translation bound in metres and rotation bound in degrees."""

    t_tilde: float
    r_tilde: float

    def __post_init__(self):
        if not (self.t_tilde >= 0 and self.r_tilde >= 0):
            raise ValueError(f"search bounds must be non-negative, got {self}")

    def scaled(self, gamma: float) -> "SearchBounds":
        return SearchBounds(gamma * self.t_tilde, gamma * self.r_tilde)


@dataclass(frozen=True)
class PixelCoord:
    u: float
    v: float
    in_frame: bool = True


@dataclass(frozen=True)
class StereoRig:
    """Rectified pinhole stereo pair sharing intrinsics."""

    focal: float
    cu: float
    cv: float
    baseline: float
    rows: int
    cols: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if self.focal <= 0 or self.baseline <= 0:
            raise ValueError("focal length and baseline must be positive")
        if not (0 <= self.cu <= self.rows - 1 and 0 <= self.cv <= self.cols - 1):
            raise ValueError("principal point outside the image")
        if not (0 < self.near < self.far):
            raise ValueError("clip depths must satisfy 0 < near < far")

    @classmethod
    def desk(cls, baseline: float = 0.40) -> "StereoRig":
        return cls(focal=1100.0, cu=479.5, cv=639.5, baseline=baseline, rows=960, cols=1280,
                   near=0.05, far=50.0)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def side_offset(self, side: Side) -> float:
        """x-offset of the camera centre in the left camera frame."""
        if side == "left":
            return 0.0
        if side == "right":
            return self.baseline
        raise ValueError(f"unknown side {side!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("focal", "cu", "cv", "baseline", "rows", "cols", "near", "far")}

    @classmethod
    def from_dict(cls, d: dict) -> "StereoRig":
        return cls(**d)


def project_points(points_cam, rig: StereoRig, side: Side = "left"):
    """Vectorised projection of left-camera-frame points; returns (u, v, z)."""
    p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    x = p[:, 0] - rig.side_offset(side)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = rig.focal * p[:, 1] / z + rig.cu
        v = rig.focal * x / z + rig.cv
    return u, v, z


def project(point, rig: StereoRig, side: Side = "left") -> PixelCoord:
    """Project a point given in the left camera frame into ``side``'s image."""
    p = np.asarray(point, dtype=np.float64)
    if not p[2] > 0:
        raise ValueError(f"point at or behind the camera plane (z={p[2]})")
    u, v, _ = project_points(p, rig, side)
    u, v = float(u[0]), float(v[0])
    inside = (p[2] > rig.near and -0.5 <= u <= rig.rows - 0.5 and -0.5 <= v <= rig.cols - 0.5)
    return PixelCoord(u, v, bool(inside))


def tangent_basis(normal) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal vectors spanning the plane orthogonal to ``normal``."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.zeros(3)
    helper[np.argmin(np.abs(n))] = 1.0
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        x = rng.normal(size=3)
        n = np.linalg.norm(x)
        if n > 1e-12:
            return x / n


def sample_perturbation(bounds: SearchBounds, surface_normal=None, planar: bool = False,
                        rng: np.random.Generator | None = None,
                        frame_from: str = "camera", frame_to: str = "virtual") -> Pose:
    """Random rigid perturbation within ``bounds``.

    Rotation: uniform axis on the sphere, angle uniform on [-r, r].
    Translation: magnitude uniform on [0, t] with a uniform direction, drawn
    either on the unit sphere or, when ``planar``, on the circle orthogonal to
    ``surface_normal`` (given in the ``frame_from`` frame).
    """
    if rng is None:
        rng = np.random.default_rng()
    axis = random_unit_vector(rng)
    angle = np.radians(rng.uniform(-bounds.r_tilde, bounds.r_tilde)) if bounds.r_tilde > 0 else 0.0
    rot = rotation_from_axis_angle(axis, angle)
    mag = rng.uniform(0.0, bounds.t_tilde) if bounds.t_tilde > 0 else 0.0
    if planar:
        if surface_normal is None:
            raise ValueError("planar sampling needs a surface normal")
        e1, e2 = tangent_basis(surface_normal)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        direction = np.cos(phi) * e1 + np.sin(phi) * e2
    else:
        direction = random_unit_vector(rng)
    return Pose(rot, mag * direction, frame_from, frame_to)


def pose_error(truth: Pose, estimate: Pose) -> tuple[float, float]:
    """(translation error in metres, rotation error in degrees) of inverse(truth)*estimate."""
    if (truth.frame_from, truth.frame_to) != (estimate.frame_from, estimate.frame_to):
        raise FrameMismatchError("poses relate different frame pairs")
    d = compose(truth.inverse(), estimate)
    return float(np.linalg.norm(d.translation)), float(np.degrees(rotation_angle(d.rotation)))


def look_at(eye, target, up=(0.0, 0.0, 1.0), frame_from: str = "world",
            frame_to: str = "camera") -> Pose:
    """Camera pose at ``eye`` whose optical axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("viewing direction parallel to the up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(orthonormalize(np.column_stack([x, y, z])), eye, frame_from, frame_to)
