"""Software rendering of intensity/depth patches and frames, and template pixel validity."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ._raster import rasterize
from .geometry import Pose, Side, StereoRig, project_points
from .meshmap import MapPoint, SamplingMask, TexturedMesh

BACKGROUND = 0.0
SHADOW_OFFSET = 1e-3


@dataclass(frozen=True)
class ShadingSpec:
    """Directional sun light: Lambertian term plus ambient, optional hard cast shadows.

    ``sun_direction`` is a world-frame vector pointing toward the sun.
    """

    sun_direction: tuple
    ambient: float = 0.3
    cast_shadows: bool = True

    def __post_init__(self):
        s = np.asarray(self.sun_direction, dtype=np.float64)
        s = s / np.linalg.norm(s)
        if s[2] <= 0:
            raise ValueError("sun must be above the horizon")
        if not 0.0 <= self.ambient <= 1.0:
            raise ValueError("ambient fraction must lie in [0, 1]")
        object.__setattr__(self, "sun_direction", tuple(float(x) for x in s))

    @classmethod
    def from_angles(cls, elevation_deg: float, azimuth_deg: float, ambient: float = 0.3,
                    cast_shadows: bool = True) -> "ShadingSpec":
        el, az = np.radians(elevation_deg), np.radians(azimuth_deg)
        d = (np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el))
        return cls(d, ambient, cast_shadows)

    def to_dict(self) -> dict:
        return {"sun_direction": list(self.sun_direction), "ambient": self.ambient,
                "cast_shadows": self.cast_shadows}

    @classmethod
    def from_dict(cls, d: dict) -> "ShadingSpec":
        if "elevation" in d:
            return cls.from_angles(d["elevation"], d["azimuth"], d.get("ambient", 0.3),
                                   d.get("cast_shadows", True))
        return cls(tuple(d["sun_direction"]), d.get("ambient", 0.3), d.get("cast_shadows", True))


@dataclass(frozen=True, eq=False)
class Patch:
    """Square template rendered around a map point.

    Pixel (i, j) of the patch is pixel ``(anchor_u - size//2 + i, anchor_v - size//2 + j)``
    of the virtual full frame, so the anchor sits at index ``size // 2``.
    ``offset`` is the sub-pixel position of the map point relative to the anchor.
    """

    size: int
    anchor_u: int
    anchor_v: int
    intensity: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    offset: tuple = (0.0, 0.0)
    side: str = "left"

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


@dataclass(frozen=True, eq=False)
class RenderedFrame:
    intensity: np.ndarray
    depth: np.ndarray
    pose: Pose
    rig: StereoRig
    side: str = "left"


@dataclass
class GBuffer:
    depth: np.ndarray
    bary: np.ndarray
    owner: np.ndarray
    origin: tuple = field(default=(0, 0))


def camera_vertices(mesh: TexturedMesh, viewpoint: Pose, rig: StereoRig, side: Side) -> np.ndarray:
    """Mesh vertices in the ``side`` camera frame of a world->camera pose."""
    pc = (mesh.vertices - viewpoint.translation) @ viewpoint.rotation
    pc[:, 0] -= rig.side_offset(side)
    return np.ascontiguousarray(pc)


def rasterize_window(mesh: TexturedMesh, viewpoint: Pose, rig: StereoRig, side: Side,
                     window: tuple[int, int, int, int], triangles=None) -> GBuffer:
    """Z-buffer pass over rows [r0, r0+h) and columns [c0, c0+w)."""
    r0, c0, h, w = (int(x) for x in window)
    subset = (np.arange(mesh.n_triangles, dtype=np.int64) if triangles is None
              else np.ascontiguousarray(triangles, dtype=np.int64))
    if mesh.n_vertices == 0 or len(subset) == 0:
        return GBuffer(np.full((h, w), np.inf), np.zeros((h, w, 3)),
                       np.full((h, w), -1, dtype=np.int64), (r0, c0))
    pc = camera_vertices(mesh, viewpoint, rig, side)
    depth, bary, owner = rasterize(pc, mesh.triangles, subset, float(rig.focal), float(rig.cu),
                                   float(rig.cv), float(rig.near), float(rig.far), r0, c0, h, w)
    return GBuffer(depth, bary, owner, (r0, c0))


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup with edge clamping; ``uv`` is (N, 2) in [0, 1]^2."""
    th, tw = texture.shape
    x = np.clip(uv[:, 0], 0.0, 1.0) * (tw - 1)
    y = (1.0 - np.clip(uv[:, 1], 0.0, 1.0)) * (th - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(tw - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(th - 2, 0))
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    fx = x - x0
    fy = y - y0
    t = texture.astype(np.float64, copy=False)
    # a + f (b - a) reproduces a constant texture exactly
    top = t[y0, x0] + fx * (t[y0, x1] - t[y0, x0])
    bot = t[y1, x0] + fx * (t[y1, x1] - t[y1, x0])
    return top + fy * (bot - top)


def _interp(gb: GBuffer, mesh: TexturedMesh, attr: np.ndarray, covered) -> np.ndarray:
    tri = mesh.triangles[gb.owner[covered]]
    b = gb.bary[covered]
    return (b[:, 0:1] * attr[tri[:, 0]] + b[:, 1:2] * attr[tri[:, 1]] + b[:, 2:3] * attr[tri[:, 2]])


def surface_points(gb: GBuffer, viewpoint: Pose, rig: StereoRig, side: Side, covered) -> np.ndarray:
    """World coordinates of the surface seen at covered pixels."""
    rr, cc = np.nonzero(covered)
    z = gb.depth[covered]
    r0, c0 = gb.origin
    x = (cc + c0 - rig.cv) / rig.focal * z + rig.side_offset(side)
    y = (rr + r0 - rig.cu) / rig.focal * z
    return np.column_stack([x, y, z]) @ viewpoint.rotation.T + viewpoint.translation


def shade(mesh: TexturedMesh, normals: np.ndarray, points: np.ndarray,
          shading: ShadingSpec) -> np.ndarray:
    """Per-point shading factor ambient + (1 - ambient) * max(0, n.s) * lit."""
    s = np.asarray(shading.sun_direction)
    n = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-300)
    lam = np.maximum(0.0, n @ s)
    if shading.cast_shadows and len(points):
        lit = lam > 0
        if np.any(lit):
            origins = points[lit] + SHADOW_OFFSET * n[lit]
            blocked = mesh.ray_grid.occluded(origins, np.broadcast_to(s, origins.shape), 1e-6, np.inf)
            lam_lit = lam[lit]
            lam_lit[blocked] = 0.0
            lam[lit] = lam_lit
    return shading.ambient + (1.0 - shading.ambient) * lam


def shade_gbuffer(mesh: TexturedMesh, gb: GBuffer, viewpoint: Pose, rig: StereoRig, side: Side,
                  shading: ShadingSpec | None) -> np.ndarray:
    intensity = np.full(gb.depth.shape, BACKGROUND)
    covered = gb.owner >= 0
    if not np.any(covered):
        return intensity
    value = sample_texture(mesh.texture, _interp(gb, mesh, mesh.uvs, covered))
    if shading is not None:
        normals = _interp(gb, mesh, mesh.vertex_normals, covered)
        value = value * shade(mesh, normals, surface_points(gb, viewpoint, rig, side, covered),
                              shading)
    intensity[covered] = np.clip(value, 0.0, 1.0)
    return intensity


def render_window(mesh: TexturedMesh, viewpoint: Pose, rig: StereoRig, side: Side, window,
                  shading: ShadingSpec | None = None, triangles=None):
    gb = rasterize_window(mesh, viewpoint, rig, side, window, triangles)
    return shade_gbuffer(mesh, gb, viewpoint, rig, side, shading), gb.depth


def render_frame(mesh: TexturedMesh, viewpoint: Pose, rig: StereoRig, side: Side = "left",
                 shading: ShadingSpec | None = None) -> RenderedFrame:
    intensity, depth = render_window(mesh, viewpoint, rig, side, (0, 0, rig.rows, rig.cols), shading)
    return RenderedFrame(intensity, depth, viewpoint, rig, side)


def patch_window(center: MapPoint, viewpoint: Pose, rig: StereoRig, side: Side, size: int):
    """Integer anchor, sub-pixel offset and window of a template around ``center``."""
    pc = (center.position - viewpoint.translation) @ viewpoint.rotation
    if pc[2] <= rig.near:
        raise ValueError("template centre is not in front of the camera")
    u, v, _ = project_points(pc, rig, side)
    u, v = float(u[0]), float(v[0])
    au, av = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
    half = size // 2
    r0, c0 = au - half, av - half
    if r0 < 0 or c0 < 0 or r0 + size > rig.rows or c0 + size > rig.cols:
        raise ValueError("template window leaves the image")
    return (au, av), (u - au, v - av), (r0, c0, size, size)


def render_patch(mesh: TexturedMesh, viewpoint: Pose, rig: StereoRig, side: Side,
                 center: MapPoint, size: int, shading: ShadingSpec | None = None) -> Patch:
    """Full-mesh template centred on ``center``; every covered pixel is flagged valid."""
    (au, av), offset, window = patch_window(center, viewpoint, rig, side, size)
    intensity, depth = render_window(mesh, viewpoint, rig, side, window, shading)
    return Patch(size, au, av, intensity, depth, np.isfinite(depth), offset, side)


def compute_validity(full_depth: np.ndarray, masked_depth: np.ndarray, depth_tol: float = 1e-3,
                     edge_jump: float = 0.05, radius: int = 16) -> np.ndarray:
    """Template pixels usable for matching.

    Kept are pixels whose surface belongs to the mask (masked depth present
    and equal to the full-mesh depth), plus background pixels lying behind a
    depth discontinuity next to such a region: pixels without masked depth
    that are more than ``edge_jump`` deeper than some mask pixel within a
    ``(2 * radius + 1)``-square neighbourhood.
    """
    full = np.asarray(full_depth, dtype=np.float64)
    masked = np.asarray(masked_depth, dtype=np.float64)
    both = np.isfinite(masked) & np.isfinite(full)
    diff = np.full(full.shape, np.inf)
    np.subtract(masked, full, out=diff, where=both)
    rule1 = both & (np.abs(diff) <= depth_tol)
    if not np.any(rule1):
        return rule1
    fg = np.where(rule1, full, np.inf)
    size = 2 * int(radius) + 1
    near_fg = ndimage.minimum_filter(fg, size=size, mode="constant", cval=np.inf)
    behind = ~np.isfinite(masked) & np.isfinite(full) & np.isfinite(near_fg)
    jump = np.zeros(full.shape)
    np.subtract(full, near_fg, out=jump, where=behind)
    rule2 = ~rule1 & behind & (jump > edge_jump)
    return rule1 | rule2


def synthesize_template(mesh: TexturedMesh, mask: SamplingMask, viewpoint: Pose, rig: StereoRig,
                        side: Side, center: MapPoint, size: int,
                        shading: ShadingSpec | None = None, depth_tol: float = 1e-3,
                        edge_jump: float = 0.05, radius: int | None = None) -> Patch:
    """Render a template from the full mesh and flag valid pixels against the mask."""
    patch = render_patch(mesh, viewpoint, rig, side, center, size, shading)
    if mask.is_full:
        return patch
    window = (patch.anchor_u - size // 2, patch.anchor_v - size // 2, size, size)
    masked = rasterize_window(mesh, viewpoint, rig, side, window, mask.triangles).depth
    r = size // 8 if radius is None else radius
    valid = compute_validity(patch.depth, masked, depth_tol, edge_jump, r)
    return Patch(size, patch.anchor_u, patch.anchor_v, patch.intensity, patch.depth, valid,
                 patch.offset, side)


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path):
    g = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(g, mode="L").save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


def save_depth(depth: np.ndarray, path):
    """Raw little-endian float32 plus a JSON header next to it."""
    path = Path(path)
    d = np.asarray(depth, dtype="<f4")
    path.write_bytes(d.tobytes())
    path.with_suffix(".json").write_text(json.dumps({"rows": int(d.shape[0]), "cols": int(d.shape[1]),
                                                     "units": "m"}))


def load_depth(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["rows"], meta["cols"]).astype(np.float64)
