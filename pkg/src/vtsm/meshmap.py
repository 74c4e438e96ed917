"""Textured triangle mesh map, sampling mask, OBJ/PNG/JSON persistence and vertex visibility."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Pose, StereoRig, project_points
from .raycast import RayGrid

LUMA_601 = np.array([0.299, 0.587, 0.114])
DEGENERATE_AREA = 1e-12
OCCLUSION_TOL = 1e-6
BORDER_MARGIN = 8


class MeshFormatError(ValueError):
    """Malformed mesh file or a mesh violating its invariants."""


class NoVisiblePointsError(LookupError):
    """No sampling-mask vertex is visible from the requested viewpoint."""


class TexturedMesh:
    """Triangle mesh with per-vertex texture coordinates and per-triangle material tags.

    ``texture`` is a grayscale float32 image in [0, 1]; texture coordinate
    (s, t) maps to column ``s * (W - 1)`` and row ``(1 - t) * (H - 1)``.
    ``persistent`` flags triangles expected to survive between mapping and
    relocalization (rocks, slabs); the rest are ``mutable`` (sand).
    """

    def __init__(self, vertices, triangles, uvs=None, texture=None, persistent=None,
                 validate: bool = True):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        self.uvs = (np.zeros((n, 2)) if uvs is None
                    else np.ascontiguousarray(uvs, dtype=np.float64).reshape(-1, 2))
        if texture is None:
            texture = np.full((1, 1), 0.5, dtype=np.float32)
        self.texture = np.ascontiguousarray(texture, dtype=np.float32)
        self.persistent = (np.ones(len(self.triangles), dtype=bool) if persistent is None
                           else np.asarray(persistent, dtype=bool).copy())
        for a in (self.vertices, self.triangles, self.uvs, self.texture, self.persistent):
            a.setflags(write=False)
        if validate:
            self.validate()

    def validate(self):
        n = len(self.vertices)
        if len(self.uvs) != n:
            raise MeshFormatError("one texture coordinate per vertex required")
        if len(self.persistent) != len(self.triangles):
            raise MeshFormatError("one material tag per triangle required")
        if len(self.triangles):
            bad = np.nonzero((self.triangles < 0) | (self.triangles >= n))[0]
            if len(bad):
                raise MeshFormatError(f"triangle {bad[0]} has a vertex index out of range")
            area = self.triangle_areas
            bad = np.nonzero(area <= DEGENERATE_AREA)[0]
            if len(bad):
                raise MeshFormatError(f"triangle {bad[0]} is degenerate (area {area[bad[0]]:.3g} m^2)")
        if np.any(self.uvs < 0) or np.any(self.uvs > 1):
            raise MeshFormatError("texture coordinates outside [0, 1]")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def _corners(self):
        v = self.vertices
        f = self.triangles
        return v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]

    @cached_property
    def face_normals(self) -> np.ndarray:
        a, b, c = self._corners()
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    @cached_property
    def triangle_areas(self) -> np.ndarray:
        a, b, c = self._corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals."""
        a, b, c = self._corners()
        fn = np.cross(b - a, c - a)
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], fn)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        out = np.where(norm > 0, acc / np.maximum(norm, 1e-300), np.array([0.0, 0.0, 1.0]))
        out.setflags(write=False)
        return out

    @cached_property
    def ray_grid(self) -> RayGrid:
        return RayGrid(self.vertices, self.triangles)

    @cached_property
    def persistent_vertex(self) -> np.ndarray:
        """True for vertices touching at least one persistent triangle."""
        flag = np.zeros(self.n_vertices, dtype=bool)
        flag[self.triangles[self.persistent].ravel()] = True
        return flag

    def with_texture(self, texture) -> "TexturedMesh":
        return TexturedMesh(self.vertices, self.triangles, self.uvs, texture, self.persistent,
                            validate=False)

    def with_vertices(self, vertices) -> "TexturedMesh":
        return TexturedMesh(vertices, self.triangles, self.uvs, self.texture, self.persistent)


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Subset of a mesh's triangles used as the source of sampled map points."""

    triangles: np.ndarray
    n_parent: int

    def __post_init__(self):
        t = np.unique(np.asarray(self.triangles, dtype=np.int64))
        if len(t) and (t[0] < 0 or t[-1] >= self.n_parent):
            raise ValueError("mask references triangles outside the parent mesh")
        t.setflags(write=False)
        object.__setattr__(self, "triangles", t)

    @classmethod
    def full(cls, mesh: TexturedMesh) -> "SamplingMask":
        return cls(np.arange(mesh.n_triangles), mesh.n_triangles)

    @classmethod
    def persistent_of(cls, mesh: TexturedMesh) -> "SamplingMask":
        return cls(np.nonzero(mesh.persistent)[0], mesh.n_triangles)

    @property
    def is_full(self) -> bool:
        return len(self.triangles) == self.n_parent

    def vertex_indices(self, mesh: TexturedMesh) -> np.ndarray:
        self.check(mesh)
        return np.unique(mesh.triangles[self.triangles].ravel())

    def check(self, mesh: TexturedMesh):
        if mesh.n_triangles != self.n_parent:
            raise ValueError("mask does not belong to this mesh")

    def save(self, path):
        Path(path).write_text(json.dumps([int(i) for i in self.triangles]))

    @classmethod
    def load(cls, path, mesh: TexturedMesh) -> "SamplingMask":
        return cls(np.asarray(json.loads(Path(path).read_text()), dtype=np.int64), mesh.n_triangles)


@dataclass(frozen=True, eq=False)
class MapPoint:
    position: np.ndarray
    index: int
    normal: np.ndarray


def _map_point(mesh: TexturedMesh, i: int) -> MapPoint:
    return MapPoint(mesh.vertices[i].copy(), int(i), mesh.vertex_normals[i].copy())


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _texture_to_gray(img: Image.Image) -> np.ndarray:
    a = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return (a @ LUMA_601).astype(np.float32)


def load_mesh(path) -> TexturedMesh:
    """Read the OBJ subset (v, vt, f v/vt, o groups) plus its ``{texture: path}`` sidecar."""
    path = Path(path)
    verts, tex, faces, tags = [], [], [], []
    tag = True
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            key = parts[0]
            try:
                if key == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs three coordinates")
                elif key == "vt":
                    tex.append([float(x) for x in parts[1:3]])
                    if len(parts) < 3:
                        raise ValueError("texture coordinate needs two values")
                elif key in ("o", "g"):
                    name = parts[1].lower() if len(parts) > 1 else ""
                    tag = not name.startswith("mutable")
                elif key == "f":
                    if len(parts) != 4:
                        raise ValueError("only triangular faces are supported")
                    face = []
                    for p in parts[1:]:
                        ids = p.split("/")
                        vi = int(ids[0])
                        ti = int(ids[1]) if len(ids) > 1 and ids[1] else vi
                        face.append((vi, ti))
                    faces.append((face, lineno))
                    tags.append(tag)
                elif key in ("vn", "s", "mtllib", "usemtl", "l"):
                    continue
                else:
                    raise ValueError(f"unsupported statement {key!r}")
            except ValueError as exc:
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from None

    nv, nt = len(verts), len(tex)
    corners = []
    for fi, (face, lineno) in enumerate(faces):
        tri = []
        for vi, ti in face:
            vi = vi - 1 if vi > 0 else nv + vi
            ti = ti - 1 if ti > 0 else nt + ti
            if not 0 <= vi < nv:
                raise MeshFormatError(f"{path}:{lineno}: face {fi} references vertex out of range")
            if nt and not 0 <= ti < nt:
                raise MeshFormatError(f"{path}:{lineno}: face {fi} references texture coordinate "
                                      "out of range")
            tri.append((vi, ti))
        corners.append(tri)
    vt_of = {}
    consistent = True
    for tri in corners:
        for vi, ti in tri:
            if vt_of.setdefault(vi, ti) != ti:
                consistent = False
    if consistent:
        out_v = verts
        out_t = [tex[vt_of[i]] if (nt and i in vt_of) else (tex[i] if i < nt else (0.0, 0.0))
                 for i in range(nv)]
        tris = [[vi for vi, _ in tri] for tri in corners]
    else:
        # vertices carrying several texture coordinates are duplicated
        key_to_index: dict[tuple[int, int], int] = {}
        out_v, out_t, tris = [], [], []
        for tri in corners:
            row = []
            for vi, ti in tri:
                if (vi, ti) not in key_to_index:
                    key_to_index[(vi, ti)] = len(out_v)
                    out_v.append(verts[vi])
                    out_t.append(tex[ti])
                row.append(key_to_index[(vi, ti)])
            tris.append(row)

    texture = None
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("texture"):
            texture = _texture_to_gray(Image.open(path.parent / meta["texture"]))
    try:
        return TexturedMesh(np.array(out_v, dtype=np.float64).reshape(-1, 3),
                            np.array(tris, dtype=np.int64).reshape(-1, 3),
                            np.array(out_t, dtype=np.float64).reshape(-1, 2), texture,
                            np.array(tags, dtype=bool))
    except MeshFormatError as exc:
        raise MeshFormatError(f"{path}: {exc}") from None


def load_texture(path) -> np.ndarray:
    return _texture_to_gray(Image.open(path))


def save_texture(texture, path):
    g = np.clip(np.round(np.asarray(texture, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(np.repeat(g[:, :, None], 3, axis=2), mode="RGB").save(path)


def quantize_texture(texture) -> np.ndarray:
    """Round-trip through 8-bit RGB exactly as save/load would."""
    g = np.clip(np.round(np.asarray(texture, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    rgb = np.repeat(g[:, :, None], 3, axis=2).astype(np.float64) / 255.0
    return (rgb @ LUMA_601).astype(np.float32)


def save_mesh(mesh: TexturedMesh, path, texture_name: str | None = None):
    """Write OBJ (+ PNG texture and JSON sidecar). Floats use repr so they round-trip exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# vtsm mesh"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {s!r} {t!r}" for s, t in mesh.uvs.tolist()]
    current = None
    for k, (a, b, c) in enumerate((mesh.triangles + 1).tolist()):
        tag = "persistent" if mesh.persistent[k] else "mutable"
        if tag != current:
            lines.append(f"o {tag}_{k}")
            current = tag
        lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
    path.write_text("\n".join(lines) + "\n")
    if texture_name is None:
        texture_name = path.stem + ".png"
    save_texture(mesh.texture, path.parent / texture_name)
    path.with_suffix(".json").write_text(json.dumps({"texture": texture_name}))


# ---------------------------------------------------------------------------
# Visibility and sampling
# ---------------------------------------------------------------------------

def _camera_frame(viewpoint: Pose, points):
    return (np.asarray(points) - viewpoint.translation) @ viewpoint.rotation


def _candidates(mesh: TexturedMesh, idx: np.ndarray, viewpoint: Pose, rig: StereoRig,
                template_size: int, margin: int):
    """Mask vertices that fit a template in both images and face the camera."""
    pw = mesh.vertices[idx]
    pc = _camera_frame(viewpoint, pw)
    keep = pc[:, 2] > rig.near
    lim = template_size / 2 + margin
    for side in ("left", "right"):
        u, v, _ = project_points(pc, rig, side)
        keep &= (u >= lim) & (u <= rig.rows - 1 - lim) & (v >= lim) & (v <= rig.cols - 1 - lim)
    view = pw - viewpoint.translation
    keep &= np.einsum("ij,ij->i", mesh.vertex_normals[idx], view) < 0
    return idx[keep]


def _unoccluded(mesh: TexturedMesh, idx: np.ndarray, viewpoint: Pose) -> np.ndarray:
    if len(idx) == 0:
        return np.zeros(0, dtype=bool)
    o = viewpoint.translation
    d = mesh.vertices[idx] - o
    dist = np.linalg.norm(d, axis=1)
    d = d / dist[:, None]
    return ~mesh.ray_grid.occluded(o, d, 1e-9, dist - OCCLUSION_TOL)


def visible_mask_vertices(mesh: TexturedMesh, mask: SamplingMask, viewpoint: Pose,
                          rig: StereoRig, template_size: int = 128,
                          margin: int = BORDER_MARGIN) -> list[MapPoint]:
    """Mask vertices usable as template centres from ``viewpoint`` (a world->camera pose).

    A vertex qualifies when a full template around it fits inside both images,
    its normal faces the camera, and no triangle of the full mesh lies on the
    segment from the camera centre to it.
    """
    mask.check(mesh)
    idx = _candidates(mesh, mask.vertex_indices(mesh), viewpoint, rig, template_size, margin)
    idx = idx[_unoccluded(mesh, idx, viewpoint)]
    return [_map_point(mesh, i) for i in idx]


def sample_point(visible: list[MapPoint], rng: np.random.Generator) -> MapPoint:
    if not visible:
        raise NoVisiblePointsError("no visible mask vertices")
    return visible[int(rng.integers(len(visible)))]


class VisibleSampler:
    """Draws uniformly from ``visible_mask_vertices`` without computing the whole set.

    Candidates passing the cheap frame/facing tests are drawn uniformly and
    only the drawn vertex is ray-cast; occluded draws are discarded and the
    draw repeated, which leaves the result uniform over the visible set.
    """

    def __init__(self, mesh: TexturedMesh, mask: SamplingMask, template_size: int = 128,
                 margin: int = BORDER_MARGIN):
        self.mesh = mesh
        self.mask_vertices = mask.vertex_indices(mesh)
        self.template_size = template_size
        self.margin = margin

    def sample(self, viewpoint: Pose, rig: StereoRig, rng: np.random.Generator) -> MapPoint:
        idx = _candidates(self.mesh, self.mask_vertices, viewpoint, rig, self.template_size,
                          self.margin)
        alive = np.ones(len(idx), dtype=bool)
        n_alive = len(idx)
        while n_alive:
            j = int(rng.integers(n_alive))
            pos = int(np.flatnonzero(alive)[j])
            i = idx[pos]
            if _unoccluded(self.mesh, np.array([i]), viewpoint)[0]:
                return _map_point(self.mesh, i)
            alive[pos] = False
            n_alive -= 1
        raise NoVisiblePointsError("no visible mask vertices")
