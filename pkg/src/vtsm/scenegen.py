"""Procedural depot-analog scenes: height-field terrain with rocks or flagstone slabs,
procedural albedo texture, sampling mask, lighting presets and relit query imagery."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geometry import Pose, StereoRig, look_at, orthonormalize
from .meshmap import SamplingMask, TexturedMesh, load_mesh, load_texture, \
    quantize_texture, save_mesh, save_texture
from .renderer import RenderedFrame, ShadingSpec, render_frame, shade

KINDS = ("flagstone", "cfa6", "cfa2")
DEFAULT_DENSITY = {"flagstone": 0.0, "cfa6": 0.06, "cfa2": 0.02}

# sun elevation/azimuth (degrees) for the morning, noon and afternoon analogs
SUN_PRESETS = {"am": (30.0, 90.0), "nn": (75.0, 180.0), "pm": (30.0, 270.0)}
TIME_DIFFERENCE = {"0h": "am", "3h": "nn", "6h": "pm"}


class SceneGenerationError(RuntimeError):
    pass


def sun(name: str, ambient: float = 0.3, cast_shadows: bool = True) -> ShadingSpec:
    el, az = SUN_PRESETS[name]
    return ShadingSpec.from_angles(el, az, ambient, cast_shadows)


@dataclass(frozen=True)
class TerrainSpec:
    kind: str = "cfa6"
    extent: float = 8.0
    resolution: float = 0.05
    density: float | None = None
    fracture_density: float = 0.6
    texture_size: int = 2048
    roughness: float = 0.015
    texture_contrast: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"terrain kind must be one of {KINDS}")
        if not self.extent > 0 or not self.resolution > 0:
            raise ValueError("extent and resolution must be positive")
        if not 0.0 <= self.rock_density <= 0.2:
            raise ValueError("rock density must lie in [0, 0.2]")

    @property
    def rock_density(self) -> float:
        return DEFAULT_DENSITY[self.kind] if self.density is None else float(self.density)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TerrainSpec":
        return cls(**d)


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    s = n.std()
    return n / s if s > 0 else n


def _grid(spec: TerrainSpec):
    n = int(round(spec.extent / spec.resolution)) + 1
    xs = np.linspace(-spec.extent / 2, spec.extent / 2, n)
    return n, xs


def _triangulate(n: int):
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1))
    a = (j * n + i).ravel()
    b = a + 1
    c = a + n + 1
    d = a + n
    return np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)]).astype(np.int64)


def _hard_cells(flag: np.ndarray) -> float:
    """Number of grid cells (two triangles each) covered by vertex-majority tagged triangles."""
    a, b = flag[:-1, :-1].astype(int), flag[:-1, 1:].astype(int)
    c, d = flag[1:, 1:].astype(int), flag[1:, :-1].astype(int)
    return 0.5 * float(((a + b + c) >= 2).sum() + ((a + c + d) >= 2).sum())


def _place_rocks(spec, rng, xx, yy, height, label, rock_id):
    """Add convex rock bumps until the tagged footprint reaches the target density."""
    target = spec.rock_density
    if target <= 0:
        return
    n = xx.shape[0]
    cell = spec.resolution ** 2
    total = spec.extent ** 2
    half = spec.extent / 2
    covered = 0.0
    rid = 0
    for _ in range(20000):
        if covered / total >= target:
            return
        r = rng.uniform(0.10, 0.28)
        aspect = rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        cx, cy = rng.uniform(-half + 0.4, half - 0.4, size=2)
        h = r * rng.uniform(0.35, 0.7)
        i0 = max(0, int((cx - r - xx[0, 0]) / spec.resolution) - 1)
        i1 = min(n, int((cx + r - xx[0, 0]) / spec.resolution) + 2)
        j0 = max(0, int((cy - r - yy[0, 0]) / spec.resolution) - 1)
        j1 = min(n, int((cy + r - yy[0, 0]) / spec.resolution) + 2)
        sx, sy = xx[j0:j1, i0:i1] - cx, yy[j0:j1, i0:i1] - cy
        ca, sa = np.cos(theta), np.sin(theta)
        e = ((ca * sx + sa * sy) / r) ** 2 + ((-sa * sx + ca * sy) / (aspect * r)) ** 2
        foot = e < 1.0
        if foot.sum() < 4 or np.any(label[j0:j1, i0:i1][ndimage.binary_dilation(foot)] == 1):
            continue
        bump = h * np.sqrt(np.clip(1.0 - e, 0.0, None)) ** 0.8
        bump *= 1.0 + 0.15 * rng.standard_normal(bump.shape)
        label[j0:j1, i0:i1][foot] = 1
        grown = _hard_cells(label == 1) * cell
        if grown / total > target * 1.05:
            # overshoots the target; undo and try a smaller rock
            label[j0:j1, i0:i1][foot] = 0
            continue
        sub = height[j0:j1, i0:i1]
        sub[foot] = np.maximum(sub[foot], sub[foot] + np.maximum(bump[foot], 0.0))
        rock_id[j0:j1, i0:i1][foot] = rid
        rid += 1
        covered = grown
    if covered / total < target:
        raise SceneGenerationError(f"rock density {target} unreachable within placement budget")


def _flagstone(spec, rng, xx, yy, height, label, rock_id):
    """Voronoi slabs raised above sand-filled fractures."""
    count = max(2, int(round(spec.fracture_density * spec.extent ** 2)))
    half = spec.extent / 2
    seeds = rng.uniform(-half, half, size=(count, 2))
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    d, k = cKDTree(seeds).query(pts, k=2)
    # distance to the bisector between the two nearest seeds
    s1, s2 = seeds[k[:, 0]], seeds[k[:, 1]]
    gap = (d[:, 1] ** 2 - d[:, 0] ** 2) / (2.0 * np.linalg.norm(s2 - s1, axis=1))
    slab = (gap > 0.04).reshape(xx.shape)
    offs = rng.uniform(0.03, 0.09, size=count)
    tilt = rng.normal(0.0, 0.015, size=(count, 2))
    sid = k[:, 0].reshape(xx.shape)
    lift = offs[sid] + tilt[sid, 0] * (xx - seeds[sid, 0]) + tilt[sid, 1] * (yy - seeds[sid, 1])
    height += np.where(slab, np.maximum(lift, 0.02), 0.0)
    label[slab] = 2
    rock_id[slab] = sid[slab]


def _texture(spec, rng, vertex_label, vertex_rock):
    """Albedo with per-material statistics, sampled on the texel grid."""
    size = spec.texture_size
    n = vertex_label.shape[0]
    t = np.linspace(0.0, n - 1, size)
    # texel row 0 is the +y edge of the terrain
    rows = (n - 1) - t
    cc, rr = np.meshgrid(t, rows)
    lab = ndimage.map_coordinates(vertex_label, [rr, cc], order=0, mode="nearest")
    rid = ndimage.map_coordinates(vertex_rock, [rr, cc], order=0, mode="nearest")
    texel = spec.extent / size  # metres per texel
    # band-limited: the finest detail spans a few texels so it survives resampling
    fine = _smooth_noise(rng, (size, size), 0.006 / texel)
    mid = _smooth_noise(rng, (size, size), 0.015 / texel)
    coarse = _smooth_noise(rng, (size, size), 0.08 / texel)
    k = spec.texture_contrast
    sand = 0.62 + k * (0.05 * fine + 0.05 * mid + 0.04 * coarse)
    shade_r = rng.uniform(-0.08, 0.08, size=max(int(rid.max()) + 1, 1))
    rock = 0.45 + shade_r[rid] + k * (0.08 * fine + 0.12 * mid + 0.06 * coarse)
    slab = 0.52 + 0.6 * shade_r[rid] + k * (0.06 * fine + 0.05 * mid + 0.05 * coarse)
    albedo = np.where(lab == 1, rock, np.where(lab == 2, slab, sand))
    return np.clip(albedo, 0.03, 0.97)


def generate_depot(spec: TerrainSpec) -> tuple[TexturedMesh, SamplingMask]:
    """Terrain mesh with an albedo texture and its sampling mask.

    Rocks (cfa kinds) and slabs (flagstone) are tagged persistent. The base
    terrain is mutable except for cfa2, whose mask is the whole mesh.
    """
    rng = np.random.default_rng(spec.seed)
    n, xs = _grid(spec)
    xx, yy = np.meshgrid(xs, xs)
    height = spec.roughness * (0.6 * _smooth_noise(rng, (n, n), 0.6 / spec.resolution)
                               + 0.4 * _smooth_noise(rng, (n, n), 0.1 / spec.resolution))
    label = np.zeros((n, n), dtype=np.int64)  # 0 sand, 1 rock, 2 slab
    rock_id = np.zeros((n, n), dtype=np.int64)
    if spec.kind == "flagstone":
        _flagstone(spec, rng, xx, yy, height, label, rock_id)
    _place_rocks(spec, rng, xx, yy, height, label, rock_id)

    verts = np.column_stack([xx.ravel(), yy.ravel(), height.ravel()])
    tris = _triangulate(n)
    hard = (label.ravel()[tris] > 0).sum(axis=1) >= 2
    base_persistent = spec.kind == "cfa2"
    persistent = hard | base_persistent
    uvs = np.column_stack([(verts[:, 0] + spec.extent / 2) / spec.extent,
                           (verts[:, 1] + spec.extent / 2) / spec.extent])
    albedo = quantize_texture(_texture(spec, rng, label.astype(np.float64), rock_id))
    mesh = TexturedMesh(verts, tris, np.clip(uvs, 0.0, 1.0), albedo, persistent)
    mask = SamplingMask.full(mesh) if spec.kind == "cfa2" else SamplingMask.persistent_of(mesh)
    return mesh, mask


def rock_fraction(mesh: TexturedMesh, extent: float) -> float:
    """Footprint (XY) area of persistent triangles over the terrain area."""
    v = mesh.vertices[mesh.triangles[mesh.persistent]][:, :, :2]
    a = 0.5 * np.abs((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
                     - (v[:, 2, 0] - v[:, 0, 0]) * (v[:, 1, 1] - v[:, 0, 1]))
    return float(a.sum() / extent ** 2)


def surface_under(mesh: TexturedMesh, xy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vertical ray cast: surface points, interpolated normals and hit mask under XY positions."""
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    top = mesh.vertices[:, 2].max() + 1.0
    origins = np.column_stack([xy, np.full(len(xy), top)])
    t, k = mesh.ray_grid.closest(origins, np.array([[0.0, 0.0, -1.0]]).repeat(len(xy), 0))
    hit = k >= 0
    pts = origins.copy()
    pts[:, 2] = top - np.where(hit, t, np.inf)
    normals = np.tile([0.0, 0.0, 1.0], (len(xy), 1))
    if np.any(hit):
        tri = mesh.triangles[k[hit]]
        a, b, c = (mesh.vertices[tri[:, i]] for i in range(3))
        p = pts[hit]
        v0, v1, v2 = b - a, c - a, p - a
        d00 = np.einsum("ij,ij->i", v0, v0)
        d01 = np.einsum("ij,ij->i", v0, v1)
        d11 = np.einsum("ij,ij->i", v1, v1)
        d20 = np.einsum("ij,ij->i", v2, v0)
        d21 = np.einsum("ij,ij->i", v2, v1)
        den = d00 * d11 - d01 * d01
        w1 = (d11 * d20 - d01 * d21) / den
        w2 = (d00 * d21 - d01 * d20) / den
        w0 = 1.0 - w1 - w2
        vn = mesh.vertex_normals
        normals[hit] = (w0[:, None] * vn[tri[:, 0]] + w1[:, None] * vn[tri[:, 1]]
                        + w2[:, None] * vn[tri[:, 2]])
    return pts, normals, hit


def bake_texture(mesh: TexturedMesh, shading: ShadingSpec, extent: float,
                 chunk: int = 1 << 18) -> TexturedMesh:
    """Mesh whose texture is the albedo lit by ``shading`` (mapping-time appearance).

    Requires the planar texture mapping produced by :func:`generate_depot`.
    """
    th, tw = mesh.texture.shape
    cols = np.arange(tw) / max(tw - 1, 1) * extent - extent / 2
    rows = (1.0 - np.arange(th) / max(th - 1, 1)) * extent - extent / 2
    out = np.empty((th, tw), dtype=np.float64)
    xx, yy = np.meshgrid(cols, rows)
    flat_xy = np.column_stack([xx.ravel(), yy.ravel()])
    alb = mesh.texture.astype(np.float64).ravel()
    flat = out.ravel()
    for s in range(0, len(flat_xy), chunk):
        pts, nrm, hit = surface_under(mesh, flat_xy[s:s + chunk])
        f = np.full(len(pts), shading.ambient)
        if np.any(hit):
            f[hit] = shade(mesh, nrm[hit], pts[hit], shading)
        flat[s:s + chunk] = alb[s:s + chunk] * f
    return mesh.with_texture(quantize_texture(np.clip(out, 0.0, 1.0)))


def render_query_pair(mesh: TexturedMesh, rig: StereoRig, pose: Pose,
                      shading: ShadingSpec | None) -> tuple[RenderedFrame, RenderedFrame]:
    """Left and right frames of the albedo mesh lit by ``shading``."""
    return (render_frame(mesh, pose, rig, "left", shading),
            render_frame(mesh, pose, rig, "right", shading))


def perturb_mutable(mesh: TexturedMesh, magnitude: float, rng: np.random.Generator,
                    wavelength: tuple[float, float] = (0.3, 1.5)) -> TexturedMesh:
    """Displace vertices touching only mutable triangles vertically by a smooth field.

    The field is a sum of random plane waves rescaled to an RMS of ``magnitude``
    over the displaced vertices.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    movable = ~mesh.persistent_vertex
    if magnitude == 0 or not np.any(movable):
        return mesh
    xy = mesh.vertices[movable, :2]
    field = np.zeros(len(xy))
    for _ in range(12):
        lam = rng.uniform(*wavelength)
        ang = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / lam * np.array([np.cos(ang), np.sin(ang)])
        field += np.sin(xy @ k + rng.uniform(0, 2 * np.pi))
    rms = np.sqrt(np.mean(field ** 2))
    v = mesh.vertices.copy()
    v[movable, 2] += field * (magnitude / rms)
    return mesh.with_vertices(v)


def ground_height(mesh: TexturedMesh, x: float, y: float) -> float:
    pts, _, hit = surface_under(mesh, [[x, y]])
    return float(pts[0, 2]) if hit[0] else 0.0


def ring_viewpoints(mesh: TexturedMesh, count: int, radius: float = 2.5, height: float = 2.0,
                    pitch_deg: float = 45.0, phase_deg: float = 0.0) -> list[Pose]:
    """Camera poses on a circle around the origin looking inward and down at ``pitch_deg``."""
    poses = []
    for k in range(count):
        a = np.radians(phase_deg) + 2 * np.pi * k / count
        x, y = radius * np.cos(a), radius * np.sin(a)
        eye = np.array([x, y, ground_height(mesh, x, y) + height])
        fwd = np.array([-np.cos(a), -np.sin(a), 0.0])
        target = eye + fwd + np.array([0.0, 0.0, -np.tan(np.radians(pitch_deg))])
        poses.append(look_at(eye, target))
    return poses


def jitter_pose(pose: Pose, translation: float, rotation_deg: float,
                rng: np.random.Generator) -> Pose:
    """Pose displaced by a random horizontal offset and a random yaw."""
    ang = rng.uniform(0, 2 * np.pi)
    off = rng.uniform(0, translation) * np.array([np.cos(ang), np.sin(ang), 0.0])
    yaw = np.radians(rng.uniform(-rotation_deg, rotation_deg))
    rz = np.array([[np.cos(yaw), -np.sin(yaw), 0.0], [np.sin(yaw), np.cos(yaw), 0.0], [0, 0, 1.0]])
    return Pose(orthonormalize(rz @ pose.rotation), pose.translation + off, pose.frame_from,
                pose.frame_to)


def degrade_map(mesh: TexturedMesh, factor: float) -> TexturedMesh:
    """Lower-fidelity map: texture blurred and geometry smoothed by ``factor`` >= 1."""
    if factor <= 1.0:
        return mesh
    tex = ndimage.gaussian_filter(mesh.texture.astype(np.float64), sigma=0.8 * (factor - 1.0),
                                  mode="nearest")
    n = int(round(np.sqrt(mesh.n_vertices)))
    v = mesh.vertices.copy()
    if n * n == mesh.n_vertices:
        z = v[:, 2].reshape(n, n)
        v[:, 2] = ndimage.gaussian_filter(z, sigma=0.5 * (factor - 1.0), mode="nearest").ravel()
    return TexturedMesh(v, mesh.triangles, mesh.uvs, quantize_texture(tex), mesh.persistent)


def preset(kind: str, **overrides) -> TerrainSpec:
    return replace(TerrainSpec(kind=kind), **overrides)


def shading_from(value) -> ShadingSpec:
    """ShadingSpec from a preset name, a dict (with optional ``preset`` key) or a spec."""
    if isinstance(value, ShadingSpec):
        return value
    if isinstance(value, str):
        return sun(value)
    d = dict(value)
    if "preset" in d:
        name = d.pop("preset")
        return sun(name, d.get("ambient", 0.3), d.get("cast_shadows", True))
    return ShadingSpec.from_dict(d)


@dataclass(eq=False)
class Scene:
    """A generated depot: the map (baked texture) and the ground truth (albedo) meshes.

    Both share connectivity; ``truth`` may differ in geometry when the map was degraded.
    """

    spec: TerrainSpec
    mapping: ShadingSpec
    map_mesh: TexturedMesh
    truth: TexturedMesh
    mask: SamplingMask
    degrade: float = 1.0


def build_scene(spec: TerrainSpec, mapping="am", degrade: float = 1.0) -> Scene:
    mapping = shading_from(mapping)
    mesh, mask = generate_depot(spec)
    baked = bake_texture(mesh, mapping, spec.extent)
    return Scene(spec, mapping, degrade_map(baked, degrade), mesh, mask, degrade)


def save_scene(scene: Scene, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(scene.map_mesh, out / "mesh.obj", "map.png")
    save_texture(scene.truth.texture, out / "albedo.png")
    meta = {"terrain": scene.spec.to_dict(), "mapping": scene.mapping.to_dict(),
            "degrade": scene.degrade, "mesh": "mesh.obj", "albedo": "albedo.png",
            "mask": "mask.json"}
    if not np.array_equal(scene.map_mesh.vertices, scene.truth.vertices):
        save_mesh(scene.truth, out / "truth.obj", "albedo.png")
        meta["truth"] = "truth.obj"
    scene.mask.save(out / "mask.json")
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_scene(path) -> Scene:
    path = Path(path)
    meta = json.loads((path / "scene.json").read_text())
    map_mesh = load_mesh(path / meta.get("mesh", "mesh.obj"))
    if meta.get("truth"):
        truth = load_mesh(path / meta["truth"])
    else:
        truth = map_mesh.with_texture(load_texture(path / meta["albedo"]))
    mask = SamplingMask.load(path / meta.get("mask", "mask.json"), map_mesh)
    return Scene(TerrainSpec.from_dict(meta["terrain"]), ShadingSpec.from_dict(meta["mapping"]),
                 map_mesh, truth, mask, meta.get("degrade", 1.0))
