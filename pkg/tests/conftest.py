from __future__ import annotations

import numpy as np
import pytest

from vtsm.geometry import StereoRig
from vtsm.harness import quantize_image
from vtsm.meshmap import SamplingMask, TexturedMesh
from vtsm.scenegen import TerrainSpec, build_scene, render_query_pair, ring_viewpoints, sun


def small_rig(baseline: float = 0.3) -> StereoRig:
    return StereoRig(focal=550.0, cu=239.5, cv=319.5, baseline=baseline, rows=480, cols=640)


def quad(z: float = 0.0, half: float = 1.0, texture=None, persistent=True, n: int = 1) -> TexturedMesh:
    """Flat square at height ``z``, split into 2 * n * n triangles, facing +z."""
    xs = np.linspace(-half, half, n + 1)
    xx, yy = np.meshgrid(xs, xs)
    verts = np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)])
    tris = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            tris.append([a, a + 1, a + n + 2])
            tris.append([a, a + n + 2, a + n + 1])
    uvs = (verts[:, :2] + half) / (2 * half)
    tex = np.full((8, 8), 0.5) if texture is None else texture
    return TexturedMesh(verts, np.array(tris), uvs, tex, np.full(len(tris), persistent))


def merge(a: TexturedMesh, b: TexturedMesh) -> TexturedMesh:
    verts = np.vstack([a.vertices, b.vertices])
    tris = np.vstack([a.triangles, b.triangles + a.n_vertices])
    uvs = np.vstack([a.uvs, b.uvs])
    return TexturedMesh(verts, tris, uvs, a.texture, np.concatenate([a.persistent, b.persistent]))


@pytest.fixture(scope="session")
def rig():
    return small_rig()


@pytest.fixture(scope="session")
def small_scene():
    spec = TerrainSpec(kind="cfa2", extent=4.0, resolution=0.05, texture_size=1024, seed=3)
    return build_scene(spec)


@pytest.fixture(scope="session")
def small_query(small_scene, rig):
    truth = ring_viewpoints(small_scene.truth, 4, radius=1.4, height=1.2)[0]
    left, right = render_query_pair(small_scene.truth, rig, truth, sun("am"))
    return truth, quantize_image(left.intensity), quantize_image(right.intensity)


@pytest.fixture(scope="session")
def masked_scene():
    """Small cfa6 scene: the mask covers the rocks only."""
    spec = TerrainSpec(kind="cfa6", extent=4.0, resolution=0.05, texture_size=512, seed=5)
    return build_scene(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def flat_mask():
    def make(mesh):
        return SamplingMask.full(mesh)
    return make


def pytest_terminal_summary(terminalreporter):
    import verdicts
    if not verdicts.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts.CRITERIA):
        terminalreporter.write_line(verdicts.LINES.get(
            n, f"NOT RUN criterion {n} ({verdicts.CRITERIA[n]}): deselected or interrupted"))
