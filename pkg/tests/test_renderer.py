from __future__ import annotations

import numpy as np
import pytest

from conftest import merge, quad
from oracles import pixel_rays, raycast_depth
from vtsm.geometry import StereoRig, look_at
from vtsm.meshmap import MapPoint, SamplingMask, TexturedMesh, visible_mask_vertices
from vtsm.renderer import (ShadingSpec, camera_vertices, compute_validity, load_depth, load_png,
                           rasterize_window, render_frame, render_patch, render_window, save_depth,
                           save_png, synthesize_template)


def tiny_rig():
    return StereoRig(focal=120.0, cu=47.5, cv=63.5, baseline=0.2, rows=96, cols=128)


def down_camera(height=2.0, x=0.0):
    return look_at([x, 0.0, height], [x, 0.001, 0.0])


def test_constant_texture(rig):
    m = quad(half=1.0, texture=np.full((16, 16), 0.625))
    f = render_frame(m, down_camera(), rig)
    covered = np.isfinite(f.depth)
    assert covered.mean() > 0.3
    assert np.all(f.intensity[covered] == np.float32(0.625))
    assert np.all(f.intensity[~covered] == 0.0)


def test_render_deterministic(small_scene, rig):
    cam = look_at([1.2, 0.3, 1.0], [0.0, 0.0, 0.0])
    a = render_frame(small_scene.map_mesh, cam, rig)
    b = render_frame(small_scene.map_mesh, cam, rig)
    assert np.array_equal(a.intensity, b.intensity)
    assert np.array_equal(a.depth, b.depth)


def test_patch_center_depth_on_facing_plane(rig):
    m = quad(half=1.0, n=8)
    cam = down_camera(2.0)
    p = render_patch(m, cam, rig, "left", MapPoint(m.vertices[40], 40, np.array([0, 0, 1.0])), 64)
    zc = ((m.vertices[40] - cam.translation) @ cam.rotation)[2]
    assert abs(p.depth[32, 32] - zc) < 1e-4


def test_patch_center_depth_oblique(small_scene):
    # integer principal point: a vertex on the optical axis lands exactly on a pixel centre
    r = StereoRig(focal=550.0, cu=240.0, cv=320.0, baseline=0.3, rows=480, cols=640)
    mesh = small_scene.map_mesh
    gen = np.random.default_rng(0)
    for k in gen.choice(mesh.n_vertices, 20, replace=False):
        v = mesh.vertices[k]
        if abs(v[0]) > 1.5 or abs(v[1]) > 1.5:
            continue
        cam = look_at(v + [1.0, gen.uniform(-0.5, 0.5), 0.9], v)
        pt = MapPoint(v, int(k), mesh.vertex_normals[k])
        p = render_patch(mesh, cam, r, "left", pt, 64)
        zc = ((v - cam.translation) @ cam.rotation)[2]
        assert np.allclose(p.offset, 0.0, atol=1e-9)
        assert abs(p.depth[32, 32] - zc) < 1e-4


def test_patch_invariants(small_scene, rig):
    cam = look_at([1.3, 0.4, 1.1], [0.0, 0.0, 0.0])
    mesh = small_scene.map_mesh
    vis = visible_mask_vertices(mesh, small_scene.mask, cam, rig, 64)
    p = synthesize_template(mesh, small_scene.mask, cam, rig, "left", vis[0], 64)
    fin = np.isfinite(p.depth)
    assert np.all((p.depth[fin] >= rig.near) & (p.depth[fin] <= rig.far))
    assert np.all(np.isfinite(p.intensity[p.valid]))
    assert p.intensity.shape == (64, 64)
    assert 0 <= p.anchor_u - 32 and p.anchor_u + 32 <= rig.rows


def test_window_extraction_matches_patch(small_scene, rig):
    mesh = small_scene.map_mesh
    cam = look_at([1.3, 0.4, 1.1], [0.0, 0.0, 0.0])
    frame = render_frame(mesh, cam, rig, "right")
    vis = visible_mask_vertices(mesh, small_scene.mask, cam, rig, 64)
    for size in (32, 64):
        for pt in vis[::max(1, len(vis) // 5)]:
            p = render_patch(mesh, cam, rig, "right", pt, size)
            r0, c0 = p.anchor_u - size // 2, p.anchor_v - size // 2
            assert np.array_equal(p.intensity, frame.intensity[r0:r0 + size, c0:c0 + size])
            assert np.array_equal(p.depth, frame.depth[r0:r0 + size, c0:c0 + size])


def test_empty_mesh_renders_background(rig):
    m = TexturedMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    f = render_frame(m, down_camera(), rig)
    assert np.all(np.isinf(f.depth)) and np.all(f.intensity == 0.0)
    assert f.intensity.shape == rig.shape


def test_zbuffer_matches_raycast_on_overlaps():
    r = tiny_rig()
    m = merge(quad(z=0.0, half=1.0, n=3), quad(z=0.4, half=0.5, n=2))
    cam = look_at([0.3, -0.2, 2.5], [0.0, 0.1, 0.0])
    f = render_frame(m, cam, r)
    origin, d = pixel_rays(r, "left")
    ref = raycast_depth(camera_vertices(m, cam, r, "left") + origin, m.triangles, origin, d)
    both = np.isfinite(f.depth) & np.isfinite(ref)
    assert both.sum() > 0.99 * np.isfinite(f.depth).sum()
    assert np.mean(np.abs(f.depth[both] - ref[both]) < 1e-5) >= 0.999


def test_epipolar_rows_agree(rig):
    m = quad(half=1.5, n=12)
    cam = down_camera(2.0)
    pc = camera_vertices(m, cam, rig, "left")
    w = (0, 0, rig.rows, rig.cols)
    checked = 0
    for k in range(m.n_triangles):
        c = pc[m.triangles[k]]
        u = rig.focal * c[:, 1] / c[:, 2] + rig.cu
        v = rig.focal * c[:, 0] / c[:, 2] + rig.cv
        vr = v - rig.focal * rig.baseline / c[:, 2]
        if u.min() < 2 or u.max() > rig.rows - 3 or vr.min() < 2 or v.max() > rig.cols - 3:
            continue
        ol = rasterize_window(m, cam, rig, "left", w, [k]).owner
        orr = rasterize_window(m, cam, rig, "right", w, [k]).owner
        ul = np.nonzero(ol >= 0)[0].mean()
        ur = np.nonzero(orr >= 0)[0].mean()
        assert abs(ul - ur) < 0.5
        checked += 1
    assert checked > 20


def two_plane_scene():
    """Sand plane at z=0 (unmasked) and a raised masked square 'rock' at z=0.3."""
    sand = quad(z=0.0, half=2.0, n=8, persistent=False)
    rock = quad(z=0.3, half=0.12, n=2)
    m = merge(sand, rock)
    mask = SamplingMask(np.arange(sand.n_triangles, m.n_triangles), m.n_triangles)
    return m, mask, sand.n_vertices


def test_validity_rules_on_two_plane_scene(rig):
    m, mask, first_rock = two_plane_scene()
    cam = look_at([1.2, 0.0, 1.4], [0.0, 0.0, 0.1])
    centre = MapPoint(np.array([0.0, 0.0, 0.3]), first_rock + 4, np.array([0.0, 0.0, 1.0]))
    size = 128
    p = synthesize_template(m, mask, cam, rig, "left", centre, size, radius=16)
    r0, c0 = p.anchor_u - size // 2, p.anchor_v - size // 2
    masked = rasterize_window(m, cam, rig, "left", (r0, c0, size, size), mask.triangles).depth
    rock_px = np.isfinite(masked)
    assert rock_px.any() and (~rock_px).any()
    # rule 1: every pixel showing the rock is valid
    assert np.all(p.valid[rock_px])
    # rule 2: sand just past the rock silhouette is valid, far sand is not
    from scipy import ndimage
    square = np.ones((3, 3), bool)
    near = ndimage.binary_dilation(rock_px, square, iterations=3) & ~rock_px
    far = ~ndimage.binary_dilation(rock_px, square, iterations=17)
    assert p.valid[near].mean() > 0.95
    assert far.any() and not p.valid[far].any()
    # sand seen beyond the rock lies deeper than the rock edge by more than the jump threshold
    assert np.all(p.depth[near & p.valid] > np.nanmin(np.where(rock_px, p.depth, np.nan)))


def test_validity_full_mask_and_empty_mask(rig):
    m = quad(half=1.0, n=4)
    cam = down_camera()
    pt = MapPoint(m.vertices[12], 12, np.array([0, 0, 1.0]))
    full = synthesize_template(m, SamplingMask.full(m), cam, rig, "left", pt, 64)
    assert np.array_equal(full.valid, np.isfinite(full.depth))
    empty = synthesize_template(m, SamplingMask(np.array([], dtype=int), m.n_triangles),
                                cam, rig, "left", pt, 64)
    assert not empty.valid.any()


def test_compute_validity_arrays():
    full = np.array([[1.0, 1.0, 3.0, 3.0], [1.0, 1.0, 3.0, np.inf]])
    masked = np.array([[1.0, 1.0005, np.inf, np.inf], [np.inf, 1.1, np.inf, np.inf]])
    v = compute_validity(full, masked, depth_tol=1e-3, edge_jump=0.05, radius=1)
    expected = np.array([[True, True, True, False], [False, False, True, False]])
    assert np.array_equal(v, expected)


def test_rule1_monotone_in_mask(masked_scene, rig):
    mesh = masked_scene.map_mesh
    small = masked_scene.mask
    extra = np.random.default_rng(0).choice(mesh.n_triangles, mesh.n_triangles // 3, replace=False)
    big = SamplingMask(np.union1d(small.triangles, extra), mesh.n_triangles)
    cam = look_at([1.4, 0.2, 1.1], [0.0, 0.0, 0.0])
    w = (100, 200, 128, 128)
    full = rasterize_window(mesh, cam, rig, "left", w).depth
    rule1 = lambda mk: compute_validity(full, rasterize_window(mesh, cam, rig, "left", w,
                                                               mk.triangles).depth,
                                        edge_jump=np.inf)
    a, b = rule1(small), rule1(big)
    assert not np.any(a & ~b)


def test_shading_ambient_one_equals_unshaded(small_scene, rig):
    cam = look_at([1.2, 0.3, 1.0], [0.0, 0.0, 0.0])
    plain = render_frame(small_scene.truth, cam, rig)
    lit = render_frame(small_scene.truth, cam, rig, shading=ShadingSpec((0.3, 0.2, 0.9), ambient=1.0))
    assert np.allclose(plain.intensity, lit.intensity, atol=1e-12)


def test_zenith_sun_on_flat_plane_uniform(rig):
    m = quad(half=1.0, n=4, texture=np.full((4, 4), 0.8))
    f = render_frame(m, down_camera(), rig, shading=ShadingSpec((0.0, 0.0, 1.0), ambient=0.2))
    vals = f.intensity[np.isfinite(f.depth)]
    assert np.allclose(vals, vals[0]) and vals[0] == pytest.approx(0.8, abs=1e-6)


def test_shading_spec_validation():
    with pytest.raises(ValueError):
        ShadingSpec((0.0, 1.0, -0.1))
    with pytest.raises(ValueError):
        ShadingSpec((0.0, 0.0, 1.0), ambient=1.5)
    s = ShadingSpec.from_angles(30.0, 90.0)
    assert s.sun_direction[2] == pytest.approx(0.5)
    assert ShadingSpec.from_dict(s.to_dict()) == s


def test_png_and_depth_round_trip(tmp_path):
    img = np.round(np.random.default_rng(0).uniform(size=(20, 30)) * 255) / 255
    save_png(img, tmp_path / "a.png")
    assert np.array_equal(load_png(tmp_path / "a.png"), img)
    d = np.where(img > 0.5, np.inf, img * 4).astype(np.float32).astype(np.float64)
    save_depth(d, tmp_path / "d.f32")
    assert np.array_equal(load_depth(tmp_path / "d.f32"), d)
    assert (tmp_path / "d.f32").stat().st_size == 20 * 30 * 4


def test_render_window_matches_frame_crop(rig):
    m = quad(half=1.0, n=4, texture=np.random.default_rng(1).uniform(size=(32, 32)))
    cam = look_at([0.5, 0.1, 1.5], [0.0, 0.0, 0.0])
    frame = render_frame(m, cam, rig)
    img, depth = render_window(m, cam, rig, "left", (50, 60, 40, 70))
    assert np.array_equal(img, frame.intensity[50:90, 60:130])
    assert np.array_equal(depth, frame.depth[50:90, 60:130])
