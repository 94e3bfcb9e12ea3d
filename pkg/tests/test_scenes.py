"""Scene families, textures, tracks, visibility, rendering, and layout."""

import numpy as np
import pytest

from vlx4d import scenes
from vlx4d.geom import frame_time, look_at_camera
from vlx4d.raytrace import (bilinear_sample, closest_point_on_triangles,
                            locate_on_mesh, ray_triangles, render_rgbd)
from vlx4d.scenes import (build_scene, conditioning_fov, falling_sheet_height,
                          make_scene, make_texture, make_tracks,
                          mark_visibility, save_scene, load_scene,
                          sheet_reference_height, surface_color)


class TestRayTriangle:
    def test_direct_hit(self):
        v0 = np.array([[-1.0, -1.0, 2.0]])
        v1 = np.array([[1.0, -1.0, 2.0]])
        v2 = np.array([[0.0, 1.5, 2.0]])
        t, tri, u, v = ray_triangles(np.zeros(3), np.array([[0.0, 0.0, 1.0]]),
                                     v0, v1, v2)
        assert tri[0] == 0
        assert t[0] == pytest.approx(2.0, abs=1e-12)

    def test_miss(self):
        v0 = np.array([[-1.0, -1.0, 2.0]])
        v1 = np.array([[1.0, -1.0, 2.0]])
        v2 = np.array([[0.0, 1.5, 2.0]])
        t, tri, _, _ = ray_triangles(np.zeros(3), np.array([[0.0, 0.0, -1.0]]),
                                     v0, v1, v2)
        assert tri[0] == -1 and np.isinf(t[0])

    def test_nearest_wins_and_tie_low_index(self):
        # two coplanar triangles at z=3 (tie) plus one nearer at z=2
        mk = lambda z: (np.array([[-1.0, -1.0, z]]), np.array([[1.0, -1.0, z]]),
                        np.array([[0.0, 1.5, z]]))
        v0 = np.concatenate([mk(3.0)[0], mk(3.0)[0], mk(2.0)[0]])
        v1 = np.concatenate([mk(3.0)[1], mk(3.0)[1], mk(2.0)[1]])
        v2 = np.concatenate([mk(3.0)[2], mk(3.0)[2], mk(2.0)[2]])
        t, tri, _, _ = ray_triangles(np.zeros(3), np.array([[0.0, 0.0, 1.0]]),
                                     v0, v1, v2)
        assert tri[0] == 2 and t[0] == pytest.approx(2.0)
        t2, tri2, _, _ = ray_triangles(np.zeros(3), np.array([[0.0, 0.0, 1.0]]),
                                       v0[:2], v1[:2], v2[:2])
        assert tri2[0] == 0  # tie resolves to the lower index

    def test_double_sided(self):
        v0 = np.array([[-1.0, -1.0, 2.0]])
        v1 = np.array([[1.0, -1.0, 2.0]])
        v2 = np.array([[0.0, 1.5, 2.0]])
        # reversed winding still intersects
        t, tri, _, _ = ray_triangles(np.zeros(3), np.array([[0.0, 0.0, 1.0]]),
                                     v1, v0, v2)
        assert tri[0] == 0


class TestBilinear:
    def test_corner_lookup(self):
        tex = np.arange(48, dtype=np.float64).reshape(4, 4, 3) / 48.0
        out = bilinear_sample(tex, np.array([[0.0, 0.0], [1.0, 1.0]]))
        np.testing.assert_allclose(out[0], tex[0, 0])
        np.testing.assert_allclose(out[1], tex[3, 3])

    def test_midpoint_average(self):
        tex = np.zeros((1, 2, 3))
        tex[0, 1] = 1.0
        out = bilinear_sample(tex, np.array([[0.5, 0.0]]))
        np.testing.assert_allclose(out[0], [0.5, 0.5, 0.5])


class TestClosestPoint:
    def test_matches_dense_barycentric_oracle(self):
        rng = np.random.default_rng(0)
        grid = np.linspace(0, 1, 41)
        bu, bv = np.meshgrid(grid, grid)
        keep = (bu + bv) <= 1.0
        bu, bv = bu[keep], bv[keep]
        for _ in range(20):
            v0, v1, v2 = rng.standard_normal((3, 3))
            p = rng.standard_normal(3) * 1.5
            pts, d2, _, _ = closest_point_on_triangles(
                p, v0[None], v1[None], v2[None])
            dense = (1 - bu - bv)[:, None] * v0 + bu[:, None] * v1 + bv[:, None] * v2
            best = ((dense - p) ** 2).sum(axis=1).min()
            assert d2[0] <= best + 1e-9

    def test_interior_projection_exact(self):
        v0, v1, v2 = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
        p = np.array([0.25, 0.25, 5.0])
        pts, d2, u, v = closest_point_on_triangles(p, v0[None], v1[None], v2[None])
        np.testing.assert_allclose(pts[0], [0.25, 0.25, 0.0], atol=1e-12)
        assert d2[0] == pytest.approx(25.0)


class TestRender:
    def cam(self, res=16):
        return look_at_camera([0, 0, -3], [0, 0, 0], np.deg2rad(45), res, res)

    def test_covering_triangle_all_valid(self):
        verts = np.array([[-8.0, -8.0, 0.0], [8.0, -8.0, 0.0], [0.0, 12.0, 0.0]])
        tris = np.array([[0, 1, 2]])
        uv = np.array([[0.0, 0], [1, 0], [0.5, 1]])
        tex = np.full((4, 4, 3), 0.7)
        depth, color, _ = render_rgbd(verts, tris, uv, tex, self.cam())
        assert (depth > 0).all()
        np.testing.assert_allclose(depth, 3.0, atol=1e-9)
        np.testing.assert_allclose(color, 0.7, atol=1e-12)

    def test_empty_scene_invalid(self):
        depth, color, _ = render_rgbd(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.intp).reshape(0, 3),
                                      np.zeros((3, 2)), np.zeros((2, 2, 3)),
                                      self.cam())
        assert (depth == 0).all()

    def test_backprojected_points_on_surface(self):
        from vlx4d.geom import backproject
        mesh, _ = make_scene("rotating-box", seed=1, frames=2)
        tex = make_texture("checker", 1)
        cam = self.cam(24)
        depth, color, _ = render_rgbd(mesh.verts[0], mesh.tris, mesh.uv, tex, cam)
        assert (depth > 0).any()
        cloud = backproject(depth, color, cam, 0)
        v0 = mesh.verts[0]
        v = [v0[mesh.tris[:, i]] for i in range(3)]
        worst = 0.0
        for p in cloud.positions:
            _, d2, _, _ = closest_point_on_triangles(p, *v)
            worst = max(worst, float(d2.min()))
        assert np.sqrt(worst) < 1e-6


class TestConditioningFov:
    def test_r3(self):
        assert conditioning_fov(3.0) == pytest.approx(2 * np.arctan(0.5), abs=1e-12)
        assert conditioning_fov(3.0) == pytest.approx(0.92730, abs=1e-5)

    def test_right_angle(self):
        assert conditioning_fov(1.75) == pytest.approx(np.pi / 2, abs=1e-12)

    def test_limit_and_domain(self):
        assert conditioning_fov(1e9) < 1e-8
        with pytest.raises(ValueError):
            conditioning_fov(0.5)


class TestSceneFamilies:
    def test_translation_is_rigid(self):
        mesh, info = make_scene("translating-sphere", seed=2, frames=6)
        v = np.array(info["velocity_raw"])
        for j in range(6):
            want = mesh.verts[0] + v * frame_time(j)
            np.testing.assert_allclose(mesh.verts[j], want, atol=1e-12)

    def test_sheet_com_closed_form(self):
        mesh, info = make_scene("falling-sheet", seed=3, frames=24)
        taus = np.array([frame_time(j) for j in range(24)])
        y, t_c = falling_sheet_height(taus, info["y0_raw"], info["g_raw"],
                                      info["ground_raw"], info["restitution"])
        com = mesh.verts[:, :, 1].mean(axis=1)
        np.testing.assert_allclose(com, y, atol=1e-9)
        # interior frames strictly before contact: central differences exact
        h = 0.01
        acc = (com[2:] - 2 * com[1:-1] + com[:-2]) / h ** 2
        vel = (com[2:] - com[:-2]) / (2 * h)
        interior = taus[1:-1]
        pre = interior + h < t_c
        assert pre.any()
        np.testing.assert_allclose(acc[pre], -info["g_raw"], atol=1e-6)
        want_v = -info["g_raw"] * interior[pre]
        np.testing.assert_allclose(vel[pre], want_v, atol=1e-6)

    def test_sheet_rebound_present(self):
        mesh, info = make_scene("falling-sheet", seed=4, frames=24)
        com = mesh.verts[:, :, 1].mean(axis=1)
        t_c = info["contact_time"]
        taus = np.array([frame_time(j) for j in range(24)])
        post = taus > t_c
        assert post.any() and (np.diff(com[post]) > 0).any()

    def test_bending_cylinder_nonrigid_but_smooth(self):
        mesh, _ = make_scene("bending-cylinder", seed=5, frames=8)
        d01 = np.abs(mesh.verts[1] - mesh.verts[0]).max()
        dlast = np.abs(mesh.verts[-1] - mesh.verts[0]).max()
        assert 0 < d01 < dlast

    def test_rotation_preserves_lengths(self):
        mesh, _ = make_scene("rotating-box", seed=6, frames=5)
        n0 = np.linalg.norm(mesh.verts[0], axis=1)
        for j in range(5):
            np.testing.assert_allclose(np.linalg.norm(mesh.verts[j], axis=1),
                                       n0, atol=1e-9)

    def test_determinism(self):
        a, _ = make_scene("bending-cylinder", seed=7, frames=4)
        b, _ = make_scene("bending-cylinder", seed=7, frames=4)
        assert np.array_equal(a.verts, b.verts)

    def test_errors(self):
        with pytest.raises(ValueError):
            make_scene("galloping-horse", 0, 4)
        with pytest.raises(ValueError):
            make_scene("rotating-box", 0, 1)


class TestTextures:
    def test_constant_texture_constant_color(self):
        mesh, _ = make_scene("translating-sphere", seed=8, frames=2)
        tex = np.full((8, 8, 3), 0.4)
        tri = np.zeros(3, dtype=np.intp)
        bary = np.array([[1.0, 0, 0], [0.2, 0.5, 0.3], [0, 0, 1.0]])
        col = surface_color(mesh, tex, tri, bary)
        np.testing.assert_allclose(col, 0.4, atol=1e-12)

    def test_color_constant_along_track(self):
        # same (triangle, barycentric) point has the same color in every frame
        mesh, _ = make_scene("bending-cylinder", seed=9, frames=6)
        tex = make_texture("noise", 9)
        tri = np.array([3, 40, 7], dtype=np.intp)
        bary = np.array([[0.3, 0.3, 0.4], [1.0, 0, 0], [0.1, 0.8, 0.1]])
        c0 = surface_color(mesh, tex, tri, bary)
        c1 = surface_color(mesh, tex, tri, bary)
        np.testing.assert_array_equal(c0, c1)

    def test_kinds_deterministic_and_distinct(self):
        for kind in scenes.TEXTURE_KINDS:
            t1 = make_texture(kind, 3)
            t2 = make_texture(kind, 3)
            assert np.array_equal(t1, t2)
            assert t1.shape == (64, 64, 3)
            assert t1.min() >= 0 and t1.max() <= 1
        with pytest.raises(ValueError):
            make_texture("plaid", 0)


class TestTracks:
    def test_vertex_query_follows_vertex(self):
        mesh, _ = make_scene("rotating-box", seed=10, frames=5)
        q = mesh.verts[0][mesh.tris[4, 1]][None, :]
        traj = make_tracks(mesh, q)
        np.testing.assert_allclose(traj[0], mesh.verts[:, mesh.tris[4, 1]],
                                   atol=1e-9)

    def test_centroid_query_is_mean(self):
        mesh, _ = make_scene("bending-cylinder", seed=11, frames=4)
        tri = mesh.tris[10]
        q = mesh.verts[0][tri].mean(axis=0)[None, :]
        traj = make_tracks(mesh, q)
        want = mesh.verts[:, tri].mean(axis=1)
        np.testing.assert_allclose(traj[0], want, atol=1e-9)

    def test_rigid_translation_closed_form(self):
        mesh, info = make_scene("translating-sphere", seed=12, frames=6)
        rng = np.random.default_rng(0)
        tri = rng.integers(0, len(mesh.tris), 5)
        w = rng.dirichlet(np.ones(3), 5)
        q = np.einsum("qi,qik->qk", w, mesh.verts[0][mesh.tris[tri]])
        traj = make_tracks(mesh, q)
        v = np.array(info["velocity_raw"])
        for j in range(6):
            np.testing.assert_allclose(traj[:, j], q + v * frame_time(j),
                                       atol=1e-9)

    def test_off_surface_query_rejected(self):
        mesh, _ = make_scene("rotating-box", seed=13, frames=2)
        with pytest.raises(ValueError, match="surface"):
            make_tracks(mesh, np.array([[55.0, 55.0, 55.0]]))


class TestVisibility:
    def test_rules(self):
        cam = look_at_camera([0, 0, -3], [0, 0, 0], np.deg2rad(45), 16, 16)
        depth = np.full((16, 16), 2.5)  # surface plane in front of origin
        # visible on the surface, occluded behind, occluded out of frame
        surface_pt = cam.position + 2.5 * np.array([0, 0, 1.0])
        behind_pt = cam.position + 3.5 * np.array([0, 0, 1.0])
        outside_pt = cam.position + np.array([50.0, 0, 2.0])
        traj = np.stack([surface_pt, behind_pt, outside_pt])[:, None, :]
        vis = mark_visibility(traj, cam, depth[None], margin=0.05)
        assert vis[0, 0] and not vis[1, 0] and not vis[2, 0]

    def test_no_surface_pixel_occluded(self):
        cam = look_at_camera([0, 0, -3], [0, 0, 0], np.deg2rad(45), 8, 8)
        pt = (cam.position + 2.0 * np.array([0, 0, 1.0]))[None, None, :]
        vis = mark_visibility(pt, cam, np.zeros((1, 8, 8)))
        assert not vis[0, 0]


@pytest.fixture(scope="module")
def bundle():
    return build_scene("translating-sphere", seed=21, frames=4, cameras=2,
                       resolution=32, n_tracks=16)


class TestBundle:
    def test_cloud_in_bounds_and_typed(self, bundle):
        bundle.cloud.validate(max_time=0.04)
        assert len(bundle.cloud) > 500

    def test_tracks_start_at_queries(self, bundle):
        np.testing.assert_array_equal(bundle.tracks.trajectories[:, 0],
                                      bundle.tracks.queries)

    def test_some_tracks_visible_at_start(self, bundle):
        assert bundle.tracks.visibility[:, 0].mean() > 0.9

    def test_normalized_velocity_metadata(self, bundle):
        v = np.array(bundle.metadata["velocity"])
        traj = bundle.tracks.trajectories
        want = bundle.tracks.queries[:, None, :] + \
            v[None, None, :] * (np.arange(4) / 100.0)[None, :, None]
        np.testing.assert_allclose(traj, want, atol=1e-9)

    def test_frame_cloud_selects_single_time(self, bundle):
        fc = bundle.frame_cloud(2)
        assert len(fc) > 0
        assert np.all(fc.times == frame_time(2))

    def test_determinism(self, bundle):
        again = build_scene("translating-sphere", seed=21, frames=4, cameras=2,
                            resolution=32, n_tracks=16)
        assert np.array_equal(again.cloud.positions, bundle.cloud.positions)
        assert np.array_equal(again.depths, bundle.depths)
        assert np.array_equal(again.tracks.trajectories,
                              bundle.tracks.trajectories)

    def test_save_load_round_trip(self, bundle, tmp_path):
        save_scene(bundle, tmp_path / "s0")
        back = load_scene(tmp_path / "s0")
        np.testing.assert_allclose(back.cloud.positions,
                                   bundle.cloud.positions, atol=1e-6)
        np.testing.assert_array_equal(back.tracks.visibility,
                                      bundle.tracks.visibility)
        np.testing.assert_allclose(back.depths, bundle.depths, atol=1e-6)
        np.testing.assert_allclose(back.mesh.verts, bundle.mesh.verts,
                                   atol=1e-12)
        assert back.metadata["family"] == "translating-sphere"

    def test_sheet_reference_helper(self):
        b = build_scene("falling-sheet", seed=22, frames=8, cameras=2,
                        resolution=24, n_tracks=8)
        taus = np.arange(8) / 100.0
        ref = sheet_reference_height(b.metadata, taus)
        com = b.mesh.verts[:, :, 1].mean(axis=1)
        np.testing.assert_allclose(com, ref, atol=1e-9)
