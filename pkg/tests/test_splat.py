import numpy as np
import pytest

from vlx4d import autodiff as ad
from vlx4d.autodiff import Tensor, grad_check
from vlx4d.gaussians import GaussianSet
from vlx4d.geom import look_at_camera
from vlx4d.splat import (ALPHA_CLAMP, COV_FLOOR, RenderTarget, Splat2D,
                         composite, project_gaussian, psnr, render_image)


def axis_camera(width=32, height=32, dist=3.0, fov=np.pi / 3):
    return look_at_camera((0, 0, -dist), (0, 0, 0), fov, width, height)


def random_set(rng, n, scale_hi=0.15):
    q = rng.standard_normal((n, 4))
    return GaussianSet(
        positions=rng.uniform(-0.5, 0.5, (n, 3)),
        scales=rng.uniform(0.01, scale_hi, (n, 3)),
        quats=q / np.linalg.norm(q, axis=1, keepdims=True),
        opacity=rng.uniform(0.1, 0.9, n),
        rgb=rng.uniform(0, 1, (n, 3)),
        tau=0.0)


class TestProjection:
    def test_isotropic_on_axis_is_circular(self):
        cam = axis_camera()
        a = 0.2
        s = project_gaussian((0, 0, 0), (a, a, a), (1, 0, 0, 0), 0.5,
                             (1, 1, 1), cam)
        assert s is not None
        assert s.cov[0, 1] == pytest.approx(0.0, abs=1e-9)
        assert s.cov[0, 0] == pytest.approx(s.cov[1, 1], rel=1e-9)
        # predicted std f*a/z before the additive floor
        sigma = np.sqrt(s.cov[0, 0] - COV_FLOOR)
        assert sigma == pytest.approx(cam.fx * a / s.depth, rel=1e-6)
        assert s.mean == pytest.approx([cam.cx, cam.cy])

    def test_rotation_invariance_when_isotropic(self):
        cam = axis_camera()
        q = np.random.default_rng(1).standard_normal(4)
        q /= np.linalg.norm(q)
        a = project_gaussian((0.2, -0.1, 0.1), (0.1, 0.1, 0.1), (1, 0, 0, 0),
                             0.5, (1, 0, 0), cam)
        b = project_gaussian((0.2, -0.1, 0.1), (0.1, 0.1, 0.1), q,
                             0.5, (1, 0, 0), cam)
        assert np.allclose(a.cov, b.cov, atol=1e-12)

    def test_behind_camera_culled(self):
        cam = axis_camera()
        assert project_gaussian((0, 0, -5.0), (0.1, 0.1, 0.1), (1, 0, 0, 0),
                                0.5, (1, 1, 1), cam) is None

    def test_depth_equals_camera_z(self):
        cam = axis_camera(dist=3.0)
        s = project_gaussian((0, 0, 0), (0.1,) * 3, (1, 0, 0, 0), 0.5,
                             (1, 1, 1), cam)
        assert s.depth == pytest.approx(3.0)


class TestComposite:
    def test_no_splats_gives_background(self):
        out = composite([], 4, 3, (0.2, 0.4, 0.6))
        assert out.rgb.shape == (3, 4, 3)
        assert np.allclose(out.rgb, [0.2, 0.4, 0.6])
        assert (out.alpha == 0).all()

    def test_alpha_at_mean_equals_opacity(self):
        s = Splat2D(mean=np.array([2.5, 1.5]), cov=4.0 * np.eye(2),
                    depth=1.0, opacity=0.7, rgb=np.array([1.0, 0.0, 0.0]))
        out = composite([s], 6, 4, (0.0, 0.0, 0.0))
        assert out.alpha[1, 2] == pytest.approx(0.7, abs=1e-12)
        assert out.rgb[1, 2, 0] == pytest.approx(0.7, abs=1e-12)

    def test_clamped_front_occludes_rear(self):
        mean = np.array([2.5, 2.5])
        front = Splat2D(mean=mean, cov=np.eye(2), depth=1.0, opacity=1.0,
                        rgb=np.array([1.0, 0.0, 0.0]), index=0)
        rear = Splat2D(mean=mean, cov=np.eye(2), depth=2.0, opacity=0.8,
                       rgb=np.array([0.0, 1.0, 0.0]), index=1)
        out = composite([rear, front], 5, 5, (0.0, 0.0, 0.0))
        # exp(0) = 1 clamps to 0.99: rear sees transmittance 0.01
        assert out.rgb[2, 2, 0] == pytest.approx(ALPHA_CLAMP, abs=1e-12)
        assert out.rgb[2, 2, 1] == pytest.approx(0.01 * 0.8, abs=1e-12)

    def test_non_overlapping_permutation_invariant(self):
        a = Splat2D(mean=np.array([1.5, 1.5]), cov=0.5 * np.eye(2), depth=1.0,
                    opacity=0.6, rgb=np.array([1.0, 0.0, 0.0]), index=0)
        b = Splat2D(mean=np.array([14.5, 14.5]), cov=0.5 * np.eye(2), depth=1.0,
                    opacity=0.6, rgb=np.array([0.0, 1.0, 0.0]), index=1)
        one = composite([a, b], 16, 16)
        two = composite([b, a], 16, 16)
        assert np.array_equal(one.rgb, two.rgb)

    def test_energy_bounds(self):
        rng = np.random.default_rng(7)
        cam = axis_camera()
        gs = random_set(rng, 20, scale_hi=0.3)
        splats = [project_gaussian(gs.positions[i], gs.scales[i], gs.quats[i],
                                   gs.opacity[i], gs.rgb[i], cam, i)
                  for i in range(20)]
        out = composite([s for s in splats if s], 32, 32, (0.5, 0.5, 0.5))
        assert out.rgb.min() >= -1e-12 and out.rgb.max() <= 1 + 1e-12
        assert out.alpha.min() >= 0 and out.alpha.max() <= 1 + 1e-12

    def test_shrinking_scale_reduces_off_mean_alpha(self):
        cam = axis_camera()
        alphas = []
        for a in (0.3, 0.15, 0.075):
            s = project_gaussian((0, 0, 0), (a, a, a), (1, 0, 0, 0), 0.9,
                                 (1, 1, 1), cam)
            out = composite([s], 32, 32)
            alphas.append(out.alpha[16, 19])  # 3.5 px off-mean
        assert alphas[0] > alphas[1] > alphas[2]


class TestRenderImage:
    def test_matches_reference_compositor(self):
        rng = np.random.default_rng(0)
        cam = axis_camera()
        gs = random_set(rng, 12)
        img = render_image(gs, cam, (0.2, 0.1, 0.0)).data
        splats = [project_gaussian(gs.positions[i], gs.scales[i], gs.quats[i],
                                   gs.opacity[i], gs.rgb[i], cam, i)
                  for i in range(12)]
        ref = composite([s for s in splats if s], 32, 32, (0.2, 0.1, 0.0))
        assert np.abs(img - ref.rgb).max() <= 1e-12

    def test_empty_set_gives_background(self):
        cam = axis_camera(width=8, height=6)
        gs = GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                         np.zeros(0), np.zeros((0, 3)), 0.0)
        img = render_image(gs, cam, (0.3, 0.6, 0.9)).data
        assert img.shape == (6, 8, 3)
        assert np.allclose(img, [0.3, 0.6, 0.9])

    def test_all_behind_camera_gives_background(self):
        cam = axis_camera()
        gs = GaussianSet(np.array([[0.0, 0.0, -9.0]]), np.full((1, 3), 0.1),
                         np.array([[1.0, 0, 0, 0]]), np.array([0.5]),
                         np.array([[1.0, 1, 1]]), 0.0)
        img = render_image(gs, cam, (0.0, 0.0, 0.0)).data
        assert (img == 0).all()

    def test_row_permutation_invariance_distinct_depths(self):
        rng = np.random.default_rng(3)
        cam = axis_camera()
        gs = random_set(rng, 10)
        perm = rng.permutation(10)
        gp = GaussianSet(gs.positions[perm], gs.scales[perm], gs.quats[perm],
                         gs.opacity[perm], gs.rgb[perm], 0.0)
        a = render_image(gs, cam).data
        b = render_image(gp, cam).data
        assert np.abs(a - b).max() <= 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        cam = axis_camera(width=8, height=8)
        m = 5
        pos = Tensor(rng.uniform(-0.4, 0.4, (m, 3)))
        sca = Tensor(rng.uniform(0.05, 0.3, (m, 3)))
        qua = Tensor(rng.standard_normal((m, 4)))
        opa = Tensor(rng.uniform(0.1, 0.85, m))
        rgb = Tensor(rng.uniform(0.1, 0.9, (m, 3)))
        wts = rng.uniform(0.5, 1.5, (8, 8, 3))

        def loss(*_):
            g = GaussianSet(pos, sca, qua, opa, rgb, 0.0)
            img = render_image(g, cam, (0.1, 0.2, 0.3))
            return ad.mean(ad.square(ad.mul(img, Tensor(wts))))

        report = grad_check(loss, [pos, sca, qua, opa, rgb], tolerance=1e-3)
        assert report.passed, report.max_rel_err

    def test_gradient_zero_for_culled_gaussian(self):
        cam = axis_camera(width=8, height=8)
        pos = ad.parameter(np.array([[0.0, 0.0, -9.0], [0.0, 0.0, 0.0]]))
        gs = GaussianSet(pos, np.full((2, 3), 0.2),
                         np.array([[1.0, 0, 0, 0]] * 2), np.array([0.5, 0.5]),
                         np.array([[1.0, 0, 0]] * 2), 0.0)
        with ad.Tape() as tape:
            img = render_image(gs, cam)
            tape.backward(ad.mean(img))
        assert (pos.grad[0] == 0).all()
        assert np.abs(pos.grad[1]).max() > 0


class TestPsnr:
    def test_identical_caps_at_99(self):
        img = np.random.default_rng(0).uniform(0, 1, (4, 4, 3))
        assert psnr(img, img) == 99.0

    def test_known_mse(self):
        a = np.zeros((5, 5, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a + 1.0) == pytest.approx(0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
