import numpy as np
import pytest

from changesplat.rasterizer import (
    project,
    rasterize,
    rasterize_backward,
    render_raw,
)
from changesplat.scene import Camera, Gaussian3D, GaussianCloud, logit

from oracle import brute_force_render, finite_difference_grads
from scenes import look_at_camera, random_cloud


def identity_camera(f=100.0, size=100):
    return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size,
                  rotation_w2c=np.eye(3), translation_w2c=np.zeros(3))


def single_gaussian(pos=(0, 0, 1), scale=0.1, opacity=0.6, color_dc=None,
                    change=0.5, change_opacity=0.5):
    sh = np.zeros((16, 3))
    if color_dc is not None:
        sh[0, :] = color_dc
    return Gaussian3D(
        position=np.array(pos, dtype=float),
        rotation=np.array([1.0, 0, 0, 0]),
        log_scale=np.log(scale) * np.ones(3),
        opacity_logit=float(logit(opacity)),
        sh_color=sh,
        change_dc=float(logit(change)),
        change_opacity_logit=float(logit(change_opacity)),
    )


class TestProject:
    def test_on_axis_point_projects_to_center(self):
        cam = identity_camera()
        pg = project(single_gaussian(), cam)
        assert np.allclose(pg.mean2d, [50.0, 50.0])

    def test_isotropic_cov2d_with_dilation(self):
        cam = identity_camera()
        pg = project(single_gaussian(scale=0.1), cam)
        assert np.allclose(pg.cov2d, np.diag([100.3, 100.3]))

    def test_behind_camera_is_culled(self):
        cam = identity_camera()
        assert project(single_gaussian(pos=(0, 0, -1)), cam) is None

    def test_footprint_outside_image_is_culled(self):
        cam = identity_camera()
        assert project(single_gaussian(pos=(10.0, 0, 1), scale=0.01), cam) is None


class TestForward:
    def test_single_gaussian_compositing(self):
        # Huge footprint so G ~ 1 at the pixel center under the mean.
        cam = identity_camera()
        g = single_gaussian(pos=(0.005, 0.005, 1.0), scale=3.0, opacity=0.6,
                            color_dc=(0.5 / 0.28209479177387814,) * 3)
        out = rasterize(GaussianCloud.from_gaussians([g]), cam)
        assert out.rgb.data[50, 50, 0] == pytest.approx(0.6, abs=1e-3)
        assert out.alpha.data[50, 50, 0] == pytest.approx(0.6, abs=1e-3)

    def test_two_gaussian_compositing(self):
        cam = identity_camera()
        bright = (0.5 / 0.28209479177387814,) * 3
        dark = (-0.5 / 0.28209479177387814,) * 3
        front = single_gaussian(pos=(0.005, 0.005, 1.0), scale=3.0, opacity=0.5,
                                color_dc=bright)
        back = single_gaussian(pos=(0.005, 0.005, 2.0), scale=6.0, opacity=0.5,
                               color_dc=dark)
        out = rasterize(GaussianCloud.from_gaussians([front, back]), cam)
        assert out.rgb.data[50, 50, 0] == pytest.approx(0.5, abs=2e-3)
        assert out.alpha.data[50, 50, 0] == pytest.approx(0.75, abs=2e-3)

    def test_empty_region_is_black(self):
        cam = identity_camera()
        g = single_gaussian(scale=0.001, opacity=0.9)
        out = rasterize(GaussianCloud.from_gaussians([g]), cam)
        assert out.rgb.data[5, 5].sum() == 0.0
        assert out.change.data[5, 5, 0] == 0.0
        assert out.alpha.data[5, 5, 0] == 0.0

    def test_empty_cloud_raises(self):
        with pytest.raises(ValueError):
            GaussianCloud.from_gaussians([])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, n=60)
        cam = look_at_camera(center=(0.3, 0.4, -2.0), width=64, height=64)
        rgb, change, alpha, depth = render_raw(cloud, cam)
        o_rgb, o_change, o_alpha, o_depth = brute_force_render(cloud, cam)
        assert np.max(np.abs(rgb - o_rgb)) < 1e-4
        assert np.max(np.abs(change - o_change)) < 1e-4
        assert np.max(np.abs(alpha - o_alpha)) < 1e-4

    def test_alpha_monotone_in_cloud_size(self):
        rng = np.random.default_rng(7)
        cloud = random_cloud(rng, n=30)
        cam = look_at_camera(center=(0.0, 0.1, -2.0))
        alpha_small = rasterize(
            GaussianCloud(
                positions=cloud.positions[:20], rotations=cloud.rotations[:20],
                log_scales=cloud.log_scales[:20], opacity_logits=cloud.opacity_logits[:20],
                sh_color=cloud.sh_color[:20], change_sh=cloud.change_sh[:20],
                change_opacity_logits=cloud.change_opacity_logits[:20],
            ), cam).alpha.data
        alpha_full = rasterize(cloud, cam).alpha.data
        assert np.all(alpha_full >= alpha_small - 1e-12)

    def test_threaded_render_is_bitwise_identical(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, n=80)
        cam = look_at_camera(center=(0.2, -0.3, -2.0))
        a = render_raw(cloud, cam, n_threads=1)
        b = render_raw(cloud, cam, n_threads=4)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


def check_grads(cloud, cam, seed=0, rtol=1e-3):
    rng = np.random.default_rng(seed)
    u_rgb = rng.normal(size=(cam.height, cam.width, 3))
    u_change = rng.normal(size=(cam.height, cam.width))
    u_alpha = rng.normal(size=(cam.height, cam.width))
    analytic = rasterize_backward(cloud, cam, u_rgb, u_change, u_alpha)
    fd = finite_difference_grads(cloud, cam, u_rgb, u_change, u_alpha)
    for name, fd_g in fd.items():
        an_g = getattr(analytic, name)
        scale = max(np.max(np.abs(fd_g)), 1e-6)
        err = np.max(np.abs(an_g - fd_g)) / scale
        assert err < rtol, f"{name}: rel err {err:.2e}"


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        cam = identity_camera(size=32)
        cloud = GaussianCloud.from_gaussians([single_gaussian(scale=0.05)])
        z = np.zeros((32, 32))
        g = rasterize_backward(cloud, cam, np.zeros((32, 32, 3)), z, z)
        for name in ("positions", "rotations", "log_scales", "opacity_logits",
                      "sh_color", "change_sh", "change_opacity_logits"):
            assert np.all(getattr(g, name) == 0.0)

    def test_single_gaussian_finite_differences(self):
        cam = look_at_camera(center=(0.1, -0.2, -1.5), width=16, height=16, fx=20, fy=20)
        rng = np.random.default_rng(11)
        cloud = random_cloud(rng, n=1, scale_range=(0.1, 0.3), box=0.2)
        check_grads(cloud, cam)

    def test_multi_gaussian_finite_differences(self):
        cam = look_at_camera(center=(0.05, 0.3, -1.5), width=16, height=16, fx=20, fy=20)
        rng = np.random.default_rng(13)
        cloud = random_cloud(rng, n=4, scale_range=(0.08, 0.25), box=0.3)
        check_grads(cloud, cam)

    def test_change_upstream_does_not_touch_color(self):
        cam = identity_camera(size=32)
        cloud = GaussianCloud.from_gaussians([single_gaussian(scale=0.2)])
        u_change = np.ones((32, 32))
        z = np.zeros((32, 32))
        g = rasterize_backward(cloud, cam, np.zeros((32, 32, 3)), u_change, z)
        assert np.all(g.sh_color == 0.0)
        assert np.all(g.opacity_logits == 0.0)
        assert np.any(g.change_sh != 0.0)
        assert np.any(g.change_opacity_logits != 0.0)

    def test_shape_mismatch_raises(self):
        cam = identity_camera(size=32)
        cloud = GaussianCloud.from_gaussians([single_gaussian()])
        with pytest.raises(ValueError):
            rasterize_backward(cloud, cam, np.zeros((16, 16, 3)),
                               np.zeros((32, 32)), np.zeros((32, 32)))
