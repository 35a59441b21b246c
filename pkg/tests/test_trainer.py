import numpy as np
import pytest

from changesplat import trainer
from changesplat.rasterizer import rasterize
from changesplat.scene import ChangeMask, GaussianCloud, sigmoid, logit
from changesplat.trainer import (
    CloudAdam,
    DensifyState,
    TrainConfig,
    densify_and_prune,
    expand_change_degree,
    init_cloud_from_points,
    l1_dssim_loss,
    loss_change,
    loss_rgb,
    reset_opacity,
    train_change,
    train_reference,
)
from tests.scenes import look_at_camera, random_cloud


def orbit_cameras(n, radius=2.0, size=24, fx=30.0):
    cams = []
    for i in range(n):
        t = 2 * np.pi * i / n
        cams.append(look_at_camera(
            [radius * np.cos(t), 0.4, radius * np.sin(t)],
            width=size, height=size, fx=fx, fy=fx))
    return cams


def small_config(**overrides):
    base = dict(iters_reference=30, iters_change=30, iters_change_finetune=10,
                densify_interval=10, densify_start=5,
                opacity_reset_interval=10**9)
    base.update(overrides)
    return TrainConfig(**base)


class TestConfig:
    def test_defaults_valid(self):
        TrainConfig().validate()

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError, match="lambda_dssim"):
            TrainConfig(lambda_dssim=1.5).validate()

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError, match="lr_change"):
            TrainConfig(lr_change=0.0).validate()

    def test_file_round_trip(self, tmp_path):
        cfg = TrainConfig(iters_reference=123, lr_sh=1e-3, seed=42)
        p = tmp_path / "cfg.json"
        cfg.to_file(p)
        back = TrainConfig.from_file(p)
        assert back == cfg

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text('{"iters_reference": 10, "bogus": 1}')
        with pytest.raises(ValueError, match="bogus"):
            TrainConfig.from_file(p)


class TestLosses:
    def test_zero_at_target(self):
        rng = np.random.default_rng(0)
        x = rng.random((16, 16, 3))
        loss, grad = l1_dssim_loss(x, x.copy(), 0.2)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(grad, 0.0, atol=1e-9)

    def test_lambda_zero_is_mae(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        loss, grad = l1_dssim_loss(a, b, 0.0)
        assert loss == pytest.approx(np.abs(a - b).mean())
        np.testing.assert_allclose(grad, np.sign(a - b) / a.size)

    def test_constant_images_l1_contribution(self):
        pred = np.zeros((16, 16))
        target = np.ones((16, 16))
        loss, _ = l1_dssim_loss(pred, target, 0.2)
        # L1 term: (1 - 0.2) * 1.0; the rest is the D-SSIM of two constants.
        assert loss >= 0.8
        assert loss - 0.8 == pytest.approx(0.2 * (1.0 - 9.999e-5) / 2.0, abs=1e-6)

    @pytest.mark.parametrize("shape", [(16, 16), (16, 16, 3)])
    def test_gradient_matches_finite_differences(self, shape):
        rng = np.random.default_rng(2)
        a = rng.random(shape)
        b = rng.random(shape)
        _, grad = l1_dssim_loss(a, b, 0.2)
        h = 1e-6
        flat = a.reshape(-1)
        for idx in rng.choice(flat.size, size=8, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp, _ = l1_dssim_loss(a, b, 0.2)
            flat[idx] = orig - h
            lm, _ = l1_dssim_loss(a, b, 0.2)
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert grad.reshape(-1)[idx] == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_wrappers_use_right_channels(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 6)
        cam = look_at_camera([0, 0.3, 2.0], width=16, height=16, fx=20, fy=20)
        out = rasterize(cloud, cam)
        v_rgb, g_rgb = loss_rgb(out, out.rgb)
        v_chg, g_chg = loss_change(out, ChangeMask(out.change.data[:, :, 0]))
        assert v_rgb == pytest.approx(0.0, abs=1e-12)
        assert v_chg == pytest.approx(0.0, abs=1e-12)
        assert g_rgb.shape == (16, 16, 3)
        assert g_chg.shape == (16, 16)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            l1_dssim_loss(np.zeros((4, 4)), np.zeros((5, 4)), 0.2)


class TestOptimizer:
    def test_position_lr_decays_with_extent(self):
        cfg = TrainConfig()
        cloud = random_cloud(np.random.default_rng(4), 3)
        cloud.scene_extent = 2.0
        opt = CloudAdam(cloud, cfg, total_iters=100)
        lr0 = opt._lr("positions")
        assert lr0 == pytest.approx(cfg.lr_position_init * 2.0)
        opt.t = 100
        assert opt._lr("positions") == pytest.approx(cfg.lr_position_final * 2.0)

    def test_sh_rest_lr_scaled_down(self):
        cfg = TrainConfig()
        cloud = random_cloud(np.random.default_rng(5), 3)
        lr = CloudAdam(cloud, cfg, 10)._lr("sh_color")
        assert lr[0, 0] == pytest.approx(cfg.lr_sh)
        np.testing.assert_allclose(lr[1:, 0], cfg.lr_sh / cfg.lr_sh_rest_divisor)


class TestDensifyPrune:
    def setup_state(self, cloud, cfg):
        opt = CloudAdam(cloud, cfg, 100)
        state = DensifyState(len(cloud))
        return opt, state

    def test_prune_low_opacity(self):
        cfg = small_config()
        cloud = random_cloud(np.random.default_rng(6), 5)
        cloud.opacity_logits[:] = logit(0.5)
        cloud.opacity_logits[2] = logit(1e-4)
        cloud.change_opacity_logits[:] = logit(1e-4)
        opt, state = self.setup_state(cloud, cfg)
        densify_and_prune(cloud, opt, state, cfg, np.random.default_rng(0),
                          change_phase=False)
        assert len(cloud) == 4

    def test_dual_opacity_keeps_change_carriers(self):
        cfg = small_config(dual_opacity_culling=True)
        cloud = random_cloud(np.random.default_rng(7), 5)
        cloud.opacity_logits[:] = logit(1e-4)       # all RGB-invisible
        cloud.change_opacity_logits[:] = logit(0.9)  # but carrying change
        opt, state = self.setup_state(cloud, cfg)
        densify_and_prune(cloud, opt, state, cfg, np.random.default_rng(0),
                          change_phase=True)
        assert len(cloud) == 5

    def test_disabling_dual_rule_removes_them(self):
        cfg = small_config(dual_opacity_culling=False)
        cloud = random_cloud(np.random.default_rng(8), 5)
        cloud.opacity_logits[:] = logit(1e-4)
        cloud.opacity_logits[0] = logit(0.9)
        cloud.change_opacity_logits[:] = logit(0.9)
        opt, state = self.setup_state(cloud, cfg)
        densify_and_prune(cloud, opt, state, cfg, np.random.default_rng(0),
                          change_phase=True)
        assert len(cloud) == 1

    def test_clone_copies_change_channels(self):
        cfg = small_config(densify_grad_threshold=1e-9, percent_dense=10.0)
        cloud = random_cloud(np.random.default_rng(9), 3)
        opt, state = self.setup_state(cloud, cfg)
        state.grad_accum[:] = 1.0
        state.denom[:] = 1.0
        before = cloud.change_sh.copy()
        densify_and_prune(cloud, opt, state, cfg, np.random.default_rng(0),
                          change_phase=False)
        assert len(cloud) == 6
        np.testing.assert_array_equal(cloud.change_sh[3:], before)

    def test_reset_opacity_never_touches_change(self):
        cloud = random_cloud(np.random.default_rng(10), 4)
        cloud.opacity_logits[:] = logit(0.9)
        change_before = cloud.change_opacity_logits.copy()
        opt = CloudAdam(cloud, TrainConfig(), 10)
        reset_opacity(cloud, opt)
        assert sigmoid(cloud.opacity_logits).max() <= 0.01 + 1e-12
        np.testing.assert_array_equal(cloud.change_opacity_logits, change_before)


class TestInit:
    def test_init_from_points(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-1, 1, (20, 3))
        colors = rng.random((20, 3))
        cloud = init_cloud_from_points(pts, colors, scene_extent=2.0)
        assert len(cloud) == 20
        np.testing.assert_allclose(sigmoid(cloud.opacity_logits), 0.1)
        np.testing.assert_allclose(sigmoid(cloud.change_sh[:, 0]), 0.01, atol=1e-12)
        from changesplat.sh import SH_C0

        np.testing.assert_allclose(cloud.sh_color[:, 0, :] * SH_C0 + 0.5, colors)

    def test_empty_points_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            init_cloud_from_points(np.zeros((0, 3)), None, 1.0)

    def test_expand_change_degree(self):
        cloud = random_cloud(np.random.default_rng(12), 3)
        dc = cloud.change_sh[:, 0].copy()
        expand_change_degree(cloud, 3)
        assert cloud.change_sh.shape == (3, 16)
        np.testing.assert_array_equal(cloud.change_sh[:, 0], dc)
        np.testing.assert_array_equal(cloud.change_sh[:, 1:], 0.0)
        expand_change_degree(cloud, 0)
        assert cloud.change_sh.shape == (3, 1)


class TestTrainingLoops:
    def fixture(self, seed=13, n=25, n_views=6):
        rng = np.random.default_rng(seed)
        gt = random_cloud(rng, n, with_change=False)
        cams = orbit_cameras(n_views)
        images = [rasterize(gt, c).rgb for c in cams]
        return gt, cams, images

    def test_zero_iterations_is_noop(self):
        gt, cams, images = self.fixture()
        cfg = small_config(iters_reference=0)
        cloud = train_reference(images, cams, gt.positions, cfg)
        np.testing.assert_array_equal(cloud.positions, gt.positions)

    def test_reference_training_reduces_loss(self):
        gt, cams, images = self.fixture()
        cfg = small_config(iters_reference=120, densify_interval=0)
        losses = []
        train_reference(images, cams, gt.positions + 0.01, cfg,
                        progress=lambda it, loss, n: losses.append(loss))
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_single_view_does_not_crash(self):
        gt, cams, images = self.fixture(n_views=6)
        cfg = small_config(iters_reference=5, densify_interval=0)
        train_reference(images[:1], cams[:1], gt.positions, cfg)

    def test_deterministic_given_seed(self):
        gt, cams, images = self.fixture()
        cfg = small_config(iters_reference=25, seed=5)
        a = train_reference(images, cams, gt.positions, cfg)
        b = train_reference(images, cams, gt.positions, cfg)
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.sh_color, b.sh_color)

    def test_reference_training_never_touches_change(self):
        gt, cams, images = self.fixture()
        cfg = small_config(iters_reference=15, densify_interval=0)
        cloud = train_reference(images, cams, gt.positions, cfg)
        np.testing.assert_allclose(sigmoid(cloud.change_sh[:, 0]), 0.01, atol=1e-12)

    def test_change_training_with_zero_masks_keeps_change_low(self):
        gt, cams, images = self.fixture()
        cfg = small_config(iters_reference=40, iters_change=40, densify_interval=0)
        ref = train_reference(images, cams, gt.positions, cfg)
        zero_masks = [ChangeMask(np.zeros((24, 24))) for _ in cams]
        changed = train_change(ref, images, cams, zero_masks, cfg)
        rendered = [rasterize(changed, c).change.data.mean() for c in cams]
        assert np.mean(rendered) < 0.05

    def test_change_count_mismatch(self):
        gt, cams, images = self.fixture()
        ref = random_cloud(np.random.default_rng(14), 5)
        with pytest.raises(ValueError, match="mismatch"):
            train_change(ref, images, cams, [], small_config())

    def test_finetune_only_updates_change_channels(self):
        rng = np.random.default_rng(15)
        cloud = random_cloud(rng, 10)
        cams = orbit_cameras(4)
        masks = [ChangeMask(np.ones((24, 24))) for _ in cams]
        cfg = small_config(iters_change_finetune=10)
        out = trainer.finetune_change(cloud, cams, masks, cfg)
        np.testing.assert_array_equal(out.positions, cloud.positions)
        np.testing.assert_array_equal(out.sh_color, cloud.sh_color)
        np.testing.assert_array_equal(out.opacity_logits, cloud.opacity_logits)
        assert not np.array_equal(out.change_sh, cloud.change_sh)
