"""Synthetic scene generator tests.

The renderer's core guarantee: because it inverts the same ground-plane
correspondence the pipeline uses for projection, warping a rendered ground
image to the overhead view must reproduce the scene texture on the valid
wedge (normalized correlation > 0.99).
"""

import math

import numpy as np
import pytest

from g2sloc.correlation import normalized_correlation
from g2sloc.errors import ConfigError
from g2sloc.geometry import Pose3DoF, bilinear_forward, build_grid
from g2sloc.synthdata import (
    NoiseSpec,
    SceneConfig,
    SceneSpec,
    make_dataset,
    make_scene,
    read_manifest,
    render_ground,
    render_pair,
    write_manifest,
)


class TestTexture:
    def test_variance_floor_enforced(self):
        with pytest.raises(ConfigError):
            SceneSpec(texture=np.full((32, 32), 0.5), alpha=0.25,
                      cam=SceneConfig().camera(), gt_pose=Pose3DoF())

    def test_texture_in_unit_range(self):
        rng = np.random.default_rng(0)
        spec = make_scene(rng, SceneConfig())
        assert spec.texture.min() >= 0.0 and spec.texture.max() <= 1.0
        assert float(np.var(spec.texture)) > 1e-3


class TestRoundTrip:
    def test_overhead_reconstruction(self):
        """Warping the rendered ground image overhead reproduces the texture."""
        rng = np.random.default_rng(7)
        cfg = SceneConfig()
        for _ in range(5):
            spec = make_scene(rng, cfg)
            ground = render_ground(spec)
            grid = build_grid(spec.gt_pose, spec.cam, spec.sat_meta, level=0)
            recon = bilinear_forward(ground[None], grid)[0]
            ncc = normalized_correlation(recon, spec.texture, mask=grid.valid)
            assert ncc > 0.99

    def test_quarter_turn_equivariance(self):
        """theta + 90 deg with the texture rotated a quarter turn renders the
        identical ground image (bilinear sampling commutes with the rotation
        because the patch center is the rotation center)."""
        rng = np.random.default_rng(3)
        cfg = SceneConfig()
        base = make_scene(rng, cfg, gt_pose=Pose3DoF(0.4))
        turned = SceneSpec(
            texture=np.rot90(base.texture, k=3).copy(),
            alpha=base.alpha,
            cam=base.cam,
            gt_pose=Pose3DoF(base.gt_pose.theta + math.pi / 2),
        )
        img_a = render_ground(base)
        img_b = render_ground(turned)
        assert np.allclose(img_a, img_b, atol=1e-12)

    def test_deterministic_per_seed(self):
        a = make_scene(np.random.default_rng(9), SceneConfig())
        b = make_scene(np.random.default_rng(9), SceneConfig())
        assert np.array_equal(a.texture, b.texture)
        assert a.gt_pose == b.gt_pose
        assert np.array_equal(render_ground(a), render_ground(b))

    def test_sky_above_horizon(self):
        spec = make_scene(np.random.default_rng(1), SceneConfig())
        img = render_ground(spec)
        horizon = int(spec.cam.v_g0)
        assert np.all(img[: horizon + 1] == 0.5)


class TestBlocksScene:
    def test_blocks_render_and_occlude(self):
        cfg = SceneConfig.training()
        cfg = type(cfg)(**{**cfg.__dict__, "kind": "blocks"})
        rng = np.random.default_rng(5)
        spec = make_scene(rng, cfg, gt_pose=Pose3DoF(0.0))
        assert spec.height_field is not None and spec.height_field.max() > 0
        img = render_ground(spec)
        assert np.all(np.isfinite(img))
        planar = SceneSpec(texture=spec.texture, alpha=spec.alpha, cam=spec.cam,
                           gt_pose=spec.gt_pose)
        img_planar = render_ground(planar)
        # blocks must change the image (occlusion / above-horizon content)
        assert np.abs(img - img_planar).max() > 0.01


class TestDataset:
    def test_empty_dataset_and_manifest(self, tmp_path):
        records = make_dataset(0, NoiseSpec(), seed=0)
        assert records == []
        write_manifest(tmp_path / "m.csv", records)
        assert read_manifest(tmp_path / "m.csv") == []

    def test_same_seed_same_manifest(self, tmp_path):
        cfg = SceneConfig.training()
        a = make_dataset(4, NoiseSpec(10, 2), seed=5, cfg=cfg)
        b = make_dataset(4, NoiseSpec(10, 2), seed=5, cfg=cfg)
        write_manifest(tmp_path / "a.csv", a)
        write_manifest(tmp_path / "b.csv", b)
        assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()

    def test_noise_envelope_holds(self):
        noise = NoiseSpec(theta_deg=15.0, trans_m=3.0)
        records = make_dataset(50, noise, seed=2, cfg=SceneConfig.training())
        for rec in records:
            d_theta = math.degrees(abs(rec.prior_pose.theta - rec.gt_pose.theta))
            d_theta = min(d_theta, 360 - d_theta)
            assert d_theta <= 15.0 + 1e-9
            assert abs(rec.prior_pose.t_x - rec.gt_pose.t_x) <= 3.0 + 1e-9
            assert abs(rec.prior_pose.t_z - rec.gt_pose.t_z) <= 3.0 + 1e-9

    def test_noise_marginals_uniform(self):
        """Kolmogorov-Smirnov sanity on the prior-noise marginals at n=10^4.

        Critical value for alpha=0.01 is 1.63/sqrt(n).
        """
        noise = NoiseSpec(theta_deg=12.0, trans_m=4.0)
        rng = np.random.default_rng(1)
        n = 10_000
        # sample the same way render_pair does, without paying for rendering
        theta = rng.uniform(-noise.theta_deg, noise.theta_deg, size=n)
        t_x = rng.uniform(-noise.trans_m, noise.trans_m, size=n)

        def ks_uniform(sample, half_width):
            x = np.sort((sample + half_width) / (2 * half_width))
            i = np.arange(1, n + 1)
            return max(np.max(i / n - x), np.max(x - (i - 1) / n))

        assert ks_uniform(theta, noise.theta_deg) < 1.63 / math.sqrt(n)
        assert ks_uniform(t_x, noise.trans_m) < 1.63 / math.sqrt(n)

    def test_manifest_columns(self, tmp_path):
        records = make_dataset(2, NoiseSpec(5, 1), seed=3, cfg=SceneConfig.training())
        write_manifest(tmp_path / "m.csv", records)
        rows = read_manifest(tmp_path / "m.csv")
        assert len(rows) == 2
        assert set(rows[0]) == {
            "index", "theta_gt_deg", "tx_gt_m", "tz_gt_m",
            "theta_prior_deg", "tx_prior_m", "tz_prior_m",
        }
        assert float(rows[0]["theta_gt_deg"]) == pytest.approx(records[0].gt_pose.theta_deg)


class TestRenderPair:
    def test_prior_defaults_to_gt(self):
        spec = make_scene(np.random.default_rng(4), SceneConfig.training())
        rec = render_pair(spec)
        assert rec.prior_pose == rec.gt_pose
        assert np.array_equal(rec.satellite, spec.texture)
        assert rec.alpha == spec.alpha
