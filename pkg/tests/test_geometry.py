"""Geometry tests: the closed-form overhead-to-ground mapping against an
independent pinhole construction, plus grid building and bilinear sampling.

The reference configuration mirrors a driving setup: ground camera with
f = 256 px, principal point (512, 128) in a 1024x256 image, 1.65 m above
the ground, satellite patch 512x512 at 0.2 m/px.  For the on-axis example,
the overhead pixel 50 px east of center is 10 m ahead, so

    u_g = 512 (on-axis),   v_g = 256 * 1.65 / 10 + 128 = 170.24.
"""

import math

import numpy as np
import pytest

from g2sloc.errors import ConfigError
from g2sloc.geometry import (
    CameraModel,
    Pose3DoF,
    SamplingGrid,
    SatelliteMeta,
    bilinear_backward,
    bilinear_forward,
    bilinear_sample,
    build_grid,
    grid_pose_jacobian,
    pinhole_oracle,
    project_pixel,
    wrap_angle,
)


def reference_camera():
    return CameraModel(f_x=256.0, f_y=256.0, u_g0=512.0, v_g0=128.0,
                       width_g=1024, height_g=256, cam_height=1.65)


def reference_sat():
    return SatelliteMeta(alpha=0.2, u_s0=256.0, v_s0=256.0, width_s=512, height_s=512)


class TestWrapAngle:
    def test_interval_is_half_open(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
        assert wrap_angle(0.0) == 0.0

    def test_many_turns(self):
        rng = np.random.default_rng(0)
        theta = rng.uniform(-50, 50, size=1000)
        wrapped = wrap_angle(theta)
        assert np.all(wrapped > -math.pi)
        assert np.all(wrapped <= math.pi)
        # wrapping preserves the angle modulo 2*pi
        assert np.allclose(np.sin(theta), np.sin(wrapped), atol=1e-9)
        assert np.allclose(np.cos(theta), np.cos(wrapped), atol=1e-9)


class TestPose3DoF:
    def test_constructor_normalizes(self):
        assert Pose3DoF(theta=3 * math.pi).theta == pytest.approx(math.pi)
        assert Pose3DoF(theta=-math.pi).theta == pytest.approx(math.pi)

    def test_shifted_rewraps(self):
        pose = Pose3DoF(theta=math.pi - 0.1).shifted(d_theta=0.3)
        assert pose.theta == pytest.approx(-math.pi + 0.2)


class TestModelValidation:
    def test_focal_must_be_positive(self):
        with pytest.raises(ConfigError):
            CameraModel(f_x=-1, f_y=1, u_g0=0, v_g0=0, width_g=4, height_g=4, cam_height=1)

    def test_principal_point_inside(self):
        with pytest.raises(ConfigError):
            CameraModel(f_x=1, f_y=1, u_g0=10, v_g0=0, width_g=4, height_g=4, cam_height=1)

    def test_alpha_positive(self):
        with pytest.raises(ConfigError):
            SatelliteMeta(alpha=0.0, u_s0=1, v_s0=1, width_s=4, height_s=4)


class TestProjectPixel:
    def test_on_axis_symmetry(self):
        # v offset zero forces the lateral term to zero exactly
        u_g, v_g, valid = project_pixel(Pose3DoF(), reference_camera(), reference_sat(),
                                        306.0, 256.0, 1.65)
        assert valid
        assert u_g == 512.0
        assert v_g == pytest.approx(256.0 * 1.65 / 10.0 + 128.0, abs=1e-12)

    def test_matches_pinhole_oracle_on_axis(self):
        u_c, v_c, _ = project_pixel(Pose3DoF(), reference_camera(), reference_sat(),
                                    306.0, 256.0, 1.65)
        u_o, v_o, valid = pinhole_oracle(Pose3DoF(), reference_camera(), reference_sat(),
                                         306.0, 256.0, 1.65)
        assert valid
        assert u_c == pytest.approx(u_o, abs=1e-9)
        assert v_c == pytest.approx(v_o, abs=1e-9)

    def test_quarter_turn_maps_to_same_ray(self):
        # rotating the query point 90 deg about the center lands on the
        # theta=0 ray: identical image coordinates
        base = project_pixel(Pose3DoF(0.0), reference_camera(), reference_sat(),
                             306.0, 256.0, 1.65)
        turned = project_pixel(Pose3DoF(math.pi / 2), reference_camera(), reference_sat(),
                               256.0, 306.0, 1.65)
        assert base[2] and turned[2]
        assert turned[0] == pytest.approx(base[0], abs=1e-12)
        assert turned[1] == pytest.approx(base[1], abs=1e-12)

    def test_oracle_equivalence_randomized(self):
        """Closed form vs 3-step world-frame construction, 10^4 configs."""
        cam, sat = reference_camera(), reference_sat()
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(10_000):
            pose = Pose3DoF(rng.uniform(-math.pi, math.pi),
                            rng.uniform(-20, 20), rng.uniform(-20, 20))
            u_s = rng.uniform(0, sat.width_s - 1)
            v_s = rng.uniform(0, sat.height_s - 1)
            h = rng.uniform(0.1, 30.0)
            u_c, v_c, valid_c = project_pixel(pose, cam, sat, u_s, v_s, h)
            u_o, v_o, valid_o = pinhole_oracle(pose, cam, sat, u_s, v_s, h)
            assert valid_c == valid_o
            if valid_c:
                checked += 1
                assert abs(u_c - u_o) < 1e-9
                assert abs(v_c - v_o) < 1e-9
        assert checked > 500  # the random poses must actually exercise the map

    def test_u_independent_of_h(self):
        cam, sat = reference_camera(), reference_sat()
        rng = np.random.default_rng(7)
        for _ in range(200):
            pose = Pose3DoF(rng.uniform(-math.pi, math.pi))
            u_s = rng.uniform(0, 511)
            v_s = rng.uniform(0, 511)
            us = []
            for h in np.linspace(0.01, 30.0, 7):
                u_g, _, valid = project_pixel(pose, cam, sat, u_s, v_s, h)
                if valid:
                    us.append(u_g)
            if len(us) > 1:
                assert max(us) - min(us) == 0.0

    def test_behind_camera_flagged_not_raised(self):
        # theta=0 looks along +u; a pixel west of center sits behind the camera
        _, _, valid = project_pixel(Pose3DoF(), reference_camera(), reference_sat(),
                                    200.0, 256.0, 1.65)
        assert not valid


class TestBuildGrid:
    def test_mirror_symmetry_at_zero_pose(self):
        grid = build_grid(Pose3DoF(), reference_camera(), reference_sat())
        u0 = reference_camera().u_g0
        v_c = int(reference_sat().v_s0)
        for k in (60, 120, 200):
            for m in (5, 40, 100):
                a = grid.valid[v_c + m, 256 + k] and grid.valid[v_c - m, 256 + k]
                if a:
                    total = grid.u[v_c + m, 256 + k] + grid.u[v_c - m, 256 + k]
                    assert total == pytest.approx(2 * u0, abs=1e-9)

    def test_matches_pixelwise_projection(self):
        cam, sat = reference_camera(), reference_sat()
        rng = np.random.default_rng(3)
        for _ in range(25):  # dense per-pose loop; poses drawn from the full range
            pose = Pose3DoF(rng.uniform(-math.pi, math.pi),
                            rng.uniform(-20, 20), rng.uniform(-20, 20))
            grid = build_grid(pose, cam, sat)
            v_idx = rng.integers(0, sat.height_s, size=400)
            u_idx = rng.integers(0, sat.width_s, size=400)
            for v_s, u_s in zip(v_idx, u_idx):
                u_g, v_g, valid = project_pixel(pose, cam, sat, float(u_s), float(v_s),
                                                cam.cam_height)
                assert grid.valid[v_s, u_s] == valid
                assert grid.u[v_s, u_s] == pytest.approx(u_g, abs=1e-12)
                assert grid.v[v_s, u_s] == pytest.approx(v_g, abs=1e-12)

    def test_translation_equals_pixel_shift(self):
        # t_x = +1 m equals querying v_s shifted by 1/alpha = 5 px
        cam, sat = reference_camera(), reference_sat()
        grid0 = build_grid(Pose3DoF(0.3), cam, sat)
        grid1 = build_grid(Pose3DoF(0.3, t_x=1.0), cam, sat)
        shift = int(round(1.0 / sat.alpha))
        both = grid1.valid[:-shift] & grid0.valid[shift:]
        assert both.sum() > 1000
        assert np.allclose(grid1.u[:-shift][both], grid0.u[shift:][both], atol=1e-9)
        assert np.allclose(grid1.v[:-shift][both], grid0.v[shift:][both], atol=1e-9)

    def test_level_mismatch_is_config_error(self):
        cam = reference_camera()
        sat = SatelliteMeta(alpha=0.2, u_s0=250.0, v_s0=250.0, width_s=500, height_s=500)
        with pytest.raises(ConfigError):
            build_grid(Pose3DoF(), cam, sat, level=3)  # 500 not divisible by 8

    def test_deterministic(self):
        cam, sat = reference_camera(), reference_sat()
        a = build_grid(Pose3DoF(0.5, 1.0, -2.0), cam, sat)
        b = build_grid(Pose3DoF(0.5, 1.0, -2.0), cam, sat)
        assert np.array_equal(a.u, b.u)
        assert np.array_equal(a.v, b.v)
        assert np.array_equal(a.valid, b.valid)


class TestBilinearSample:
    def test_identity_grid(self):
        rng = np.random.default_rng(0)
        src = rng.normal(size=(3, 6, 7))
        v, u = np.mgrid[0:6, 0:7].astype(np.float64)
        grid = SamplingGrid(u=u, v=v, valid=np.ones((6, 7), dtype=bool))
        assert np.array_equal(bilinear_sample(src, grid), src)

    def test_exact_on_affine_ramp(self):
        # bilinear interpolation reproduces an affine image exactly
        v, u = np.mgrid[0:8, 0:9].astype(np.float64)
        ramp = (2.0 * u + 3.0 * v + 1.0)[None]
        qu = u[:6, :6] + 0.5
        qv = v[:6, :6] + 0.25
        grid = SamplingGrid(u=qu, v=qv, valid=np.ones((6, 6), dtype=bool))
        expected = 2.0 * qu + 3.0 * qv + 1.0
        assert np.allclose(bilinear_sample(ramp, grid)[0], expected, atol=1e-12)

    def test_invalid_and_out_of_bounds_are_zero(self):
        src = np.ones((1, 4, 4))
        u = np.array([[1.0, 10.0], [2.0, -3.0]])
        v = np.array([[1.0, 1.0], [5.0, 1.0]])
        valid = np.array([[False, True], [True, True]])
        grid = SamplingGrid(u=u, v=v, valid=valid)
        out = bilinear_sample(src, grid)[0]
        assert out[0, 0] == 0.0  # invalid flag
        assert out[0, 1] == 0.0  # off the right edge
        assert out[1, 0] == 0.0  # off the bottom

    def test_gradients_match_finite_differences(self):
        """Analytic source/coordinate gradients vs central differences.

        Grid points are held off interpolation cell boundaries, where the
        interpolant is not differentiable.
        """
        rng = np.random.default_rng(11)
        src = rng.normal(size=(4, 8, 8))
        u = rng.uniform(0.55, 6.45, size=(5, 5))
        v = rng.uniform(0.55, 6.45, size=(5, 5))
        u += np.where(np.abs(u - np.round(u)) < 1e-3, 0.01, 0.0)
        v += np.where(np.abs(v - np.round(v)) < 1e-3, 0.01, 0.0)
        grid = SamplingGrid(u=u, v=v, valid=np.ones((5, 5), dtype=bool))
        weights = rng.normal(size=(4, 5, 5))

        def loss(src_arr, u_arr, v_arr):
            g = SamplingGrid(u=u_arr, v=v_arr, valid=grid.valid)
            return float(np.sum(bilinear_forward(src_arr, g) * weights))

        grad_src, grad_u, grad_v = bilinear_backward(src, grid, weights)
        step = 1e-5
        for arr, grad in ((src, grad_src), (u, grad_u), (v, grad_v)):
            flat = arr.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                flat[i] += step
                up = loss(src, u, v)
                flat[i] -= 2 * step
                down = loss(src, u, v)
                flat[i] += step
                numeric[i] = (up - down) / (2 * step)
            numeric = numeric.reshape(arr.shape)
            denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-6)
            assert np.max(np.abs(grad - numeric) / denom) < 1e-4


class TestGridPoseJacobian:
    def test_matches_finite_differences(self):
        cam, sat = reference_camera(), reference_sat()
        rng = np.random.default_rng(5)
        pose = Pose3DoF(0.7, 2.0, -3.0)
        du, dv = grid_pose_jacobian(pose, cam, sat, level=3)
        step = 1e-7
        for k, name in enumerate(("theta", "t_x", "t_z")):
            bump = [0.0, 0.0, 0.0]
            bump[k] = step
            up = build_grid(Pose3DoF(pose.theta + bump[0], pose.t_x + bump[1],
                                     pose.t_z + bump[2]), cam, sat, level=3)
            down = build_grid(Pose3DoF(pose.theta - bump[0], pose.t_x - bump[1],
                                       pose.t_z - bump[2]), cam, sat, level=3)
            both = up.valid & down.valid
            num_u = (up.u - down.u) / (2 * step)
            num_v = (up.v - down.v) / (2 * step)
            assert np.allclose(du[k][both], num_u[both], rtol=1e-4, atol=1e-4), name
            assert np.allclose(dv[k][both], num_v[both], rtol=1e-4, atol=1e-4), name
