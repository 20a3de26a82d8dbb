"""Dense correlation tests: the two NCC paths against each other and
against hand-constructed cases, localization sign conventions, uncertainty
behaviour, and the heatmap file contract."""

import math

import numpy as np
import pytest

from g2sloc.correlation import (
    ProbabilityMap,
    UncertaintyMap,
    crop_template,
    emit_heatmap,
    locate,
    ncc_direct,
    ncc_fft,
    ncc_map_op,
    normalized_correlation,
    to_gray_u8,
    wedge_box,
    write_png_gray,
)
from g2sloc.errors import ShapeError
from g2sloc.geometry import SatelliteMeta
from g2sloc.tensorcore import Tape, check_gradients, ops


class TestNCCBasics:
    def test_self_match_peak_is_one(self):
        rng = np.random.default_rng(0)
        search = rng.normal(size=(3, 64, 64))
        template = search[:, 20:40, 11:31].copy()
        score = ncc_fft(search, template)
        i, j = np.unravel_index(np.argmax(score), score.shape)
        assert (i, j) == (20, 11)
        assert score[i, j] == pytest.approx(1.0, abs=1e-9)

    def test_scores_bounded(self):
        rng = np.random.default_rng(1)
        search = rng.normal(size=(2, 40, 40)) * 100
        template = rng.normal(size=(2, 12, 12))
        for path in (ncc_direct, ncc_fft):
            score = path(search, template)
            assert score.max() <= 1.0 + 1e-9
            assert score.min() >= -1.0 - 1e-9

    def test_shift_equivariance(self):
        rng = np.random.default_rng(2)
        base = rng.normal(size=(2, 48, 48))
        template = base[:, 10:26, 10:26].copy()
        shifted = np.roll(base, (3, 5), axis=(1, 2))
        score = ncc_fft(shifted, template)
        i, j = np.unravel_index(np.argmax(score), score.shape)
        assert (i, j) == (13, 15)

    def test_zero_variance_window_scores_zero(self):
        search = np.zeros((1, 16, 16))
        search[0, 8:, :] = np.arange(8)[None, :, None] * np.ones((8, 16))
        template = np.random.default_rng(3).normal(size=(1, 4, 4))
        score = ncc_direct(search, template)
        assert np.all(score[:4, :] == 0.0)  # flat region of the map

    def test_template_larger_than_map_rejected(self):
        with pytest.raises(ShapeError):
            ncc_fft(np.zeros((1, 8, 8)), np.zeros((1, 9, 9)))


class TestPathEquivalence:
    def test_ten_seeds_within_1e4(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            search = rng.normal(size=(4, 128, 128))
            template = rng.normal(size=(4, 64, 64))
            diff = np.abs(ncc_direct(search, template) - ncc_fft(search, template))
            assert diff.max() < 1e-4

    def test_masked_paths_agree(self):
        rng = np.random.default_rng(11)
        search = rng.normal(size=(3, 60, 60))
        template = rng.normal(size=(3, 24, 24))
        mask = rng.random((24, 24)) > 0.4
        diff = np.abs(
            ncc_direct(search, template, mask=mask) - ncc_fft(search, template, mask=mask)
        )
        assert diff.max() < 1e-4

    def test_mask_of_ones_matches_unmasked(self):
        rng = np.random.default_rng(12)
        search = rng.normal(size=(2, 30, 30))
        template = rng.normal(size=(2, 10, 10))
        plain = ncc_fft(search, template)
        masked = ncc_fft(search, template, mask=np.ones((10, 10)))
        assert np.allclose(plain, masked, atol=1e-10)


class TestLocate:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        search = rng.normal(size=(1, 64, 64))
        sat = SatelliteMeta(alpha=0.5, u_s0=31.5, v_s0=31.5, width_s=64, height_s=64)
        return rng, search, sat

    def test_uniform_uncertainty_preserves_argmax(self):
        rng, search, sat = self._setup()
        template = search[:, 24:40, 24:40].copy()
        tpl_cam = (31.5 - 24, 31.5 - 24)
        flat = UncertaintyMap(values=np.full((64, 64), 0.5))
        prob_u, t_u = locate(search, template, flat, sat, tpl_cam)
        prob_n, t_n = locate(search, template, None, sat, tpl_cam)
        assert prob_u.argmax == prob_n.argmax
        assert t_u == t_n

    def test_uncertainty_scaling_invariance(self):
        rng, search, sat = self._setup(1)
        template = search[:, 10:30, 20:40].copy()
        tpl_cam = (31.5 - 20, 31.5 - 10)
        base = np.clip(np.abs(rng.normal(0.5, 0.1, size=(64, 64))), 0.1, 0.9)
        p1, _ = locate(search, template, UncertaintyMap(base), sat, tpl_cam)
        scaled = UncertaintyMap(np.clip(base * 0.5, 1e-3, 1 - 1e-3))
        # positive scaling of U cannot move the argmax (values allowed to differ)
        p2, _ = locate(search, template, scaled, sat, tpl_cam)
        assert p1.argmax == p2.argmax

    def test_uncertainty_pushes_peak_away(self):
        """On a near-flat score map, low uncertainty elsewhere must win."""
        rng = np.random.default_rng(5)
        search = np.ones((1, 32, 32)) + rng.normal(scale=1e-6, size=(1, 32, 32))
        template = np.ones((1, 8, 8)) + rng.normal(scale=1e-6, size=(1, 8, 8))
        sat = SatelliteMeta(alpha=1.0, u_s0=15.5, v_s0=15.5, width_s=32, height_s=32)
        u_vals = np.full((32, 32), 1 - 1e-3)
        u_vals[5, 7] = 1e-3  # strongly preferred spot
        prob, _ = locate(search, template, UncertaintyMap(u_vals), sat, (4.0, 4.0))
        cam_pixel = (prob.argmax[0] + 4, prob.argmax[1] + 4)
        assert cam_pixel == (5, 7)

    def test_translation_sign_round_trip(self):
        """Planting the template at a known offset recovers +-t exactly."""
        rng, search, sat = self._setup(3)
        # content for a camera at t = (t_x, t_z): template pixels equal the
        # map shifted by -t/alpha
        t_x, t_z = 3.0, -2.0  # metres; 6 px down, 4 px left at alpha=0.5
        dv, du = int(-t_x / sat.alpha), int(-t_z / sat.alpha)
        template = search[:, 24 + dv : 40 + dv, 24 + du : 40 + du].copy()
        tpl_cam = (31.5 - 24, 31.5 - 24)
        prob, t_hat = locate(search, template, None, sat, tpl_cam)
        assert t_hat[0] == pytest.approx(t_x, abs=1e-9)
        assert t_hat[1] == pytest.approx(t_z, abs=1e-9)

    def test_window_mask_limits_search(self):
        rng, search, sat = self._setup(4)
        template = search[:, 2:18, 2:18].copy()  # true peak far from center
        tpl_cam = (31.5 - 2, 31.5 - 2)
        prob, _ = locate(search, template, None, sat, tpl_cam, window_m=4.0,
                         prior_t=(0.0, 0.0))
        assert prob.searched.sum() < prob.values.size
        i, j = prob.argmax
        assert prob.searched[i, j]

    def test_tie_breaks_to_smallest_row_then_col(self):
        search = np.zeros((1, 10, 10))
        search[0, 1::3, :] = 1.0
        template = np.zeros((1, 3, 3))
        template[0, 1, :] = 1.0  # matches at rows 0, 3, 6 equally
        sat = SatelliteMeta(alpha=1.0, u_s0=4.5, v_s0=4.5, width_s=10, height_s=10)
        prob, _ = locate(search, template, None, sat, (4.5, 4.5))
        assert prob.argmax == (0, 0)


class TestWedgeBox:
    def test_centers_on_support(self):
        valid = np.zeros((20, 20), dtype=bool)
        valid[2:6, 10:16] = True
        r0, c0 = wedge_box(valid, 6)
        assert (r0, c0) == (1, 10)

    def test_empty_mask_falls_back_to_center(self):
        r0, c0 = wedge_box(np.zeros((16, 16), dtype=bool), 8)
        assert (r0, c0) == (4, 4)


class TestDifferentiableNCC:
    def test_matches_direct_path(self):
        rng = np.random.default_rng(6)
        search = rng.normal(size=(3, 20, 20))
        template = rng.normal(size=(3, 7, 7))
        mask = (rng.random((7, 7)) > 0.3).astype(np.float64)
        tape = Tape()
        out = ncc_map_op(tape.leaf(search), tape.leaf(template), mask=mask)
        assert np.allclose(out.data, ncc_direct(search, template, mask=mask), atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        search = rng.normal(size=(2, 12, 12))
        template = rng.normal(size=(2, 5, 5))
        weights = rng.normal(size=(8, 8))

        def func(s, t):
            return ops.sum_all(ops.mul(ncc_map_op(s, t), weights))

        assert check_gradients(func, [search, template]) < 1e-4


class TestHelpers:
    def test_normalized_correlation_of_identical(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(10, 10))
        assert normalized_correlation(x, x) == pytest.approx(1.0)
        assert normalized_correlation(x, -x) == pytest.approx(-1.0)

    def test_crop_template_bookkeeping(self):
        sat = SatelliteMeta(alpha=0.5, u_s0=15.5, v_s0=15.5, width_s=32, height_s=32)
        synth = np.arange(32 * 32, dtype=np.float64).reshape(1, 32, 32)
        template, (u_cam, v_cam) = crop_template(synth, sat, 8)
        # camera pixel must land back on the patch center
        r0 = int(round(15.5 - 3.5))
        assert template.shape == (1, 8, 8)
        assert v_cam == pytest.approx(15.5 - r0)
        assert u_cam == pytest.approx(15.5 - r0)


class TestHeatmapFiles:
    def test_pgm_header_bytes(self, tmp_path):
        prob = ProbabilityMap(values=np.random.default_rng(9).random((5, 7)),
                              argmax=(0, 0), peak=1.0,
                              searched=np.ones((5, 7), dtype=bool))
        path = tmp_path / "h.pgm"
        emit_heatmap(prob, path)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n7 5\n255\n")
        assert len(raw) == len(b"P5\n7 5\n255\n") + 35

    def test_constant_map_is_mid_gray(self, tmp_path):
        path = tmp_path / "c.pgm"
        emit_heatmap(np.full((4, 4), 3.3), path)
        payload = path.read_bytes()[len(b"P5\n4 4\n255\n"):]
        assert payload == bytes([128] * 16)

    def test_peak_maps_to_255(self):
        values = np.zeros((3, 3))
        values[1, 2] = 5.0
        img = to_gray_u8(values)
        assert img[1, 2] == 255
        assert img[0, 0] == 0

    def test_png_is_parseable(self, tmp_path):
        rng = np.random.default_rng(10)
        img = (rng.random((9, 11)) * 255).astype(np.uint8)
        path = tmp_path / "h.png"
        write_png_gray(path, img)
        raw = path.read_bytes()
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"
        assert raw[12:16] == b"IHDR"
        import zlib

        idat_start = raw.index(b"IDAT") + 4
        idat_len = int.from_bytes(raw[raw.index(b"IDAT") - 4 : raw.index(b"IDAT")], "big")
        decoded = zlib.decompress(raw[idat_start : idat_start + idat_len])
        rows = np.frombuffer(decoded, dtype=np.uint8).reshape(9, 12)
        assert np.all(rows[:, 0] == 0)  # filter byte per row
        assert np.array_equal(rows[:, 1:], img)
