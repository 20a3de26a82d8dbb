"""Benchmark sweeps and ablation harness.

Identity-encoder mode drives the geometry-plus-correlation stack with raw
pixels (no learned weights), which makes the sweeps deterministic oracle
benchmarks: orientation comes from an exhaustive correlation sweep and
translation from the dense search.  Sweeps over prior rotation noise,
search-window size, and refinement iteration count each emit one CSV row
per setting; the ablation harness toggles the uncertainty division and the
translation-supervision terms through short training runs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import Config
from .correlation import crop_template, locate, rotation_sweep
from .geometry import Pose3DoF, build_grid, bilinear_forward, wrap_angle
from .metrics import compute_metrics
from .model import ModelParams, init_model
from .optimizer import RefineSchedule, refine
from .synthdata import NoiseSpec, SceneConfig, make_dataset
from .training import estimate_pose, train


def identity_locate(record, template_px: int = 48, window_m: float = 40.0,
                    theta: float | None = None):
    """Dense translation search on raw pixels at a known orientation."""
    sat_meta = record.sat_meta
    use_theta = record.gt_pose.theta if theta is None else theta
    grid = build_grid(Pose3DoF(use_theta, 0.0, 0.0), record.cam, sat_meta, level=0)
    synth = bilinear_forward(record.ground[None], grid)
    template, template_cam = crop_template(synth, sat_meta, template_px)
    mask, _ = crop_template(grid.valid[None].astype(np.float64), sat_meta, template_px)
    prob, t_hat = locate(
        record.satellite[None], template, None, sat_meta, template_cam,
        window_m=window_m, prior_t=(record.prior_pose.t_x, record.prior_pose.t_z),
        template_mask=mask[0],
    )
    return Pose3DoF(use_theta, t_hat[0], t_hat[1]), prob


def identity_estimate(record, noise_deg: float, template_px: int = 48,
                      window_m: float = 40.0, coarse_step_deg: float = 5.0):
    """Identity-mode pose estimate: orientation sweep then dense search."""
    prior = record.prior_pose.theta
    half = math.radians(noise_deg)
    n_coarse = max(3, int(round(2 * noise_deg / coarse_step_deg)) + 1)
    coarse = prior + np.linspace(-half, half, n_coarse)
    best, _ = rotation_sweep(
        record.ground, record.satellite, record.cam, record.sat_meta, coarse,
        template_px, window_m=window_m,
        prior_t=(record.prior_pose.t_x, record.prior_pose.t_z),
    )
    fine = best.theta + np.radians(np.linspace(-coarse_step_deg, coarse_step_deg, 11))
    best, _ = rotation_sweep(
        record.ground, record.satellite, record.cam, record.sat_meta, fine,
        template_px, window_m=window_m,
        prior_t=(record.prior_pose.t_x, record.prior_pose.t_z),
    )
    return best


def _write_sweep_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _report_row(setting_name, setting_value, report) -> dict:
    row = {setting_name: setting_value}
    for d, v in report.lateral_recall.items():
        row[f"lateral_d{d:g}"] = round(v, 4)
    for d, v in report.longitudinal_recall.items():
        row[f"longitudinal_d{d:g}"] = round(v, 4)
    for a, v in report.azimuth_recall.items():
        row[f"azimuth_t{a:g}"] = round(v, 4)
    row["mean_m"] = round(report.mean_error_m, 6)
    row["median_m"] = round(report.median_error_m, 6)
    return row


def sweep_rotation_noise(out_csv, noise_degs=(20, 40, 60, 80, 100, 120, 140, 160, 180),
                         n_samples: int = 12, seed: int = 0) -> list[dict]:
    """Identity-mode joint estimation under growing orientation noise."""
    rows = []
    cfg = SceneConfig.search()
    for noise in noise_degs:
        data = make_dataset(n_samples, NoiseSpec(theta_deg=noise, trans_m=10.0),
                            seed=seed + int(noise), cfg=cfg)
        estimates = [identity_estimate(r, noise) for r in data]
        report = compute_metrics(estimates, [r.gt_pose for r in data])
        rows.append(_report_row("noise_deg", noise, report))
    _write_sweep_csv(out_csv, rows)
    return rows


def sweep_search_range(out_csv, ranges_m=(10, 20, 40, 60, 80, 100),
                       n_samples: int = 20, seed: int = 0) -> list[dict]:
    """Identity-mode dense search with the orientation given, growing window."""
    rows = []
    for window in ranges_m:
        # scene must contain the window plus template support
        margin_px = int(window + 40)
        texture = 2 * ((margin_px // 2) + 24)
        cfg = replace(SceneConfig.search(), texture_size=texture,
                      gt_trans_m=window / 2.0)
        data = make_dataset(n_samples, NoiseSpec(theta_deg=0.0, trans_m=window / 2.0),
                            seed=seed + int(window), cfg=cfg)
        estimates = []
        for record in data:
            record.prior_pose = Pose3DoF(record.gt_pose.theta, 0.0, 0.0)
            pose, _ = identity_locate(record, window_m=float(window))
            estimates.append(pose)
        report = compute_metrics(estimates, [r.gt_pose for r in data])
        rows.append(_report_row("window_m", window, report))
    _write_sweep_csv(out_csv, rows)
    return rows


def sweep_iterations(out_csv, iteration_counts=(1, 2, 3, 4, 5), n_samples: int = 8,
                     seed: int = 0, cfg: Config | None = None,
                     model: ModelParams | None = None) -> list[dict]:
    """Refinement passes 1..N with the learned pose optimizer."""
    cfg = cfg or Config.overfit()
    model = model or init_model(cfg)
    data = make_dataset(n_samples, cfg.noise_spec(), seed=seed, cfg=cfg.scene_config())
    rows = []
    for n_iter in iteration_counts:
        schedule = RefineSchedule(levels=(1, 2, 3), iterations=n_iter)
        estimates = []
        for record in data:
            result = refine(record.ground, record.satellite, record.prior_pose, schedule,
                            model.synthesis, model.optimizer, record.cam, record.sat_meta)
            assert len(result.trace) == schedule.total_updates
            estimates.append(result.final_pose)
        report = compute_metrics(estimates, [r.gt_pose for r in data])
        row = _report_row("iterations", n_iter, report)
        row["updates_per_refine"] = schedule.total_updates
        rows.append(row)
    _write_sweep_csv(out_csv, rows)
    return rows


def ablation_runs(out_csv, seed: int = 0, n_samples: int = 4, steps: int = 8) -> list[dict]:
    """Uncertainty on/off and translation-supervision on/off training runs."""
    rows = []
    for use_uncertainty, translation_supervision in (
        (True, True), (False, True), (True, False),
    ):
        cfg = Config.overfit(
            seed=seed, max_steps=steps, epochs=steps,
            use_uncertainty=use_uncertainty,
            translation_supervision=translation_supervision,
        )
        data = make_dataset(n_samples, cfg.noise_spec(), seed=seed, cfg=cfg.scene_config())
        result = train(data, cfg, out_dir=None)
        estimates = [estimate_pose(r, result.model, cfg)[0] for r in data]
        report = compute_metrics(estimates, [r.gt_pose for r in data])
        row = _report_row("mode",
                          f"uncertainty={'on' if use_uncertainty else 'off'}"
                          f"|trans_sup={'on' if translation_supervision else 'off'}",
                          report)
        row["final_loss"] = round(result.history[-1]["total"], 6)
        rows.append(row)
    _write_sweep_csv(out_csv, rows)
    return rows
