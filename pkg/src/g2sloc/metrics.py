"""Localization metrics: axis-decomposed recall and location-error stats.

Location errors are decomposed in the ground-truth camera frame: the
longitudinal axis points along the GT heading, the lateral axis is
perpendicular to it.  Recall at threshold d is the percentage of samples
whose absolute error along that axis is at most d; azimuth recall uses the
shortest angular distance in degrees.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .geometry import Pose3DoF, wrap_angle

DEFAULT_DISTANCES = (1.0, 3.0, 5.0)
DEFAULT_ANGLES = (1.0, 3.0, 5.0)


@dataclass
class MetricsReport:
    distances: tuple[float, ...]
    angles: tuple[float, ...]
    lateral_recall: dict[float, float]
    longitudinal_recall: dict[float, float]
    azimuth_recall: dict[float, float]
    mean_error_m: float
    median_error_m: float
    rows: list[dict] = field(default_factory=list)  # per-sample error rows


def pose_errors(estimate: Pose3DoF, gt: Pose3DoF) -> dict:
    """Per-sample error row in the GT camera frame."""
    e_x = estimate.t_x - gt.t_x
    e_z = estimate.t_z - gt.t_z
    sin_t, cos_t = math.sin(gt.theta), math.cos(gt.theta)
    longitudinal = e_x * sin_t + e_z * cos_t   # along GT heading
    lateral = e_x * cos_t - e_z * sin_t        # perpendicular to it
    return {
        "lateral_m": lateral,
        "longitudinal_m": longitudinal,
        "distance_m": math.hypot(e_x, e_z),
        "azimuth_deg": abs(math.degrees(wrap_angle(estimate.theta - gt.theta))),
    }


def compute_metrics(estimates, gts, distances=DEFAULT_DISTANCES,
                    angles=DEFAULT_ANGLES) -> MetricsReport:
    if len(estimates) != len(gts):
        raise ShapeError("estimate vs GT counts", (len(estimates),), (len(gts),))
    rows = [pose_errors(est, gt) for est, gt in zip(estimates, gts)]

    def recall(values, threshold):
        values = np.abs(np.asarray(values))
        return 100.0 * float(np.mean(values <= threshold)) if len(values) else 0.0

    lat = [r["lateral_m"] for r in rows]
    lon = [r["longitudinal_m"] for r in rows]
    azi = [r["azimuth_deg"] for r in rows]
    dist = [r["distance_m"] for r in rows]
    return MetricsReport(
        distances=tuple(distances),
        angles=tuple(angles),
        lateral_recall={d: recall(lat, d) for d in distances},
        longitudinal_recall={d: recall(lon, d) for d in distances},
        azimuth_recall={a: recall(azi, a) for a in angles},
        mean_error_m=float(np.mean(dist)) if rows else 0.0,
        median_error_m=float(np.median(dist)) if rows else 0.0,
        rows=rows,
    )


def write_metrics_csv(path, report: MetricsReport, extra: dict | None = None) -> None:
    """Aggregates then per-sample rows; the layout round-trips via
    :func:`read_metrics_csv` so aggregates can be recomputed from the rows."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["kind", "axis", "threshold", "value"]
        if extra:
            header += [f"{k}={v}" for k, v in extra.items()]
        writer.writerow(header)
        for d, v in report.lateral_recall.items():
            writer.writerow(["recall", "lateral", d, f"{v:.9f}"])
        for d, v in report.longitudinal_recall.items():
            writer.writerow(["recall", "longitudinal", d, f"{v:.9f}"])
        for a, v in report.azimuth_recall.items():
            writer.writerow(["recall", "azimuth", a, f"{v:.9f}"])
        writer.writerow(["aggregate", "mean_error_m", "", f"{report.mean_error_m:.9f}"])
        writer.writerow(["aggregate", "median_error_m", "", f"{report.median_error_m:.9f}"])
        writer.writerow(["header", "lateral_m", "longitudinal_m", "distance_m|azimuth_deg"])
        for row in report.rows:
            writer.writerow(
                ["sample", f"{row['lateral_m']:.9f}", f"{row['longitudinal_m']:.9f}",
                 f"{row['distance_m']:.9f}|{row['azimuth_deg']:.9f}"]
            )


def read_metrics_csv(path):
    """Parse a metrics CSV back into (aggregates, per-sample rows)."""
    aggregates = {}
    rows = []
    with open(path, newline="") as fh:
        for parts in csv.reader(fh):
            if not parts:
                continue
            if parts[0] == "recall":
                aggregates[(parts[1], float(parts[2]))] = float(parts[3])
            elif parts[0] == "aggregate":
                aggregates[parts[1]] = float(parts[3])
            elif parts[0] == "sample":
                dist, azi = parts[3].split("|")
                rows.append(
                    {
                        "lateral_m": float(parts[1]),
                        "longitudinal_m": float(parts[2]),
                        "distance_m": float(dist),
                        "azimuth_deg": float(azi),
                    }
                )
    return aggregates, rows
