"""Pose refinement tests: schedule bookkeeping, the zero-init identity,
update bounding, and trace export."""

import csv
import math

import numpy as np
import pytest

from g2sloc.config import Config
from g2sloc.errors import ConfigError, ShapeError
from g2sloc.geometry import Pose3DoF
from g2sloc.model import init_model
from g2sloc.optimizer import (
    RefineSchedule,
    export_trace_csv,
    pose_step,
    pose_step_nodes,
    refine,
)
from g2sloc.synthdata import SceneConfig, make_scene, render_pair
from g2sloc.synthesis import PoseNodes
from g2sloc.tensorcore import Tape


def make_sample(seed=0):
    cfg = Config.overfit(seed=seed)
    rng = np.random.default_rng(seed)
    spec = make_scene(rng, cfg.scene_config())
    record = render_pair(spec, noise=cfg.noise_spec(), rng=rng)
    return cfg, init_model(cfg), record


class TestSchedule:
    def test_total_updates(self):
        assert RefineSchedule().total_updates == 6  # 3 levels x 2 passes
        assert RefineSchedule(levels=(1, 2, 3), iterations=5).total_updates == 15

    def test_validation(self):
        with pytest.raises(ConfigError):
            RefineSchedule(iterations=0)
        with pytest.raises(ConfigError):
            RefineSchedule(levels=(0, 1))


class TestPoseStep:
    def test_zero_init_head_is_identity(self):
        cfg, model, record = make_sample()
        rng = np.random.default_rng(1)
        f1 = rng.normal(size=(cfg.channels[0], 12, 12))
        f2 = rng.normal(size=(cfg.channels[0], 12, 12))
        pose = Pose3DoF(0.7, 1.0, -2.0)
        out = pose_step(f1, f2, pose, model.optimizer, level=1)
        assert out == pose

    def test_update_is_bounded(self):
        cfg, model, record = make_sample()
        rng = np.random.default_rng(2)
        # blow up the head so tanh saturates; steps must respect the bounds
        model.optimizer.head[1][0].data = rng.normal(size=model.optimizer.head[1][0].data.shape) * 1e3
        f1 = rng.normal(size=(cfg.channels[0], 12, 12))
        f2 = rng.normal(size=(cfg.channels[0], 12, 12))
        pose = Pose3DoF(0.0, 0.0, 0.0)
        out = pose_step(f1, f2, pose, model.optimizer, level=1)
        assert abs(out.theta) <= math.radians(model.optimizer.max_step_deg) + 1e-12
        assert abs(out.t_x) <= model.optimizer.max_step_m + 1e-12
        assert abs(out.t_z) <= model.optimizer.max_step_m + 1e-12

    def test_shape_mismatch(self):
        cfg, model, record = make_sample()
        with pytest.raises(ShapeError):
            pose_step(np.zeros((8, 12, 12)), np.zeros((8, 10, 10)), Pose3DoF(),
                      model.optimizer, level=1)

    def test_window_divisibility_enforced(self):
        cfg, model, record = make_sample()
        with pytest.raises(ConfigError):
            pose_step(np.zeros((24, 10, 10)), np.zeros((24, 10, 10)), Pose3DoF(),
                      model.optimizer, level=1)

    def test_theta_stays_wrapped(self):
        cfg, model, record = make_sample()
        rng = np.random.default_rng(3)
        model.optimizer.head[1][1].data = np.array([1e3, 0.0, 0.0])  # bias pushes theta
        f1 = rng.normal(size=(cfg.channels[0], 12, 12))
        f2 = rng.normal(size=(cfg.channels[0], 12, 12))
        pose = Pose3DoF(math.pi - 0.01)
        out = pose_step(f1, f2, pose, model.optimizer, level=1)
        assert -math.pi < out.theta <= math.pi


class TestRefine:
    def test_trace_length_and_identity(self):
        cfg, model, record = make_sample()
        schedule = RefineSchedule(levels=(1, 2, 3), iterations=2)
        result = refine(record.ground, record.satellite, record.prior_pose, schedule,
                        model.synthesis, model.optimizer, record.cam, record.sat_meta)
        assert len(result.trace) == 6
        # zero-initialized output head: the whole refinement is the identity
        assert result.final_pose == record.prior_pose
        for _, _, pose in result.trace:
            assert pose == record.prior_pose
            assert -math.pi < pose.theta <= math.pi

    def test_level_iteration_ordering(self):
        cfg, model, record = make_sample(1)
        schedule = RefineSchedule(levels=(1, 2, 3), iterations=2)
        result = refine(record.ground, record.satellite, record.prior_pose, schedule,
                        model.synthesis, model.optimizer, record.cam, record.sat_meta)
        assert [(lvl, it) for lvl, it, _ in result.trace] == [
            (1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (3, 2)
        ]

    def test_deterministic(self):
        cfg, model, record = make_sample(2)
        rng = np.random.default_rng(9)
        model.optimizer.head[1][0].data = rng.normal(size=model.optimizer.head[1][0].data.shape) * 0.01
        schedule = RefineSchedule()
        runs = []
        for _ in range(2):
            result = refine(record.ground, record.satellite, record.prior_pose, schedule,
                            model.synthesis, model.optimizer, record.cam, record.sat_meta)
            runs.append([p for _, _, p in result.trace])
        assert runs[0] == runs[1]

    def test_iteration_sweep_counts(self):
        cfg, model, record = make_sample(3)
        for n in range(1, 6):
            schedule = RefineSchedule(iterations=n)
            result = refine(record.ground, record.satellite, record.prior_pose, schedule,
                            model.synthesis, model.optimizer, record.cam, record.sat_meta)
            assert len(result.trace) == 3 * n


class TestTraceExport:
    def test_csv_columns_and_values(self, tmp_path):
        trace = [
            (1, 1, Pose3DoF(0.1, 1.0, 2.0)),
            (2, 1, Pose3DoF(-0.2, -1.5, 0.5)),
        ]
        path = tmp_path / "trace.csv"
        export_trace_csv(path, trace)
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["level", "iter", "theta_deg", "tx_m", "tz_m"]
        assert float(rows[0]["theta_deg"]) == pytest.approx(math.degrees(0.1))
        assert float(rows[1]["tx_m"]) == pytest.approx(-1.5)


class TestPoseStepGradients:
    def test_input_gradient_matches_finite_differences(self):
        from g2sloc.optimizer import init_optimizer_params

        rng = np.random.default_rng(4)
        opt = init_optimizer_params(rng, channels=(8, 6, 4),
                                    map_sizes=((4, 4), (8, 8), (16, 16)),
                                    dim=8, heads=2, window=2)
        opt.head[1][0].data = rng.normal(size=opt.head[1][0].data.shape)
        f1 = rng.normal(size=(8, 4, 4))
        f2 = rng.normal(size=(8, 4, 4))

        def theta_of(f1_arr):
            tape = Tape()
            return pose_step_nodes(tape.leaf(f1_arr), tape.leaf(f2),
                                   PoseNodes.constant(tape, Pose3DoF()), opt, level=1)

        tape = Tape()
        t1 = tape.leaf(f1)
        nodes = pose_step_nodes(t1, tape.leaf(f2), PoseNodes.constant(tape, Pose3DoF()),
                                opt, level=1)
        grads = tape.backward(nodes.theta)
        analytic = grads.of(t1)

        step = 1e-5
        numeric = np.zeros_like(f1)
        flat = numeric.reshape(-1)
        src = f1.reshape(-1)
        for i in range(src.size):
            src[i] += step
            up = float(theta_of(f1).theta.data)
            src[i] -= 2 * step
            down = float(theta_of(f1).theta.data)
            src[i] += step
            flat[i] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert np.max(np.abs(analytic - numeric) / denom) < 1e-4
