"""Finite-difference validation scenarios for every differentiable path.

Each scenario builds a scalar loss from seeded random inputs and compares
tape gradients against central differences (step 1e-5, float64, relative
error < 1e-4).  Scenarios involving bilinear resampling or absolute values
sample their inputs away from the measure-zero kink sets (interpolation
cell boundaries, zero crossings) where those functions are genuinely
non-differentiable and finite differences are meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config
from .correlation import ncc_map_op
from .geometry import CameraModel, Pose3DoF, SamplingGrid, SatelliteMeta, build_grid
from .geometry import bilinear_sample
from .model import init_model
from .optimizer import pose_step_nodes
from .synthesis import PoseNodes, cross_view_transform, encode, gp_warp, synthesize_pyramid
from .tensorcore import Tape, check_gradients, make_attention, make_linear, ops
from .training import LossWeights, loss_location, loss_pose, loss_total

STEP = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_error: float
    passed: bool


def _weighted_sum(out, salt: int = 0):
    """Fixed random projection to a scalar so every output element matters.

    The weights derive only from the output shape and the salt, so repeated
    evaluations during finite differencing see the identical function.
    """
    rng = np.random.default_rng(424_243 + salt * 7919 + out.data.size)
    weights = rng.normal(size=out.data.shape)
    return ops.sum_all(ops.mul(out, weights))


def _tiny_geometry():
    # sized so the sampling grid has valid pixels at depths inside the patch
    cam = CameraModel(f_x=12.0, f_y=5.0, u_g0=7.5, v_g0=2.0, width_g=16, height_g=16,
                      cam_height=1.6)
    sat = SatelliteMeta(alpha=0.5, u_s0=3.5, v_s0=3.5, width_s=8, height_s=8)
    return cam, sat


def _clear_pose(rng: np.random.Generator, cam, sat, level: int = 0) -> Pose3DoF:
    """Pose whose sampling grid stays clear of interpolation cell edges."""
    while True:
        pose = Pose3DoF(rng.uniform(-math.pi, math.pi), rng.uniform(-0.7, 0.7),
                        rng.uniform(-0.7, 0.7))
        grid = build_grid(pose, cam, sat, level=level)
        coords = np.concatenate([grid.u[grid.valid], grid.v[grid.valid]])
        if coords.size >= 4 and np.all(np.abs(coords - np.round(coords)) > 50 * STEP):
            return pose


def _scenarios():
    def elementwise(op_name):
        def run(rng):
            func = getattr(ops, op_name)
            x = rng.normal(size=(5, 7))
            if op_name == "absolute":
                x = np.where(np.abs(x) < 0.05, 0.1, x)  # keep clear of the kink
            if op_name == "log":
                x = np.abs(x) + 0.5
            return check_gradients(
                lambda t: _weighted_sum(func(t)), [x], step=STEP, tol=TOL
            )

        return run

    checks = {}
    for name in ("exp", "log", "tanh", "sigmoid", "silu", "softplus", "absolute"):
        checks[f"op.{name}"] = elementwise(name)

    def check_binary(rng):
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(4, 5)) + 2.5  # keep divisor away from zero
        return check_gradients(
            lambda ta, tb: _weighted_sum(
                ops.add(ops.mul(ta, tb), ops.div(ta, tb))
            ),
            [a, b], step=STEP, tol=TOL,
        )

    checks["op.arith"] = check_binary

    def check_matmul(rng):
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(6, 3))
        return check_gradients(
            lambda ta, tb: _weighted_sum(ops.matmul(ta, tb)),
            [a, b], step=STEP, tol=TOL,
        )

    checks["op.matmul"] = check_matmul

    def check_linear(rng):
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(4, 3))
        b = rng.normal(size=3)
        return check_gradients(
            lambda tx, tw, tb: _weighted_sum(ops.linear(tx, tw, tb)),
            [x, w, b], step=STEP, tol=TOL,
        )

    checks["op.linear"] = check_linear

    def check_layer_norm(rng):
        x = rng.normal(size=(6, 9))
        return check_gradients(
            lambda t: _weighted_sum(ops.layer_norm(t)), [x], step=STEP, tol=TOL
        )

    checks["op.layer_norm"] = check_layer_norm

    def check_softmax(rng):
        x = rng.normal(size=(4, 7))
        return check_gradients(
            lambda t: _weighted_sum(ops.softmax(t, axis=-1)), [x], step=STEP, tol=TOL
        )

    checks["op.softmax"] = check_softmax

    def check_masked_softmax(rng):
        x = rng.normal(size=(5, 6))
        allow = rng.random((5, 6)) > 0.3
        allow[0] = False  # one empty row exercises the zero-output branch
        return check_gradients(
            lambda t: _weighted_sum(ops.masked_softmax(t, allow)),
            [x], step=STEP, tol=TOL,
        )

    checks["op.masked_softmax"] = check_masked_softmax

    def check_conv2d(rng):
        x = rng.normal(size=(3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3)) * 0.5
        b = rng.normal(size=4)
        return check_gradients(
            lambda tx, tw, tb: _weighted_sum(ops.conv2d(tx, tw, tb, stride=2, pad=1)),
            [x, w, b], step=STEP, tol=TOL,
        )

    checks["op.conv2d"] = check_conv2d

    def check_pool_ops(rng):
        x = rng.normal(size=(3, 4, 6))
        return check_gradients(
            lambda t: ops.add(
                _weighted_sum(ops.upsample2x(t), salt=1),
                _weighted_sum(ops.global_avg_pool(t), salt=2),
            ),
            [x], step=STEP, tol=TOL,
        )

    checks["op.pooling"] = check_pool_ops

    def check_gather_concat(rng):
        x = rng.normal(size=(6, 3))
        idx = rng.integers(0, 6, size=(4, 2))
        return check_gradients(
            lambda t: _weighted_sum(
                ops.concat([ops.reshape(ops.gather_rows(t, idx), (8, 3)), t], axis=0)
            ),
            [x], step=STEP, tol=TOL,
        )

    checks["op.gather_concat"] = check_gather_concat

    def check_shape_ops(rng):
        x = rng.normal(size=(3, 6, 5))  # used both as C,H,W and as a token grid
        return check_gradients(
            lambda t: ops.add(
                _weighted_sum(ops.roll2d(t, 1, -2), salt=1),
                ops.add(
                    _weighted_sum(ops.crop2d(t, 1, 1, 3, 3), salt=2),
                    ops.add(
                        ops.take_scalar(ops.reshape(t, (90,)), 5),
                        _weighted_sum(ops.mean_rows(ops.reshape(t, (18, 5))), salt=3),
                    ),
                ),
            ),
            [x], step=STEP, tol=TOL,
        )

    checks["op.shape"] = check_shape_ops

    def check_clamp(rng):
        x = rng.normal(size=(5, 5)) * 2.0
        x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, 0.5, x)  # away from clamp edges
        return check_gradients(
            lambda t: _weighted_sum(ops.clamp(t, -1.0, 1.0)), [x], step=STEP, tol=TOL
        )

    checks["op.clamp"] = check_clamp

    def check_mha(rng):
        params = make_attention(rng, "chk", 8, 2)
        q = rng.normal(size=(5, 8))
        kv = rng.normal(size=(7, 8))
        mask = rng.random((5, 7)) > 0.2
        arrays = [q, kv] + [p.data.copy() for p in params.parameters()]

        def run(tq, tkv, *param_tensors):
            out = _mha_with_tensors(tq, tkv, param_tensors, params.heads, mask)
            return _weighted_sum(out)

        return check_gradients(run, arrays, step=STEP, tol=TOL)

    checks["op.mha"] = check_mha

    def check_mha_linear_chain(rng):
        params = make_attention(rng, "chk2", 6, 3)
        w_out, b_out = make_linear(rng, "chk2.out", 6, 2)
        tokens = rng.normal(size=(4, 6))
        arrays = [tokens] + [p.data.copy() for p in params.parameters()]

        def run(tok, *param_tensors):
            out = _mha_with_tensors(tok, tok, param_tensors, params.heads, None)
            out = ops.linear(out, w_out, b_out)
            return _weighted_sum(out)

        return check_gradients(run, arrays, step=STEP, tol=TOL)

    checks["composite.mha_linear"] = check_mha_linear_chain

    def check_bilinear(rng):
        src = rng.normal(size=(4, 8, 8))
        u = rng.uniform(0.5, 6.5, size=(5, 5))
        v = rng.uniform(0.5, 6.5, size=(5, 5))
        # keep sample points off interpolation cell edges
        u = np.where(np.abs(u - np.round(u)) < 50 * STEP, u + 0.01, u)
        v = np.where(np.abs(v - np.round(v)) < 50 * STEP, v + 0.01, v)
        grid = SamplingGrid(u=u, v=v, valid=np.ones((5, 5), dtype=bool))
        return check_gradients(
            lambda t: _weighted_sum(bilinear_sample(t, grid)),
            [src], step=STEP, tol=TOL,
        )

    checks["geometry.bilinear_src"] = check_bilinear

    def check_gp_warp_pose(rng):
        cam, sat = _tiny_geometry()
        pose = _clear_pose(rng, cam, sat)
        src = rng.normal(size=(2, 8, 16))

        def run(t_src, t_theta, t_tx, t_tz):
            nodes = PoseNodes(theta=t_theta, t_x=t_tx, t_z=t_tz)
            return _weighted_sum(gp_warp(t_src, nodes, cam, sat, level=0))

        return check_gradients(
            run,
            [src, np.asarray(pose.theta), np.asarray(pose.t_x), np.asarray(pose.t_z)],
            step=STEP, tol=TOL,
        )

    checks["geometry.warp_pose"] = check_gp_warp_pose

    def check_ncc(rng):
        search = rng.normal(size=(2, 10, 10))
        template = rng.normal(size=(2, 4, 4))
        mask = (rng.random((4, 4)) > 0.25).astype(np.float64)
        mask[0, 0] = 1.0
        return check_gradients(
            lambda s, t: _weighted_sum(ncc_map_op(s, t, mask=mask)),
            [search, template], step=STEP, tol=TOL,
        )

    checks["correlation.ncc"] = check_ncc

    def check_loss_pose(rng):
        gt = Pose3DoF(0.3, 0.5, -0.2)

        def run(t_theta, t_tx, t_tz):
            nodes = PoseNodes(theta=t_theta, t_x=t_tx, t_z=t_tz)
            return loss_pose([(1, 1, nodes)], gt)

        # offsets clear of the L1 kinks and the angle-wrap boundary
        theta = np.asarray(gt.theta + rng.uniform(0.1, 0.6))
        t_x = np.asarray(gt.t_x + rng.choice([-1, 1]) * rng.uniform(0.1, 0.5))
        t_z = np.asarray(gt.t_z + rng.choice([-1, 1]) * rng.uniform(0.1, 0.5))
        return check_gradients(run, [theta, t_x, t_z], step=STEP, tol=TOL)

    checks["loss.pose"] = check_loss_pose

    def check_loss_location(rng):
        prob = rng.normal(size=(5, 6))
        return check_gradients(
            lambda t: loss_location(t, (2, 3), gamma=10.0), [prob], step=STEP, tol=TOL
        )

    checks["loss.location"] = check_loss_location

    def check_loss_total(rng):
        l1 = np.asarray(abs(rng.normal()) + 0.5)
        l2 = np.asarray(abs(rng.normal()) + 0.5)
        lam1 = np.asarray(rng.normal() - 4.0)
        lam2 = np.asarray(rng.normal() - 2.0)

        def run(t1, t2, tl1, tl2):
            term1 = ops.add(ops.mul(t1, ops.exp(ops.neg(tl1))), tl1)
            term2 = ops.add(ops.mul(t2, ops.exp(ops.neg(tl2))), tl2)
            return ops.add(term1, term2)

        return check_gradients(run, [l1, l2, lam1, lam2], step=STEP, tol=TOL)

    checks["loss.total"] = check_loss_total

    def check_synthesis_path(rng):
        cfg = Config(
            scene="training", channels=(8, 6, 4), heads=2, opt_dim=8,
            template_px=5, seed=int(rng.integers(0, 10_000)),
        )
        cam = CameraModel(f_x=16.0, f_y=16.0, u_g0=31.5, v_g0=8.0, width_g=64,
                          height_g=32, cam_height=1.6)
        sat = SatelliteMeta(alpha=0.5, u_s0=15.5, v_s0=15.5, width_s=32, height_s=32)
        model = init_model(cfg)
        # coarse ground features held as the leaf; exercises warp + attention + MLP
        g1 = rng.normal(size=(8, 4, 8)) * 0.5
        pose = _clear_pose(rng, cam, sat, level=3)

        def run(t_g1):
            warped = gp_warp(t_g1, pose, cam, sat, level=3)
            out = cross_view_transform(warped, t_g1, pose, cam, sat, model.synthesis)
            return _weighted_sum(out)

        return check_gradients(run, [g1], step=STEP, tol=TOL)

    checks["synthesis.coarse_path"] = check_synthesis_path

    def check_pose_step(rng):
        from .optimizer import init_optimizer_params

        opt = init_optimizer_params(
            rng, channels=(8, 6, 4), map_sizes=((4, 4), (8, 8), (16, 16)),
            dim=8, heads=2, window=2,
        )
        # the output head is zero-initialized (identity refinement); perturb it
        # so this check exercises real gradient flow
        opt.head[1][0].data = rng.normal(size=opt.head[1][0].data.shape)
        opt.head[1][1].data = rng.normal(size=3) * 0.1
        f1 = rng.normal(size=(8, 4, 4))
        f2 = rng.normal(size=(8, 4, 4))

        def run(t1, t2):
            tape = t1.tape
            pose = PoseNodes.constant(tape, Pose3DoF(0.2, 0.1, -0.3))
            new = pose_step_nodes(t1, t2, pose, opt, level=1)
            return ops.add(new.theta, ops.add(new.t_x, new.t_z))

        return check_gradients(run, [f1, f2], step=STEP, tol=TOL)

    checks["optimizer.pose_step"] = check_pose_step

    return checks


def _mha_with_tensors(q, kv, param_tensors, heads, mask):
    """mha wired to leaf tensors for the projections (for FD checks)."""
    wq, bq, wk, bk, wv, bv, wo, bo = param_tensors
    dim = q.data.shape[1]
    d_head = dim // heads

    def split(t, n):
        return ops.reshape(ops.transpose(ops.reshape(t, (n, heads, d_head)), (1, 0, 2)),
                           (heads, n, d_head))

    nq, nk = q.data.shape[0], kv.data.shape[0]
    qh = split(ops.linear(q, wq, bq), nq)
    kh = split(ops.linear(kv, wk, bk), nk)
    vh = split(ops.linear(kv, wv, bv), nk)
    scores = ops.mul(ops.bmm(qh, ops.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(d_head))
    if mask is None:
        weights = ops.softmax(scores, axis=-1)
    else:
        weights = ops.masked_softmax(scores, np.broadcast_to(mask, scores.data.shape))
    ctx = ops.reshape(ops.transpose(ops.bmm(weights, vh), (1, 0, 2)), (nq, dim))
    return ops.linear(ctx, wo, bo)


def run_suite(seeds=(0, 1, 2, 3, 4), verbose: bool = False) -> list[CheckResult]:
    """Run every scenario for every seed; returns per-run results."""
    results = []
    for name, scenario in _scenarios().items():
        for seed in seeds:
            rng = np.random.default_rng(seed * 1009 + 17)
            try:
                err = scenario(rng)
                results.append(CheckResult(name, seed, err, True))
            except AssertionError as exc:
                results.append(CheckResult(name, seed, math.inf, False))
                if verbose:
                    print(f"FAIL {name} seed {seed}: {exc}")
                continue
            if verbose:
                print(f"ok   {name} seed {seed}: max rel err {err:.2e}")
    return results
