"""Learned pose refinement.

The optimizer consumes the difference between the synthesized and observed
overhead feature maps and regresses a bounded pose update.  Two windowed
attention blocks (the second with a cyclic half-window shift) give it global
context before pooling, and a two-layer head maps the pooled vector to
(d_azimuth in degrees, d_t_x, d_t_z in metres), squashed by tanh and scaled
by configurable maximum step sizes.  The head's final layer is
zero-initialized, so an untrained optimizer is exactly the identity on
poses.

Refinement runs coarse to fine over the three pyramid levels and repeats;
with L levels and N passes the trace contains exactly L*N poses.  The
azimuth estimate is the final output of this stage; the translation
estimate is supervised during training but the dense correlation search
produces the translation actually reported.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import CameraModel, Pose3DoF, SatelliteMeta, wrap_angle
from .synthesis import PoseNodes, SynthesisParams, encode, synthesize_pyramid
from .tensorcore import (
    AttentionParams,
    Parameter,
    Tape,
    Tensor,
    make_attention,
    make_linear,
    ops,
)


@dataclass
class SwinBlockParams:
    norm1_scale: Parameter
    norm1_shift: Parameter
    attn: AttentionParams
    norm2_scale: Parameter
    norm2_shift: Parameter
    mlp: list[tuple[Parameter, Parameter]]
    shift: int

    def parameters(self):
        out = [self.norm1_scale, self.norm1_shift, self.norm2_scale, self.norm2_shift]
        out += self.attn.parameters()
        for w, b in self.mlp:
            out += [w, b]
        return out


@dataclass
class OptimizerParams:
    """Shared refinement core with per-level input projections.

    Tokens receive a learned per-position embedding after projection;
    without it the window attention plus mean pooling would be nearly
    blind to the spatial arrangement that encodes the pose misalignment.
    """

    in_proj: list[tuple[Parameter, Parameter]]  # one per pyramid level
    pos_embed: list[Parameter]                  # one (H*W, dim) table per level
    blocks: list[SwinBlockParams]
    pool_query: Parameter                       # attention pooling over tokens
    head: list[tuple[Parameter, Parameter]]     # final layer zero-initialized
    window: int = 4
    max_step_deg: float = 45.0
    max_step_m: float = 10.0

    def parameters(self):
        out = []
        for w, b in self.in_proj:
            out += [w, b]
        out += list(self.pos_embed)
        for block in self.blocks:
            out += block.parameters()
        out.append(self.pool_query)
        for w, b in self.head:
            out += [w, b]
        return out


@dataclass
class RefineSchedule:
    """Level order (coarse to fine) and number of repeats."""

    levels: tuple[int, ...] = (1, 2, 3)
    iterations: int = 2

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if any(lvl not in (1, 2, 3) for lvl in self.levels):
            raise ConfigError(f"levels must be within 1..3, got {self.levels}")

    @property
    def total_updates(self) -> int:
        return len(self.levels) * self.iterations


def init_optimizer_params(rng: np.random.Generator, channels=(128, 64, 32),
                          map_sizes=((8, 8), (16, 16), (32, 32)),
                          dim: int = 32, heads: int = 4, window: int = 4,
                          max_step_deg: float = 45.0, max_step_m: float = 10.0) -> OptimizerParams:
    if dim % heads:
        raise ConfigError(f"optimizer dim {dim} not divisible by {heads} heads")
    in_proj = [make_linear(rng, f"opt.in{lvl}", c, dim) for lvl, c in zip((1, 2, 3), channels)]
    from .tensorcore import glorot_uniform

    pos_embed = [
        Parameter(f"opt.pos{lvl}", glorot_uniform(rng, (h * w, dim), h * w, dim))
        for lvl, (h, w) in zip((1, 2, 3), map_sizes)
    ]
    blocks = []
    for i, shift in enumerate((0, window // 2)):
        blocks.append(
            SwinBlockParams(
                norm1_scale=Parameter(f"opt.b{i}.n1s", np.ones(dim)),
                norm1_shift=Parameter(f"opt.b{i}.n1b", np.zeros(dim)),
                attn=make_attention(rng, f"opt.b{i}.attn", dim, heads),
                norm2_scale=Parameter(f"opt.b{i}.n2s", np.ones(dim)),
                norm2_shift=Parameter(f"opt.b{i}.n2b", np.zeros(dim)),
                mlp=[
                    make_linear(rng, f"opt.b{i}.mlp0", dim, 2 * dim),
                    make_linear(rng, f"opt.b{i}.mlp1", 2 * dim, dim),
                ],
                shift=shift,
            )
        )
    head = [
        make_linear(rng, "opt.head0", dim, dim),
        make_linear(rng, "opt.head1", dim, 3, zero=True),
    ]
    pool_query = Parameter("opt.pool_q", glorot_uniform(rng, (dim,), dim, 1))
    return OptimizerParams(
        in_proj=in_proj, pos_embed=pos_embed, blocks=blocks, pool_query=pool_query,
        head=head, window=window, max_step_deg=max_step_deg, max_step_m=max_step_m,
    )


def _windowed_attention(tokens: Tensor, height: int, width: int,
                        block: SwinBlockParams, window: int) -> Tensor:
    """Attention within (window x window) tiles of the token grid.

    The block's ``shift`` cyclically rolls the grid first so tile borders
    move between the two blocks.
    """
    n, dim = tokens.data.shape
    heads = block.attn.heads
    d_head = dim // heads
    grid = ops.reshape(tokens, (height, width, dim))
    if block.shift:
        grid = ops.roll2d(grid, -block.shift, -block.shift)

    nh, nw = height // window, width // window
    tiles = ops.reshape(grid, (nh, window, nw, window, dim))
    tiles = ops.transpose(tiles, (0, 2, 1, 3, 4))
    tiles = ops.reshape(tiles, (nh * nw, window * window, dim))

    def project(weight, bias):
        flat = ops.reshape(tiles, (nh * nw * window * window, dim))
        proj = ops.linear(flat, weight, bias)
        per_head = ops.reshape(proj, (nh * nw, window * window, heads, d_head))
        return ops.reshape(
            ops.transpose(per_head, (0, 2, 1, 3)), (nh * nw * heads, window * window, d_head)
        )

    q = project(block.attn.w_q, block.attn.b_q)
    k = project(block.attn.w_k, block.attn.b_k)
    v = project(block.attn.w_v, block.attn.b_v)
    scores = ops.mul(ops.bmm(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d_head))
    weights = ops.softmax(scores, axis=-1)
    ctx = ops.bmm(weights, v)
    ctx = ops.reshape(ctx, (nh * nw, heads, window * window, d_head))
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (nh * nw * window * window, dim))
    out = ops.linear(ctx, block.attn.w_o, block.attn.b_o)

    out = ops.reshape(out, (nh, nw, window, window, dim))
    out = ops.transpose(out, (0, 2, 1, 3, 4))
    grid_out = ops.reshape(out, (height, width, dim))
    if block.shift:
        grid_out = ops.roll2d(grid_out, block.shift, block.shift)
    return ops.reshape(grid_out, (n, dim))


def _swin_block(tokens: Tensor, height: int, width: int, block: SwinBlockParams,
                window: int) -> Tensor:
    tape = tokens.tape
    scale1 = tape.watch(block.norm1_scale)
    shift1 = tape.watch(block.norm1_shift)
    normed = ops.add(ops.mul(ops.layer_norm(tokens), scale1), shift1)
    tokens = ops.add(tokens, _windowed_attention(normed, height, width, block, window))

    scale2 = tape.watch(block.norm2_scale)
    shift2 = tape.watch(block.norm2_shift)
    normed = ops.add(ops.mul(ops.layer_norm(tokens), scale2), shift2)
    (w0, b0), (w1, b1) = block.mlp
    mlp_out = ops.linear(ops.silu(ops.linear(normed, w0, b0)), w1, b1)
    return ops.add(tokens, mlp_out)


def pose_step_nodes(f_g2s: Tensor, f_s: Tensor, pose: PoseNodes,
                    params: OptimizerParams, level: int) -> PoseNodes:
    """One differentiable pose update from a feature-difference map."""
    if f_g2s.data.shape != f_s.data.shape:
        raise ShapeError("pose step feature maps", f_g2s.data.shape, f_s.data.shape)
    c, height, width = f_g2s.data.shape
    if height % params.window or width % params.window:
        raise ConfigError(
            f"feature map {height}x{width} not divisible by window {params.window}"
        )

    diff = ops.sub(f_g2s, f_s)
    tokens = ops.transpose(ops.reshape(diff, (c, height * width)), (1, 0))
    w_in, b_in = params.in_proj[level - 1]
    tokens = ops.linear(tokens, w_in, b_in)
    pos = f_g2s.tape.watch(params.pos_embed[level - 1])
    if pos.data.shape[0] != height * width:
        raise ConfigError(
            f"positional table for level {level} covers {pos.data.shape[0]} tokens, "
            f"feature map has {height * width}"
        )
    tokens = ops.add(tokens, pos)
    for block in params.blocks:
        tokens = _swin_block(tokens, height, width, block, params.window)

    # attention pooling: a learned query decides which tokens matter, so a
    # small misaligned region is not averaged away by the static background
    dim = tokens.data.shape[1]
    query = ops.reshape(f_g2s.tape.watch(params.pool_query), (dim, 1))
    weights = ops.softmax(
        ops.transpose(ops.mul(ops.matmul(tokens, query), 1.0 / math.sqrt(dim)), (1, 0)),
        axis=-1,
    )
    pooled = ops.reshape(ops.matmul(weights, tokens), (dim,))
    (w0, b0), (w1, b1) = params.head
    raw = ops.linear(ops.silu(ops.linear(ops.reshape(pooled, (1, -1)), w0, b0)), w1, b1)
    bounded = ops.tanh(ops.reshape(raw, (3,)))
    scaled = ops.mul(
        bounded,
        np.array([params.max_step_deg, params.max_step_m, params.max_step_m]),
    )

    d_theta_rad = ops.mul(ops.take_scalar(scaled, 0), math.pi / 180.0)
    new_theta = _wrap_node(ops.add(pose.theta, d_theta_rad))
    return PoseNodes(
        theta=new_theta,
        t_x=ops.add(pose.t_x, ops.take_scalar(scaled, 1)),
        t_z=ops.add(pose.t_z, ops.take_scalar(scaled, 2)),
    )


def _wrap_node(theta: Tensor) -> Tensor:
    """Wrap to (-pi, pi]; a constant offset, so the gradient passes through."""
    wrapped = np.asarray(wrap_angle(float(theta.data)))
    return theta.tape.record(wrapped, (theta,), lambda g, acc: acc(theta, g))


def pose_step(f_g2s, f_s, pose: Pose3DoF, params: OptimizerParams, level: int = 1) -> Pose3DoF:
    """Plain-array pose update (records and discards a throwaway tape)."""
    tape = Tape()
    f1 = tape.constant(np.asarray(f_g2s.data if hasattr(f_g2s, "data") else f_g2s))
    f2 = tape.constant(np.asarray(f_s.data if hasattr(f_s, "data") else f_s))
    nodes = pose_step_nodes(f1, f2, PoseNodes.constant(tape, pose), params, level)
    return nodes.value()


@dataclass
class RefineResult:
    final_pose: Pose3DoF
    trace: list[tuple[int, int, Pose3DoF]]  # (level, iteration, pose)
    trace_nodes: list[tuple[int, int, PoseNodes]] = field(default_factory=list)


def refine_nodes(ground_levels, sat_levels, init_pose: Pose3DoF,
                 schedule: RefineSchedule, synth_params: SynthesisParams,
                 opt_params: OptimizerParams, cam: CameraModel, sat: SatelliteMeta,
                 tape: Tape) -> RefineResult:
    """Tape-recorded refinement over encoded pyramids (shared by training)."""
    pose = PoseNodes.constant(tape, init_pose)
    trace_nodes = []
    for iteration in range(1, schedule.iterations + 1):
        for level in schedule.levels:
            synth = synthesize_pyramid(
                ground_levels, pose, cam, sat, synth_params, up_to_level=level
            )
            pose = pose_step_nodes(synth[level - 1], sat_levels[level - 1], pose,
                                   opt_params, level)
            trace_nodes.append((level, iteration, pose))
    trace = [(lvl, it, nodes.value()) for lvl, it, nodes in trace_nodes]
    return RefineResult(final_pose=trace[-1][2], trace=trace, trace_nodes=trace_nodes)


def refine(ground_image, sat_image, init_pose: Pose3DoF, schedule: RefineSchedule,
           synth_params: SynthesisParams, opt_params: OptimizerParams,
           cam: CameraModel, sat: SatelliteMeta) -> RefineResult:
    """Full refinement from raw images (pyramids encoded once per call)."""
    tape = Tape()
    ground_levels, _ = encode(ground_image, synth_params.ground_enc, tape)
    sat_levels, _ = encode(sat_image, synth_params.sat_enc, tape)
    result = refine_nodes(ground_levels, sat_levels, init_pose, schedule,
                          synth_params, opt_params, cam, sat, tape)
    return RefineResult(final_pose=result.final_pose, trace=result.trace)


def export_trace_csv(path, trace) -> None:
    """CSV with columns level, iter, theta_deg, tx_m, tz_m."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "iter", "theta_deg", "tx_m", "tz_m"])
        for level, iteration, pose in trace:
            writer.writerow(
                [level, iteration, f"{pose.theta_deg:.9f}", f"{pose.t_x:.9f}", f"{pose.t_z:.9f}"]
            )
