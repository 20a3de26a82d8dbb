"""Ground-to-overhead feature synthesis.

Pipeline per pose: project ground features to the overhead grid through the
ground-plane correspondence (exact for ground-level content), make the
projected map context-aware with multi-head self-attention, then refresh
each overhead pixel by cross-attending to a column-restricted pool of
ground tokens - the column is the one overhead-to-ground coordinate that is
independent of scene height, so the pool is where the true correspondence
must lie regardless of elevation.  An MLP with a skip connection merges the
attended features, and a two-stage decoder with projected skip inputs
produces the finer pyramid levels.

Attention and the decoder run only at the coarsest level for memory; the
whole path is differentiable, including through the pose used for the
projection (the pose-update module depends on that).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import (
    CameraModel,
    Pose3DoF,
    SamplingGrid,
    SatelliteMeta,
    bilinear_backward,
    bilinear_forward,
    build_grid,
    grid_pose_jacobian,
)
from .tensorcore import (
    AttentionParams,
    FeatureMap,
    Parameter,
    Tape,
    Tensor,
    glorot_uniform,
    make_attention,
    make_conv,
    make_linear,
    ops,
)

UNCERTAINTY_CLAMP = 1e-3

# pyramid level (1 = coarsest, 1/8 res) -> number of stride-2 halvings;
# level 0 addresses the raw full-resolution image (identity-encoder mode)
LEVEL_HALVINGS = {0: 0, 1: 3, 2: 2, 3: 1}


@dataclass
class PoseNodes:
    """Pose carried through a tape recording as three scalar tensors."""

    theta: Tensor
    t_x: Tensor
    t_z: Tensor

    def value(self) -> Pose3DoF:
        return Pose3DoF(float(self.theta.data), float(self.t_x.data), float(self.t_z.data))

    @staticmethod
    def constant(tape: Tape, pose: Pose3DoF) -> "PoseNodes":
        return PoseNodes(
            theta=tape.leaf(np.asarray(pose.theta)),
            t_x=tape.leaf(np.asarray(pose.t_x)),
            t_z=tape.leaf(np.asarray(pose.t_z)),
        )


@dataclass
class EncoderParams:
    """Three stride-2 conv blocks; optional per-level uncertainty heads."""

    stem: tuple[Parameter, Parameter]
    blocks: list[list[tuple[Parameter, Parameter]]]
    unc_heads: list[tuple[Parameter, Parameter]] | None = None

    def parameters(self) -> list[Parameter]:
        out = list(self.stem)
        for block in self.blocks:
            for w, b in block:
                out += [w, b]
        if self.unc_heads:
            for w, b in self.unc_heads:
                out += [w, b]
        return out


@dataclass
class SynthesisParams:
    """Everything the ground-to-overhead synthesis path learns."""

    ground_enc: EncoderParams
    sat_enc: EncoderParams
    mhsa: AttentionParams
    mhca: AttentionParams
    row_embed: Parameter
    mlp: list[tuple[Parameter, Parameter]]
    dec2: list[tuple[Parameter, Parameter]]
    dec3: list[tuple[Parameter, Parameter]]
    radius: int
    channels: tuple[int, int, int]

    def parameters(self) -> list[Parameter]:
        out = self.ground_enc.parameters() + self.sat_enc.parameters()
        out += self.mhsa.parameters() + self.mhca.parameters() + [self.row_embed]
        for pair_list in (self.mlp, self.dec2, self.dec3):
            for w, b in pair_list:
                out += [w, b]
        return out


def _make_encoder(rng, name, channels, with_uncertainty=False) -> EncoderParams:
    c1, c2, c3 = channels  # coarse, mid, fine widths
    stem = make_conv(rng, f"{name}.stem", 1, c3)  # stride-2: full res is never convolved
    blocks = []
    widths = [(c3, c3), (c3, c2), (c2, c1)]
    for i, (cin, cout) in enumerate(widths):
        blocks.append(
            [
                make_conv(rng, f"{name}.b{i}.down", cin, cout),
                make_conv(rng, f"{name}.b{i}.mix", cout, cout),
            ]
        )
    unc = None
    if with_uncertainty:
        unc = [make_conv(rng, f"{name}.unc{lvl}", c, 1) for lvl, c in ((1, c1), (2, c2), (3, c3))]
    return EncoderParams(stem=stem, blocks=blocks, unc_heads=unc)


def init_synthesis_params(rng: np.random.Generator, channels=(128, 64, 32),
                          heads: int = 4, radius: int = 1,
                          ground_coarse_height: int = 4) -> SynthesisParams:
    c1, c2, c3 = channels
    if c1 % heads:
        raise ConfigError(f"coarse channel width {c1} not divisible by {heads} heads")
    # Both branches start from identical weights so their feature spaces are
    # comparable from the first step (the projected-minus-observed difference
    # then measures misalignment, not encoder mismatch); they diverge freely
    # during training.
    branch_seed = int(rng.integers(0, 2**32))
    mlp_hidden = c1
    mlp = [
        make_linear(rng, "synth.mlp0", c1, mlp_hidden),
        make_linear(rng, "synth.mlp1", mlp_hidden, c1, zero=True),  # skip-identity at init
    ]
    dec2 = [
        make_conv(rng, "synth.dec2.merge", c1 + c2, c2),
        make_conv(rng, "synth.dec2.mix", c2, c2),
    ]
    dec3 = [
        make_conv(rng, "synth.dec3.merge", c2 + c3, c3),
        make_conv(rng, "synth.dec3.mix", c3, c3),
    ]
    return SynthesisParams(
        ground_enc=_make_encoder(np.random.default_rng(branch_seed), "ground", channels),
        sat_enc=_make_encoder(np.random.default_rng(branch_seed), "sat", channels,
                              with_uncertainty=True),
        mhsa=make_attention(rng, "synth.mhsa", c1, heads),
        mhca=make_attention(rng, "synth.mhca", c1, heads),
        row_embed=Parameter(
            "synth.row_embed",
            glorot_uniform(rng, (ground_coarse_height, c1), ground_coarse_height, c1),
        ),
        mlp=mlp,
        dec2=dec2,
        dec3=dec3,
        radius=radius,
        channels=tuple(channels),
    )


def _conv_block(x: Tensor, pairs, stride_first: int):
    (w0, b0), (w1, b1) = pairs
    x = ops.silu(ops.conv2d(x, w0, b0, stride=stride_first, pad=1))
    return ops.silu(ops.conv2d(x, w1, b1, stride=1, pad=1))


def _instance_norm(x: Tensor) -> Tensor:
    """Zero mean / unit variance per channel over the spatial axes."""
    c, h, w = x.data.shape
    return ops.reshape(ops.layer_norm(ops.reshape(x, (c, h * w))), (c, h, w))


def encode(image, enc: EncoderParams, tape: Tape):
    """Run one encoder branch.

    Returns ``(levels, uncertainties)`` where levels are tensors at paper
    levels 1..3 (1/8, 1/4, 1/2 resolution) and uncertainties are per-level
    (1, H, W) tensors clamped inside (0, 1), or None for branches without
    uncertainty heads.
    """
    if isinstance(image, Tensor):
        x = image
    else:
        img = np.asarray(image.data if isinstance(image, FeatureMap) else image,
                         dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        x = tape.constant(img)
    if x.data.shape[1] % 8 or x.data.shape[2] % 8:
        raise ShapeError("encoder input (dims must be divisible by 8)", x.data.shape,
                         ("C", "8k", "8k"))
    x = ops.silu(ops.conv2d(x, enc.stem[0], enc.stem[1], stride=2, pad=1))  # 1/2
    fine = _conv_block(x, enc.blocks[0], stride_first=1)     # 1/2
    mid = _conv_block(fine, enc.blocks[1], stride_first=2)   # 1/4
    coarse = _conv_block(mid, enc.blocks[2], stride_first=2) # 1/8
    # per-channel spatial standardization: features become contrast codes,
    # so differences between projected and observed maps measure
    # misalignment rather than static activation offsets
    levels = [_instance_norm(coarse), _instance_norm(mid), _instance_norm(fine)]

    uncertainties = None
    if enc.unc_heads is not None:
        uncertainties = [
            ops.clamp(
                ops.sigmoid(ops.conv2d(lvl, w, b, stride=1, pad=1)),
                UNCERTAINTY_CLAMP,
                1.0 - UNCERTAINTY_CLAMP,
            )
            for lvl, (w, b) in zip(levels, enc.unc_heads)
        ]
    return levels, uncertainties


def gp_warp(src: Tensor, pose: PoseNodes | Pose3DoF, cam: CameraModel, sat: SatelliteMeta,
            level: int) -> Tensor:
    """Warp ground features onto the overhead grid (fused, differentiable).

    ``level`` counts stride-2 halvings, matching the feature resolution of
    ``src``.  Gradients flow to the source features and, when ``pose`` is a
    :class:`PoseNodes`, to all three pose components via the chain through
    the grid coordinates.
    """
    pose_val = pose.value() if isinstance(pose, PoseNodes) else pose
    grid = build_grid(pose_val, cam, sat, level=level)
    out, corners = bilinear_forward(src.data, grid, return_corners=True)

    if not isinstance(pose, PoseNodes):
        def backward_fixed(grad_out, accumulate):
            grad_src, _, _ = bilinear_backward(src.data, grid, grad_out, corners=corners)
            accumulate(src, grad_src)

        return src.tape.record(out, (src,), backward_fixed)

    def backward(grad_out, accumulate):
        grad_src, grad_u, grad_v = bilinear_backward(src.data, grid, grad_out, corners=corners)
        accumulate(src, grad_src)
        du, dv = grid_pose_jacobian(pose_val, cam, sat, level=level)
        for i, node in enumerate((pose.theta, pose.t_x, pose.t_z)):
            accumulate(node, np.asarray(np.sum(grad_u * du[i] + grad_v * dv[i])))

    return src.tape.record(out, (src, pose.theta, pose.t_x, pose.t_z), backward)


def gp_project(f_g, pose: Pose3DoF, cam: CameraModel, sat: SatelliteMeta, level: int = 3):
    """Plain-array ground-plane projection at a paper pyramid level."""
    halvings = LEVEL_HALVINGS[level]
    data = f_g.data if isinstance(f_g, FeatureMap) else np.asarray(f_g, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    grid = build_grid(pose, cam, sat, level=halvings)
    return FeatureMap(data=bilinear_forward(data, grid), level=level)


@dataclass
class ColumnPool:
    """Per-overhead-pixel candidate tokens in the ground feature map.

    ``indices`` is (n_pixels, pool) into row-major ground tokens and
    ``mask`` marks real entries; border pixels have clipped pools and
    pixels with no ground correspondence have empty ones.
    """

    indices: np.ndarray
    mask: np.ndarray
    radius: int


def column_index(u_s, v_s, pose: Pose3DoF, cam: CameraModel, sat: SatelliteMeta,
                 level: int = 1):
    """Ground column containing the overhead pixel's correspondence.

    The column coordinate is independent of scene height, so validity here
    requires only positive depth and the column landing inside the ground
    image; the row coordinate is deliberately ignored (content above the
    ground plane may sit on any row of the column).  Halves round away from
    the image center (documented tie-break).  Returns -1 for pixels with no
    valid column (behind the camera or outside the field of view).
    """
    import math as _math

    from .geometry import EPS_DEPTH, _ground_offsets

    halvings = LEVEL_HALVINGS[level]
    cam_l = cam.at_level(halvings)
    sat_l = sat.at_level(halvings)

    x, z = _ground_offsets(pose, sat_l, u_s, v_s)
    sin_t, cos_t = _math.sin(pose.theta), _math.cos(pose.theta)
    depth = x * sin_t + z * cos_t
    lateral = x * cos_t - z * sin_t
    safe = np.where(depth > EPS_DEPTH, depth, 1.0)
    u_g = np.asarray(cam_l.f_x * lateral / safe + cam_l.u_g0)

    # nearest column; exact halves round away from the image center
    frac = u_g - np.floor(u_g)
    is_half = np.abs(frac - 0.5) < 1e-12
    away = np.where(u_g >= cam_l.u_g0, np.ceil(u_g), np.floor(u_g))
    col = np.where(is_half, away, np.floor(u_g + 0.5))
    valid = (depth > EPS_DEPTH) & (col >= 0) & (col <= cam_l.width_g - 1)
    col = np.where(valid, np.clip(col, 0, cam_l.width_g - 1), -1).astype(np.int64)
    if np.ndim(u_s) == 0 and np.ndim(v_s) == 0:
        return int(col)
    return col


def build_column_pool(pose: Pose3DoF, cam: CameraModel, sat: SatelliteMeta,
                      radius: int, level: int = 1) -> ColumnPool:
    """Token pools covering columns u_g - r .. u_g + r (full column height)."""
    halvings = LEVEL_HALVINGS[level]
    cam_l = cam.at_level(halvings)
    sat_l = sat.at_level(halvings)
    if radius >= cam_l.width_g:
        raise ConfigError(
            f"column radius {radius} exceeds ground width {cam_l.width_g} at level {level}"
        )
    height_g, width_g = cam_l.height_g, cam_l.width_g

    v_s, u_s = np.meshgrid(
        np.arange(sat_l.height_s), np.arange(sat_l.width_s), indexing="ij"
    )
    cols = column_index(u_s, v_s, pose, cam, sat, level=level).reshape(-1)

    pool = (2 * radius + 1) * height_g
    n_pix = cols.size
    col_offsets = np.arange(-radius, radius + 1)
    cand_cols = cols[:, None] + col_offsets[None, :]          # (n_pix, 2r+1)
    col_ok = (cand_cols >= 0) & (cand_cols < width_g) & (cols[:, None] >= 0)
    cand_cols = np.clip(cand_cols, 0, width_g - 1)

    rows = np.arange(height_g)
    indices = (rows[None, None, :] * width_g + cand_cols[:, :, None]).reshape(n_pix, pool)
    mask = np.broadcast_to(col_ok[:, :, None], (n_pix, 2 * radius + 1, height_g)).reshape(
        n_pix, pool
    )
    indices = np.where(mask, indices, 0)
    return ColumnPool(indices=indices, mask=mask.copy(), radius=radius)


def _to_tokens(x: Tensor) -> Tensor:
    """(C, H, W) -> (H*W, C)."""
    c, h, w = x.data.shape
    return ops.transpose(ops.reshape(x, (c, h * w)), (1, 0))


def _to_map(x: Tensor, height: int, width: int) -> Tensor:
    """(H*W, C) -> (C, H, W)."""
    n, c = x.data.shape
    return ops.reshape(ops.transpose(x, (1, 0)), (c, height, width))


def _pool_attention(query_tokens: Tensor, ground_tokens: Tensor, pool: ColumnPool,
                    params: AttentionParams):
    """Cross-attention where each query attends to its own candidate pool.

    Queries with empty pools produce zero output (their softmax row is
    empty), which downstream code treats as "no correspondence".
    """
    n_q = query_tokens.data.shape[0]
    heads = params.heads
    d_head = params.dim // heads

    q = ops.linear(query_tokens, params.w_q, params.b_q)           # (n_q, D)
    k_src = ops.gather_rows(ops.linear(ground_tokens, params.w_k, params.b_k), pool.indices)
    v_src = ops.gather_rows(ops.linear(ground_tokens, params.w_v, params.b_v), pool.indices)

    pool_n = pool.indices.shape[1]
    q = ops.reshape(q, (n_q, heads, 1, d_head))
    k = ops.transpose(ops.reshape(k_src, (n_q, pool_n, heads, d_head)), (0, 2, 1, 3))
    v = ops.transpose(ops.reshape(v_src, (n_q, pool_n, heads, d_head)), (0, 2, 1, 3))

    q = ops.reshape(q, (n_q * heads, 1, d_head))
    k = ops.reshape(k, (n_q * heads, pool_n, d_head))
    v = ops.reshape(v, (n_q * heads, pool_n, d_head))

    scores = ops.mul(ops.bmm(q, ops.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d_head))
    allow = np.broadcast_to(
        pool.mask[:, None, None, :], (n_q, heads, 1, pool_n)
    ).reshape(n_q * heads, 1, pool_n)
    weights = ops.masked_softmax(scores, allow)
    context = ops.reshape(ops.bmm(weights, v), (n_q, heads * d_head))
    out = ops.linear(context, params.w_o, params.b_o)
    # empty pools mean "no ground observation": force those outputs to zero
    has_pool = pool.mask.any(axis=1).astype(np.float64)[:, None]
    return ops.mul(out, has_pool)


def cross_view_transform(f_gp: Tensor, f_ground: Tensor, pose: Pose3DoF,
                         cam: CameraModel, sat: SatelliteMeta,
                         params: SynthesisParams) -> Tensor:
    """Coarse-level synthesized overhead map.

    Query embedding comes from self-attention over the projected map; keys
    and values are ground tokens (plus a learned per-row embedding) gathered
    from each pixel's column pool; the attended update passes through an MLP
    and adds back onto the projection.
    """
    c, hs, ws = f_gp.data.shape
    gh, gw = f_ground.data.shape[1], f_ground.data.shape[2]

    queries = _to_tokens(f_gp)
    mhsa_out = ops.mha(queries, queries, queries, params.mhsa)

    # row position is the ambiguous coordinate for ground tokens; give keys
    # and values a learned per-row embedding before projection
    row_embed = ops.reshape(f_ground.tape.watch(params.row_embed), (gh, 1, c))
    ground_tokens = ops.reshape(
        ops.add(ops.reshape(_to_tokens(f_ground), (gh, gw, c)), row_embed), (gh * gw, c)
    )

    pool = build_column_pool(pose, cam, sat, params.radius, level=1)
    attended = _pool_attention(mhsa_out, ground_tokens, pool, params.mhca)

    (w0, b0), (w1, b1) = params.mlp
    update = ops.linear(ops.silu(ops.linear(attended, w0, b0)), w1, b1)
    return ops.add(f_gp, _to_map(update, hs, ws))


def _decode_step(f_coarse: Tensor, f_gp_fine: Tensor, pairs):
    x = ops.concat([ops.upsample2x(f_coarse), f_gp_fine], axis=0)
    (w0, b0), (w1, b1) = pairs
    x = ops.silu(ops.conv2d(x, w0, b0, stride=1, pad=1))
    return ops.silu(ops.conv2d(x, w1, b1, stride=1, pad=1))


def synthesize_pyramid(ground_levels, pose: PoseNodes | Pose3DoF, cam: CameraModel,
                       sat: SatelliteMeta, params: SynthesisParams,
                       up_to_level: int = 3) -> list[Tensor]:
    """Overhead feature maps for paper levels 1..up_to_level at one pose."""
    pose_val = pose.value() if isinstance(pose, PoseNodes) else pose
    f_gp1 = gp_warp(ground_levels[0], pose, cam, sat, level=LEVEL_HALVINGS[1])
    out = [cross_view_transform(f_gp1, ground_levels[0], pose_val, cam, sat, params)]
    if up_to_level >= 2:
        f_gp2 = gp_warp(ground_levels[1], pose, cam, sat, level=LEVEL_HALVINGS[2])
        out.append(_decode_step(out[0], f_gp2, params.dec2))
    if up_to_level >= 3:
        f_gp3 = gp_warp(ground_levels[2], pose, cam, sat, level=LEVEL_HALVINGS[3])
        out.append(_decode_step(out[1], f_gp3, params.dec3))
    return out


# Plain-array convenience wrappers (inference / tests).

def encode_ground(image, params: SynthesisParams):
    tape = Tape()
    levels, _ = encode(image, params.ground_enc, tape)
    return [FeatureMap(data=t.data, level=i + 1) for i, t in enumerate(levels)]


def encode_satellite(image, params: SynthesisParams):
    tape = Tape()
    levels, unc = encode(image, params.sat_enc, tape)
    maps = [FeatureMap(data=t.data, level=i + 1) for i, t in enumerate(levels)]
    unc_maps = [FeatureMap(data=u.data, level=i + 1) for i, u in enumerate(unc)]
    return maps, unc_maps


def synthesize_overhead(image, pose: Pose3DoF, cam: CameraModel, sat: SatelliteMeta,
                        params: SynthesisParams):
    """Image -> synthesized overhead pyramid as FeatureMaps (no gradients kept)."""
    tape = Tape()
    levels, _ = encode(image, params.ground_enc, tape)
    synth = synthesize_pyramid(levels, pose, cam, sat, params)
    return [FeatureMap(data=t.data, level=i + 1) for i, t in enumerate(synth)]
