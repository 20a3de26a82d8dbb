"""Training objectives and loop.

Three pieces: an L1 pose supervision summed over every refinement update
(azimuth measured in degrees on the circle so it is commensurate with the
metre terms), a soft margin loss over the dense correlation map that pushes
the ground-truth location's score above every other placement, and a
learned two-term balance

    L = L1 * exp(-lambda1) + lambda1 + L2 * exp(-lambda2) + lambda2

with lambda1/lambda2 trainable scalars (initialized at -5 and -3).

The margin sign: the printed source formulation of the location loss puts
the ground-truth score positively inside the exponent, which *rises* as the
GT placement improves.  The stated intent is the opposite, so the default
margin is gamma * (P(other) - P(gt)); ``literal_margin_sign`` flips it back
for comparison runs.

The uncertainty map receives no loss of its own; its gradient arrives only
through the location loss dividing by it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .correlation import (
    UncertaintyMap,
    gt_location_index,
    locate,
    ncc_map_op,
    wedge_box,
)
from .errors import ConfigError, NumericError
from .geometry import Pose3DoF, build_grid, wrap_angle
from .model import ModelParams, init_model, save_model
from .optimizer import RefineSchedule, refine_nodes
from .synthdata import SampleRecord
from .synthesis import LEVEL_HALVINGS, PoseNodes, encode, synthesize_pyramid
from .tensorcore import Parameter, Tape, Tensor, io, ops

TrainConfig = Config  # the shared run configuration carries all training knobs


@dataclass
class LossWeights:
    """Trainable balance weights for the two loss terms."""

    lambda1: Parameter
    lambda2: Parameter

    @classmethod
    def from_config(cls, cfg: Config) -> "LossWeights":
        return cls(
            lambda1=Parameter("loss.lambda1", np.asarray(cfg.lambda1_init)),
            lambda2=Parameter("loss.lambda2", np.asarray(cfg.lambda2_init)),
        )


def wrap_node(theta: Tensor) -> Tensor:
    """Wrap an angle tensor to (-pi, pi]; gradient passes through."""
    wrapped = np.asarray(wrap_angle(float(theta.data)))
    return theta.tape.record(wrapped, (theta,), lambda g, acc: acc(theta, g))


def loss_pose(trace_nodes, gt_pose: Pose3DoF, translation_supervision: bool = True) -> Tensor:
    """Sum of per-update L1 pose errors; azimuth in degrees on the circle."""
    if not trace_nodes:
        raise ConfigError("pose loss needs a non-empty refinement trace")
    total = None
    for _, _, pose in trace_nodes:
        d_theta = wrap_node(ops.sub(pose.theta, gt_pose.theta))
        term = ops.mul(ops.absolute(d_theta), 180.0 / math.pi)
        if translation_supervision:
            term = ops.add(term, ops.absolute(ops.sub(pose.t_x, gt_pose.t_x)))
            term = ops.add(term, ops.absolute(ops.sub(pose.t_z, gt_pose.t_z)))
        total = term if total is None else ops.add(total, term)
    return total


def loss_location(prob_map: Tensor, gt_index: tuple[int, int], gamma: float,
                  literal_margin_sign: bool = False) -> Tensor:
    """Mean soft-margin loss over all placements of the correlation map.

    Every placement contributes log(1 + exp(margin)); the GT placement's own
    term is log 2 exactly, so a constant map scores log 2.
    """
    h, w = prob_map.data.shape
    i, j = gt_index
    if not (0 <= i < h and 0 <= j < w):
        raise ConfigError(f"GT index {gt_index} outside probability map {prob_map.data.shape}")
    flat = ops.reshape(prob_map, (h * w,))
    p_gt = ops.take_scalar(flat, i * w + j)
    if literal_margin_sign:
        margin = ops.mul(ops.sub(p_gt, flat), gamma)
    else:
        margin = ops.mul(ops.sub(flat, p_gt), gamma)
    return ops.mean_all(ops.softplus(margin))


def loss_total(l1: Tensor, l2: Tensor, weights: LossWeights) -> Tensor:
    """Uncertainty-weighted combination with trainable balance scalars."""
    tape = l1.tape
    lam1 = tape.watch(weights.lambda1)
    lam2 = tape.watch(weights.lambda2)
    term1 = ops.add(ops.mul(l1, ops.exp(ops.neg(lam1))), lam1)
    term2 = ops.add(ops.mul(l2, ops.exp(ops.neg(lam2))), lam2)
    return ops.add(term1, term2)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float) -> None:
        self.t += 1
        for k, param in enumerate(self.params):
            g = grads.of(param)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1**self.t)
            v_hat = self.v[k] / (1 - self.beta2**self.t)
            param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def linear_lr(step: int, total_steps: int, start: float, end: float,
              hold_frac: float = 0.6) -> float:
    """Hold the starting rate, then decay linearly to the end rate.

    A decay that begins immediately starves the late phase of training at
    these step budgets; holding before the ramp keeps the full rate active
    while the loss is still dropping.
    """
    if total_steps <= 1:
        return start
    hold = hold_frac * (total_steps - 1)
    if step <= hold:
        return start
    frac = min((step - hold) / ((total_steps - 1) - hold), 1.0)
    return start + (end - start) * frac


def sample_losses(record: SampleRecord, model: ModelParams, cfg: Config, tape: Tape,
                  noise_rng: np.random.Generator | None = None):
    """Forward one sample through refinement + dense search on a tape.

    With ``noise_rng`` the refinement starts from a freshly perturbed prior
    (ground truth plus uniform noise inside the configured envelope), the
    usual training regime; without it the record's stored prior is used.
    Returns ``(pose_loss, location_loss)`` tensors.
    """
    cam = record.cam
    sat = record.sat_meta

    if noise_rng is not None:
        prior = Pose3DoF(
            theta=record.gt_pose.theta
            + math.radians(noise_rng.uniform(-cfg.noise_theta_deg, cfg.noise_theta_deg)),
            t_x=record.gt_pose.t_x + noise_rng.uniform(-cfg.noise_trans_m, cfg.noise_trans_m),
            t_z=record.gt_pose.t_z + noise_rng.uniform(-cfg.noise_trans_m, cfg.noise_trans_m),
        )
    else:
        prior = record.prior_pose

    ground_levels, _ = encode(record.ground, model.synthesis.ground_enc, tape)
    sat_levels, sat_unc = encode(record.satellite, model.synthesis.sat_enc, tape)

    schedule = RefineSchedule(levels=tuple(range(1, cfg.levels + 1)), iterations=cfg.iterations)
    result = refine_nodes(
        ground_levels, sat_levels, prior, schedule,
        model.synthesis, model.optimizer, cam, sat, tape,
    )
    l1 = loss_pose(result.trace_nodes, record.gt_pose, cfg.translation_supervision)

    # stage 2: re-synthesize at the estimated azimuth with zero translation
    final_theta = result.trace_nodes[-1][2].theta
    zero_pose = PoseNodes(
        theta=final_theta, t_x=tape.constant(np.asarray(0.0)), t_z=tape.constant(np.asarray(0.0))
    )
    synth = synthesize_pyramid(
        ground_levels, zero_pose, cam, sat, model.synthesis, up_to_level=cfg.corr_level
    )
    halvings = LEVEL_HALVINGS[cfg.corr_level]
    sat_l = sat.at_level(halvings)

    synth_map = synth[cfg.corr_level - 1]
    size = min(cfg.template_px, synth_map.data.shape[1], synth_map.data.shape[2])
    grid = build_grid(zero_pose.value(), cam, sat, level=halvings)
    r0, c0 = wedge_box(grid.valid, size)
    template = ops.crop2d(synth_map, r0, c0, size, size)
    mask = grid.valid[r0 : r0 + size, c0 : c0 + size].astype(np.float64)
    if mask.sum() < 4:
        raise NumericError("synthesized template support is empty; check pose/scene setup")

    search_map = sat_levels[cfg.corr_level - 1]
    ncc = ncc_map_op(search_map, template, mask=mask)

    if cfg.use_uncertainty:
        unc = sat_unc[cfg.corr_level - 1]
        h_out, w_out = ncc.data.shape
        u_cam = sat_l.u_s0 - c0
        v_cam = sat_l.v_s0 - r0
        cam_v = np.clip(np.round(np.arange(h_out) + v_cam).astype(int), 0, unc.data.shape[1] - 1)
        cam_u = np.clip(np.round(np.arange(w_out) + u_cam).astype(int), 0, unc.data.shape[2] - 1)
        idx = (cam_v[:, None] * unc.data.shape[2] + cam_u[None, :]).reshape(-1)
        unc_flat = ops.reshape(unc, (unc.data.shape[1] * unc.data.shape[2], 1))
        u_grid = ops.reshape(ops.gather_rows(unc_flat, idx), (h_out, w_out))
        prob = ops.div(ncc, u_grid)
    else:
        prob = ncc

    gt_idx = gt_location_index(sat_l, (sat_l.u_s0 - c0, sat_l.v_s0 - r0),
                               record.gt_pose, prob.data.shape)
    l2 = loss_location(prob, gt_idx, cfg.gamma, cfg.literal_margin_sign)
    return l1, l2


@dataclass
class TrainResult:
    model: ModelParams
    weights: LossWeights
    history: list[dict]
    csv_path: Path | None
    checkpoint_dir: Path | None


def train(dataset: list[SampleRecord], cfg: Config, out_dir=None,
          model: ModelParams | None = None, log_every: int = 0) -> TrainResult:
    """Deterministic training loop; aborts with a dump on non-finite loss."""
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    model = model or init_model(cfg)
    weights = LossWeights.from_config(cfg)
    params = model.parameters() + [weights.lambda1, weights.lambda2]
    adam = Adam(params)

    n = len(dataset)
    batch = max(1, min(cfg.batch_size, n))
    steps_per_epoch = (n + batch - 1) // batch
    # max_steps, when set, IS the step budget; epochs then only control the
    # checkpoint cadence
    total_steps = cfg.max_steps if cfg.max_steps else steps_per_epoch * cfg.epochs

    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    noise_rng = np.random.default_rng(cfg.seed + 2)
    history = []
    csv_path = out_dir / "losses.csv" if out_dir else None
    csv_fh = open(csv_path, "w", newline="") if csv_path else None
    writer = csv.writer(csv_fh) if csv_fh else None
    if writer:
        writer.writerow(["step", "loss_pose", "loss_location", "lambda1", "lambda2", "total"])

    step = 0
    epoch = 0
    try:
        while step < total_steps:
            order = shuffle_rng.permutation(n)
            for start in range(0, n, batch):
                if step >= total_steps:
                    break
                batch_records = [dataset[i] for i in order[start : start + batch]]
                tape = Tape()
                l1_sum, l2_sum = None, None
                try:
                    for record in batch_records:
                        l1, l2 = sample_losses(record, model, cfg, tape, noise_rng=noise_rng)
                        l1_sum = l1 if l1_sum is None else ops.add(l1_sum, l1)
                        l2_sum = l2 if l2_sum is None else ops.add(l2_sum, l2)
                except NumericError as exc:
                    _dump_bad_batch(out_dir, batch_records,
                                    {"loss_pose": math.nan, "loss_location": math.nan,
                                     "total": math.nan})
                    raise NumericError(f"forward pass failed at step {step}: {exc}") from exc
                inv = 1.0 / len(batch_records)
                l1_mean = ops.mul(l1_sum, inv)
                l2_mean = ops.mul(l2_sum, inv)
                total = loss_total(l1_mean, l2_mean, weights)

                row = {
                    "step": step,
                    "loss_pose": float(l1_mean.data),
                    "loss_location": float(l2_mean.data),
                    "lambda1": float(weights.lambda1.data),
                    "lambda2": float(weights.lambda2.data),
                    "total": float(total.data),
                }
                if not math.isfinite(row["total"]):
                    _dump_bad_batch(out_dir, batch_records, row)
                    raise NumericError(
                        f"non-finite loss at step {step}: "
                        f"pose={row['loss_pose']}, location={row['loss_location']}"
                    )

                grads = tape.backward(total)
                adam.step(grads, linear_lr(step, total_steps, cfg.lr_start, cfg.lr_end))

                history.append(row)
                if writer:
                    writer.writerow(
                        [row["step"], f"{row['loss_pose']:.9f}", f"{row['loss_location']:.9f}",
                         f"{row['lambda1']:.9f}", f"{row['lambda2']:.9f}", f"{row['total']:.9f}"]
                    )
                if log_every and step % log_every == 0:
                    print(
                        f"step {step:5d}  pose {row['loss_pose']:.4f}  "
                        f"loc {row['loss_location']:.4f}  total {row['total']:.4f}"
                    )
                step += 1
            epoch += 1
            if out_dir is not None:
                save_model(out_dir / f"epoch_{epoch:04d}", model,
                           extra={"loss.lambda1": weights.lambda1.data,
                                  "loss.lambda2": weights.lambda2.data})
    finally:
        if csv_fh:
            csv_fh.close()

    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / "final"
        save_model(ckpt, model, extra={"loss.lambda1": weights.lambda1.data,
                                       "loss.lambda2": weights.lambda2.data})
    return TrainResult(model=model, weights=weights, history=history,
                       csv_path=csv_path, checkpoint_dir=ckpt)


def _dump_bad_batch(out_dir, batch_records, row) -> None:
    if out_dir is None:
        return
    tensors = {}
    for k, record in enumerate(batch_records):
        tensors[f"batch{k}.ground"] = record.ground
        tensors[f"batch{k}.satellite"] = record.satellite
        tensors[f"batch{k}.gt"] = record.gt_pose.as_array()
        tensors[f"batch{k}.prior"] = record.prior_pose.as_array()
    tensors["losses"] = np.array([row["loss_pose"], row["loss_location"], row["total"]])
    io.save_checkpoint(Path(out_dir) / "nan_dump", tensors)


def estimate_pose(record: SampleRecord, model: ModelParams, cfg: Config):
    """Full two-stage inference for one sample.

    Refines the azimuth from the prior, re-synthesizes at zero translation,
    and dense-searches the translation.  Returns ``(pose, prob_map)``.
    """
    cam = record.cam
    sat = record.sat_meta

    tape = Tape()
    ground_levels, _ = encode(record.ground, model.synthesis.ground_enc, tape)
    sat_levels, sat_unc = encode(record.satellite, model.synthesis.sat_enc, tape)
    schedule = RefineSchedule(levels=tuple(range(1, cfg.levels + 1)), iterations=cfg.iterations)
    result = refine_nodes(ground_levels, sat_levels, record.prior_pose, schedule,
                          model.synthesis, model.optimizer, cam, sat, tape)
    theta_hat = result.final_pose.theta

    synth = synthesize_pyramid(ground_levels, Pose3DoF(theta_hat, 0.0, 0.0), cam, sat,
                               model.synthesis, up_to_level=cfg.corr_level)
    halvings = LEVEL_HALVINGS[cfg.corr_level]
    sat_l = sat.at_level(halvings)
    synth_map = synth[cfg.corr_level - 1].data
    size = min(cfg.template_px, synth_map.shape[1], synth_map.shape[2])
    grid = build_grid(Pose3DoF(theta_hat, 0.0, 0.0), cam, sat, level=halvings)
    r0, c0 = wedge_box(grid.valid, size)
    template = synth_map[:, r0 : r0 + size, c0 : c0 + size]
    mask = grid.valid[r0 : r0 + size, c0 : c0 + size].astype(np.float64)
    template_cam = (sat_l.u_s0 - c0, sat_l.v_s0 - r0)

    unc = None
    if cfg.use_uncertainty:
        unc = UncertaintyMap(values=sat_unc[cfg.corr_level - 1].data[0])
    prob, t_hat = locate(
        sat_levels[cfg.corr_level - 1].data, template, unc, sat_l, template_cam,
        window_m=cfg.search_window_m,
        prior_t=(record.prior_pose.t_x, record.prior_pose.t_z),
        template_mask=mask,
    )
    return Pose3DoF(theta_hat, t_hat[0], t_hat[1]), prob
