"""Closed-form overhead-to-ground pixel correspondence on the ground plane.

Conventions, fixed here and used by every other module:

* Satellite axes: ``u`` indexes columns (longitude direction), ``v`` indexes
  rows (latitude direction).  Pixel offsets from the patch center are
  converted to metres *before* the camera translation is added::

      x = alpha * (v_s - v_s0) + t_x        # metres, v/latitude axis
      z = alpha * (u_s - u_s0) + t_z        # metres, u/longitude axis

* The camera frame is X-right / Y-down / Z-forward.  Azimuth ``theta``
  (counterclockwise positive) rotates ground coordinates into the camera::

      X = x*cos(theta) - z*sin(theta)
      Z = x*sin(theta) + z*cos(theta)

* A point ``h`` metres below the optical center has camera-frame Y = +h,
  so with image v growing downward, ground content projects *below* the
  horizon row ``v_g0``.  For ground-plane warps ``h`` is the camera height.

The forward map used throughout the pipeline is the closed form

    u_g = f_x * X / Z + u_g0,        v_g = f_y * h / Z + v_g0,

valid only where the depth ``Z`` exceeds ``EPS_DEPTH`` and the result lands
inside the ground image.  ``pinhole_oracle`` re-derives the same
correspondence through an explicit world-point / rotation-matrix / pinhole
chain and exists so tests can check the closed form against independent
arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

# Rays with forward depth below this (metres) are behind or grazing the
# camera and marked invalid rather than divided by.
EPS_DEPTH = 1e-3

_TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap an angle in radians to the interval (-pi, pi]."""
    wrapped = np.asarray(theta, dtype=np.float64)
    wrapped = wrapped - _TWO_PI * np.floor((wrapped + math.pi) / _TWO_PI)
    # floor() maps the upper boundary onto -pi; the interval is open below
    wrapped = np.where(wrapped <= -math.pi, math.pi, wrapped)
    if np.ndim(theta) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class Pose3DoF:
    """Azimuth plus planar translation of the ground camera.

    ``theta`` is normalized to (-pi, pi] on construction.  The vertical
    offset is identically zero and has no field.
    """

    theta: float = 0.0
    t_x: float = 0.0
    t_z: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))
        object.__setattr__(self, "t_x", float(self.t_x))
        object.__setattr__(self, "t_z", float(self.t_z))

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)

    def shifted(self, d_theta: float = 0.0, d_t_x: float = 0.0, d_t_z: float = 0.0) -> "Pose3DoF":
        """Additive pose update; theta re-wrapped by the constructor."""
        return Pose3DoF(self.theta + d_theta, self.t_x + d_t_x, self.t_z + d_t_z)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.t_x, self.t_z], dtype=np.float64)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics of the ground camera plus its height above ground."""

    f_x: float
    f_y: float
    u_g0: float
    v_g0: float
    width_g: int
    height_g: int
    cam_height: float

    def __post_init__(self):
        if self.f_x <= 0 or self.f_y <= 0:
            raise ConfigError(f"focal lengths must be positive, got ({self.f_x}, {self.f_y})")
        if not (0 <= self.u_g0 <= self.width_g - 1 and 0 <= self.v_g0 <= self.height_g - 1):
            raise ConfigError(
                f"principal point ({self.u_g0}, {self.v_g0}) outside "
                f"{self.width_g}x{self.height_g} image"
            )
        if self.cam_height <= 0:
            raise ConfigError(f"camera height must be positive, got {self.cam_height}")

    def at_level(self, level: int) -> "CameraModel":
        """Intrinsics after ``level`` stride-2 downsamplings.

        A stride-2 block averages pixel pairs, so full-resolution coordinate
        ``c`` maps to ``(c - (2**level - 1)/2) / 2**level`` at the level.
        """
        s = 1 << level
        if self.width_g % s or self.height_g % s:
            raise ConfigError(
                f"ground image {self.width_g}x{self.height_g} not divisible by 2^{level}"
            )
        off = (s - 1) / 2.0
        return CameraModel(
            f_x=self.f_x / s,
            f_y=self.f_y / s,
            u_g0=(self.u_g0 - off) / s,
            v_g0=(self.v_g0 - off) / s,
            width_g=self.width_g // s,
            height_g=self.height_g // s,
            cam_height=self.cam_height,
        )


@dataclass(frozen=True)
class SatelliteMeta:
    """Ground resolution and center of the overhead patch."""

    alpha: float
    u_s0: float
    v_s0: float
    width_s: int
    height_s: int

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"ground resolution must be positive, got {self.alpha}")
        if not (0 <= self.u_s0 <= self.width_s - 1 and 0 <= self.v_s0 <= self.height_s - 1):
            raise ConfigError(
                f"patch center ({self.u_s0}, {self.v_s0}) outside "
                f"{self.width_s}x{self.height_s} patch"
            )

    def at_level(self, level: int) -> "SatelliteMeta":
        """Metadata after ``level`` stride-2 downsamplings (alpha doubles)."""
        s = 1 << level
        if self.width_s % s or self.height_s % s:
            raise ConfigError(
                f"satellite patch {self.width_s}x{self.height_s} not divisible by 2^{level}"
            )
        off = (s - 1) / 2.0
        return SatelliteMeta(
            alpha=self.alpha * s,
            u_s0=(self.u_s0 - off) / s,
            v_s0=(self.v_s0 - off) / s,
            width_s=self.width_s // s,
            height_s=self.height_s // s,
        )


@dataclass
class SamplingGrid:
    """Per-overhead-pixel ground coordinates with a validity flag.

    ``u`` and ``v`` are continuous ground-image coordinates, shape (H, W)
    matching the overhead feature level they were built for.  ``valid`` is
    False exactly where the forward depth is <= EPS_DEPTH or the coordinate
    falls outside the ground image.
    """

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    level: int = 0

    @property
    def shape(self):
        return self.u.shape


def _ground_offsets(pose: Pose3DoF, sat: SatelliteMeta, u_s, v_s):
    """Metric offsets (x, z) of overhead pixels relative to the camera."""
    x = sat.alpha * (np.asarray(v_s, dtype=np.float64) - sat.v_s0) + pose.t_x
    z = sat.alpha * (np.asarray(u_s, dtype=np.float64) - sat.u_s0) + pose.t_z
    return x, z


def project_pixel(pose: Pose3DoF, cam: CameraModel, sat: SatelliteMeta, u_s, v_s, h):
    """Map overhead pixel(s) to ground-image coordinates.

    ``h`` is the vertical drop (metres) from the optical center to the
    point being projected; for ground-plane content it equals
    ``cam.cam_height``.  Accepts scalars or broadcastable arrays and returns
    ``(u_g, v_g, valid)``.  Invalid geometry is reported through the flag,
    never an exception; u_g/v_g are zeroed where invalid.
    """
    x, z = _ground_offsets(pose, sat, u_s, v_s)
    sin_t, cos_t = math.sin(pose.theta), math.cos(pose.theta)
    depth = x * sin_t + z * cos_t
    lateral = x * cos_t - z * sin_t

    safe = np.where(depth > EPS_DEPTH, depth, 1.0)
    u_g = cam.f_x * lateral / safe + cam.u_g0
    v_g = cam.f_y * np.asarray(h, dtype=np.float64) / safe + cam.v_g0

    valid = (
        (depth > EPS_DEPTH)
        & (u_g >= 0.0)
        & (u_g <= cam.width_g - 1)
        & (v_g >= 0.0)
        & (v_g <= cam.height_g - 1)
    )
    u_g = np.where(valid, u_g, 0.0)
    v_g = np.where(valid, v_g, 0.0)
    if np.ndim(u_s) == 0 and np.ndim(v_s) == 0:
        return float(u_g), float(v_g), bool(valid)
    return u_g, v_g, valid


def pinhole_oracle(pose: Pose3DoF, cam: CameraModel, sat: SatelliteMeta, u_s, v_s, h):
    """Same correspondence by explicit 3-step construction.

    1. overhead pixel -> world point in metres (y-down world frame),
    2. world -> camera frame through a full 3x3 yaw rotation matrix,
    3. pinhole projection.

    Kept free of any shared arithmetic with :func:`project_pixel` so it can
    serve as an independent reference in tests.
    """
    g_x = sat.alpha * (float(v_s) - sat.v_s0) + pose.t_x
    g_z = sat.alpha * (float(u_s) - sat.u_s0) + pose.t_z
    point_world = np.array([g_x, float(h), g_z], dtype=np.float64)

    c, s = math.cos(pose.theta), math.sin(pose.theta)
    rot_yaw = np.array(
        [
            [c, 0.0, -s],
            [0.0, 1.0, 0.0],
            [s, 0.0, c],
        ],
        dtype=np.float64,
    )
    point_cam = rot_yaw @ point_world

    depth = point_cam[2]
    if depth <= EPS_DEPTH:
        return 0.0, 0.0, False
    u_g = cam.f_x * point_cam[0] / depth + cam.u_g0
    v_g = cam.f_y * point_cam[1] / depth + cam.v_g0
    inside = 0.0 <= u_g <= cam.width_g - 1 and 0.0 <= v_g <= cam.height_g - 1
    if not inside:
        return 0.0, 0.0, False
    return float(u_g), float(v_g), True


def build_grid(pose: Pose3DoF, cam: CameraModel, sat: SatelliteMeta, level: int = 0) -> SamplingGrid:
    """Sampling grid over every overhead pixel at a pyramid level.

    ``level`` counts stride-2 downsamplings from full resolution (0 = full);
    camera intrinsics and satellite metadata are rescaled consistently.
    Pure and deterministic.
    """
    cam_l = cam.at_level(level)
    sat_l = sat.at_level(level)
    v_s, u_s = np.meshgrid(
        np.arange(sat_l.height_s, dtype=np.float64),
        np.arange(sat_l.width_s, dtype=np.float64),
        indexing="ij",
    )
    u_g, v_g, valid = project_pixel(pose, cam_l, sat_l, u_s, v_s, cam_l.cam_height)
    return SamplingGrid(u=u_g, v=v_g, valid=valid, level=level)


def grid_pose_jacobian(pose: Pose3DoF, cam: CameraModel, sat: SatelliteMeta, level: int = 0):
    """Partial derivatives of grid coordinates w.r.t. (theta, t_x, t_z).

    Returns ``(du, dv)`` where each is an array of shape (3, H, W) giving
    d(u_g)/d(theta, t_x, t_z) and d(v_g)/d(...), zero at invalid cells.
    Used by the differentiable warp so pose updates receive gradients.
    """
    cam_l = cam.at_level(level)
    sat_l = sat.at_level(level)
    v_s, u_s = np.meshgrid(
        np.arange(sat_l.height_s, dtype=np.float64),
        np.arange(sat_l.width_s, dtype=np.float64),
        indexing="ij",
    )
    x, z = _ground_offsets(pose, sat_l, u_s, v_s)
    sin_t, cos_t = math.sin(pose.theta), math.cos(pose.theta)
    depth = x * sin_t + z * cos_t
    lateral = x * cos_t - z * sin_t
    _, _, valid = project_pixel(pose, cam_l, sat_l, u_s, v_s, cam_l.cam_height)

    safe = np.where(valid, depth, 1.0)
    inv_d = 1.0 / safe
    inv_d2 = inv_d * inv_d
    h = cam_l.cam_height

    du = np.stack(
        [
            -cam_l.f_x * (1.0 + (lateral * inv_d) ** 2),
            cam_l.f_x * (cos_t * safe - lateral * sin_t) * inv_d2,
            cam_l.f_x * (-sin_t * safe - lateral * cos_t) * inv_d2,
        ]
    )
    dv = np.stack(
        [
            -cam_l.f_y * h * lateral * inv_d2,
            -cam_l.f_y * h * sin_t * inv_d2,
            -cam_l.f_y * h * cos_t * inv_d2,
        ]
    )
    du *= valid
    dv *= valid
    return du, dv


def _gather_zero_pad(src: np.ndarray, iy: np.ndarray, ix: np.ndarray) -> np.ndarray:
    """src[:, iy, ix] with zeros outside the image bounds."""
    _, height, width = src.shape
    inside = (iy >= 0) & (iy < height) & (ix >= 0) & (ix < width)
    iy_c = np.clip(iy, 0, height - 1)
    ix_c = np.clip(ix, 0, width - 1)
    out = src[:, iy_c, ix_c]
    out *= inside
    return out


def bilinear_forward(src: np.ndarray, grid: SamplingGrid, return_corners: bool = False):
    """Bilinear interpolation of (C, H, W) ``src`` at grid coordinates.

    Out-of-bounds taps contribute zero (no edge clamping) and invalid grid
    cells produce zero features.
    """
    if src.ndim != 3:
        raise ShapeError("bilinear source", src.shape, ("C", "H", "W"))
    x0 = np.floor(grid.u).astype(np.int64)
    y0 = np.floor(grid.v).astype(np.int64)
    fx = grid.u - x0
    fy = grid.v - y0

    corners = (
        _gather_zero_pad(src, y0, x0),
        _gather_zero_pad(src, y0, x0 + 1),
        _gather_zero_pad(src, y0 + 1, x0),
        _gather_zero_pad(src, y0 + 1, x0 + 1),
    )
    v00, v01, v10, v11 = corners

    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    out = top * (1.0 - fy) + bot * fy
    out *= grid.valid
    if return_corners:
        return out, corners
    return out


def bilinear_backward(src: np.ndarray, grid: SamplingGrid, grad_out: np.ndarray,
                      corners=None):
    """Gradients of :func:`bilinear_forward` w.r.t. source and coordinates.

    Returns ``(grad_src, grad_u, grad_v)``; the coordinate gradients are
    summed over channels and zero at invalid cells.  ``corners`` may carry
    the four tap values saved by the forward pass to avoid re-gathering.
    """
    channels, height, width = src.shape
    g = grad_out * grid.valid

    x0 = np.floor(grid.u).astype(np.int64)
    y0 = np.floor(grid.v).astype(np.int64)
    fx = grid.u - x0
    fy = grid.v - y0

    size = height * width
    grad_src = np.zeros(channels * size)
    chan_offsets = (np.arange(channels) * size)[:, None]
    corner_weights = (
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x0 + 1, fx * (1.0 - fy)),
        (y0 + 1, x0, (1.0 - fx) * fy),
        (y0 + 1, x0 + 1, fx * fy),
    )
    for iy, ix, w in corner_weights:
        inside = (iy >= 0) & (iy < height) & (ix >= 0) & (ix < width)
        iy_c = np.clip(iy, 0, height - 1)
        ix_c = np.clip(ix, 0, width - 1)
        contrib = (g * (w * inside)).reshape(channels, -1)
        flat_idx = (iy_c * width + ix_c).reshape(-1)
        all_idx = (chan_offsets + flat_idx[None, :]).reshape(-1)
        grad_src += np.bincount(all_idx, weights=contrib.reshape(-1), minlength=channels * size)
    grad_src = grad_src.reshape(src.shape)

    if corners is None:
        corners = (
            _gather_zero_pad(src, y0, x0),
            _gather_zero_pad(src, y0, x0 + 1),
            _gather_zero_pad(src, y0 + 1, x0),
            _gather_zero_pad(src, y0 + 1, x0 + 1),
        )
    v00, v01, v10, v11 = corners
    d_du = (v01 - v00) * (1.0 - fy) + (v11 - v10) * fy
    d_dv = (v10 - v00) * (1.0 - fx) + (v11 - v01) * fx
    grad_u = np.sum(g * d_du, axis=0)
    grad_v = np.sum(g * d_dv, axis=0)
    return grad_src, grad_u, grad_v


def bilinear_sample(src, grid: SamplingGrid):
    """Sample ground features at grid coordinates (differentiable).

    Accepts a plain (C, H, W) array, a :class:`~g2sloc.tensorcore.FeatureMap`
    (sampled as data), or a tape :class:`~g2sloc.tensorcore.Tensor`, in which
    case the operation is recorded with gradients for the source values.
    Pose gradients for warps are handled by :func:`gp_warp` in the synthesis
    module, which also differentiates through the grid coordinates.
    """
    from .tensorcore import FeatureMap, Tensor

    if isinstance(src, Tensor):
        out = bilinear_forward(src.data, grid)

        def backward(grad_out, accumulate):
            grad_src, _, _ = bilinear_backward(src.data, grid, grad_out)
            accumulate(src, grad_src)

        return src.tape.record(out, (src,), backward)
    if isinstance(src, FeatureMap):
        data = bilinear_forward(src.data, grid)
        return FeatureMap(data=data, level=grid.level)
    return bilinear_forward(np.asarray(src, dtype=np.float64), grid)
