"""Synthetic planar-scene generator: procedural overhead textures rendered
into ground/overhead image pairs with exact ground-truth poses.

The renderer inverts the ground-plane projection used by the rest of the
pipeline, so a rendered pair is an exact oracle for it: warping the ground
image back to the overhead view must reproduce the texture on the visible
wedge.  A second "blocks" scene type adds an above-ground heightfield
(rendered by ray marching) to provide content whose row coordinate is
ambiguous under the planar warp; no exactness claim is made for it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import CameraModel, Pose3DoF, SatelliteMeta, wrap_angle

SKY_FILL = 0.5


@dataclass(frozen=True)
class NoiseSpec:
    """Uniform prior-noise envelope: +-theta_deg and +-trans_m per axis."""

    theta_deg: float = 20.0
    trans_m: float = 20.0


@dataclass
class SceneSpec:
    """One synthetic scene: overhead texture plus camera and GT pose."""

    texture: np.ndarray
    alpha: float
    cam: CameraModel
    gt_pose: Pose3DoF
    height_field: np.ndarray | None = None  # metres above ground, texture-aligned

    def __post_init__(self):
        self.texture = np.asarray(self.texture, dtype=np.float64)
        if self.texture.ndim != 2:
            raise ConfigError(f"texture must be 2-D, got shape {self.texture.shape}")
        if float(np.var(self.texture)) < 1e-6:
            raise ConfigError("texture variance too low; correlation would be ill-posed")

    @property
    def sat_meta(self) -> SatelliteMeta:
        h, w = self.texture.shape
        return SatelliteMeta(
            alpha=self.alpha,
            u_s0=(w - 1) / 2.0,
            v_s0=(h - 1) / 2.0,
            width_s=w,
            height_s=h,
        )


@dataclass
class SampleRecord:
    """Rendered pair with ground-truth and noisy prior poses."""

    ground: np.ndarray
    satellite: np.ndarray
    gt_pose: Pose3DoF
    prior_pose: Pose3DoF
    noise: NoiseSpec
    alpha: float
    cam: CameraModel

    @property
    def sat_meta(self) -> SatelliteMeta:
        h, w = self.satellite.shape
        return SatelliteMeta(
            alpha=self.alpha, u_s0=(w - 1) / 2.0, v_s0=(h - 1) / 2.0, width_s=w, height_s=h
        )


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for procedural scene generation.

    Defaults are the high-fidelity oracle preset used by the geometric
    round-trip checks; :meth:`search` and :meth:`training` trade fidelity
    for a larger footprint and for speed respectively.
    """

    texture_size: int = 128
    alpha: float = 0.25
    ground_width: int = 768
    ground_height: int = 320
    focal: float = 560.0
    horizon_row: float = 8.0
    cam_height: float = 1.65
    base_wavelength: int = 48
    octaves: int = 3
    roughness: float = 0.55
    n_roads: int = 2
    gt_trans_m: float = 0.0
    kind: str = "planar"  # "planar" or "blocks"
    n_blocks: int = 3
    block_height_m: float = 4.0

    @classmethod
    def search(cls) -> "SceneConfig":
        """Wide patch for dense translation search over a 40 m window."""
        return cls(
            texture_size=224,
            alpha=0.5,
            ground_width=448,
            ground_height=96,
            focal=224.0,
            base_wavelength=32,
            octaves=4,
            gt_trans_m=20.0,
        )

    @classmethod
    def training(cls) -> "SceneConfig":
        """Small maps sized for the learned pipeline on a desktop CPU."""
        return cls(
            texture_size=96,
            alpha=0.25,
            ground_width=128,
            ground_height=32,
            focal=64.0,
            horizon_row=4.0,
            base_wavelength=16,
            octaves=3,
            n_roads=1,
        )

    def camera(self) -> CameraModel:
        return CameraModel(
            f_x=self.focal,
            f_y=self.focal,
            u_g0=(self.ground_width - 1) / 2.0,
            v_g0=self.horizon_row,
            width_g=self.ground_width,
            height_g=self.ground_height,
            cam_height=self.cam_height,
        )


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(rng: np.random.Generator, shape, wavelength: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise with the given wavelength."""
    h, w = shape
    gh = h // wavelength + 2
    gw = w // wavelength + 2
    lattice = rng.uniform(-1.0, 1.0, size=(gh, gw))
    ys = np.arange(h) / wavelength
    xs = np.arange(w) / wavelength
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    ty = _smoothstep(ys - y0)[:, None]
    tx = _smoothstep(xs - x0)[None, :]
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - tx) * (1 - ty) + b * tx * (1 - ty) + c * (1 - tx) * ty + d * tx * ty


def make_texture(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    """Multi-octave value noise with painted road bands, scaled to [0, 1]."""
    size = (cfg.texture_size, cfg.texture_size)
    tex = np.zeros(size)
    amplitude, total = 1.0, 0.0
    wavelength = cfg.base_wavelength
    for _ in range(cfg.octaves):
        if wavelength < 2:
            break
        tex += amplitude * value_noise(rng, size, wavelength)
        total += amplitude
        amplitude *= cfg.roughness
        wavelength //= 2
    tex /= total

    for _ in range(cfg.n_roads):
        angle = rng.uniform(0.0, math.pi)
        offset = rng.uniform(-0.3, 0.3) * cfg.texture_size
        half_width = rng.uniform(0.04, 0.08) * cfg.texture_size
        shade = rng.uniform(-0.8, 0.8)
        ys, xs = np.mgrid[0 : cfg.texture_size, 0 : cfg.texture_size]
        yc = ys - (cfg.texture_size - 1) / 2.0
        xc = xs - (cfg.texture_size - 1) / 2.0
        dist = np.abs(yc * math.cos(angle) - xc * math.sin(angle) - offset)
        band = _smoothstep(np.clip(1.0 - dist / half_width, 0.0, 1.0))
        tex = tex * (1.0 - 0.85 * band) + shade * band

    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo + 1e-12)


def _paint_blocks(rng: np.random.Generator, cfg: SceneConfig, texture: np.ndarray):
    """Stamp rectangular block footprints; returns texture + height field."""
    height_field = np.zeros_like(texture)
    n = cfg.texture_size
    for _ in range(cfg.n_blocks):
        bh = int(rng.integers(n // 16, n // 8))
        bw = int(rng.integers(n // 16, n // 8))
        # keep footprints off the central quarter so the camera is never inside one
        while True:
            r0 = int(rng.integers(0, n - bh))
            c0 = int(rng.integers(0, n - bw))
            if abs(r0 + bh / 2 - n / 2) > n / 8 or abs(c0 + bw / 2 - n / 2) > n / 8:
                break
        texture[r0 : r0 + bh, c0 : c0 + bw] = rng.uniform(0.1, 0.9)
        height_field[r0 : r0 + bh, c0 : c0 + bw] = cfg.block_height_m * rng.uniform(0.5, 1.0)
    return texture, height_field


def make_scene(rng: np.random.Generator, cfg: SceneConfig, gt_pose: Pose3DoF | None = None) -> SceneSpec:
    texture = make_texture(rng, cfg)
    height_field = None
    if cfg.kind == "blocks":
        texture, height_field = _paint_blocks(rng, cfg, texture)
    elif cfg.kind != "planar":
        raise ConfigError(f"unknown scene kind {cfg.kind!r}")
    if gt_pose is None:
        gt_pose = Pose3DoF(
            theta=rng.uniform(-math.pi, math.pi),
            t_x=rng.uniform(-cfg.gt_trans_m, cfg.gt_trans_m),
            t_z=rng.uniform(-cfg.gt_trans_m, cfg.gt_trans_m),
        )
    return SceneSpec(
        texture=texture,
        alpha=cfg.alpha,
        cam=cfg.camera(),
        gt_pose=gt_pose,
        height_field=height_field,
    )


def _texture_lookup(texture: np.ndarray, tv: np.ndarray, tu: np.ndarray) -> np.ndarray:
    """Bilinear texture fetch with edge extension.

    Ground rays that leave the texture read the clamped edge value instead
    of a constant: a hard fill would bleed into interpolated reads right at
    the patch border and break the overhead round trip there.
    """
    h, w = texture.shape
    tv_c = np.clip(tv, 0.0, h - 1.0)
    tu_c = np.clip(tu, 0.0, w - 1.0)
    r0 = np.floor(tv_c).astype(int)
    c0 = np.floor(tu_c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = tv_c - r0
    fc = tu_c - c0
    return (
        texture[r0, c0] * (1 - fr) * (1 - fc)
        + texture[r0, c1] * (1 - fr) * fc
        + texture[r1, c0] * fr * (1 - fc)
        + texture[r1, c1] * fr * fc
    )


def _ray_geometry(spec: SceneSpec):
    """Per-pixel ray quantities shared by the planar and blocks renderers."""
    cam = spec.cam
    pose = spec.gt_pose
    v, u = np.mgrid[0 : cam.height_g, 0 : cam.width_g].astype(np.float64)
    drop_rate = (v - cam.v_g0) / cam.f_y  # vertical descent per metre of depth
    lateral_rate = (u - cam.u_g0) / cam.f_x
    sin_t, cos_t = math.sin(pose.theta), math.cos(pose.theta)
    return v, drop_rate, lateral_rate, sin_t, cos_t


def _world_from_depth(spec: SceneSpec, depth, lateral_rate, sin_t, cos_t):
    """Camera-frame depth -> texture pixel coordinates (tv, tu)."""
    pose = spec.gt_pose
    sat = spec.sat_meta
    x_cam = depth * lateral_rate
    world_x = x_cam * cos_t + depth * sin_t - pose.t_x
    world_z = -x_cam * sin_t + depth * cos_t - pose.t_z
    tv = world_x / spec.alpha + sat.v_s0
    tu = world_z / spec.alpha + sat.u_s0
    return tv, tu


def render_ground(spec: SceneSpec) -> np.ndarray:
    """Ground-view image of the scene at its GT pose.

    Each pixel's ray is intersected with the ground plane (or marched
    against the block height field) and the texture is sampled bilinearly.
    Rows at or above the horizon, and rays leaving the texture, get the
    constant sky fill.
    """
    cam = spec.cam
    _, drop_rate, lateral_rate, sin_t, cos_t = _ray_geometry(spec)

    below = drop_rate > 1e-9
    depth_ground = np.where(below, cam.cam_height / np.where(below, drop_rate, 1.0), np.inf)

    if spec.height_field is None:
        tv, tu = _world_from_depth(spec, np.where(below, depth_ground, 0.0), lateral_rate, sin_t, cos_t)
        img = _texture_lookup(spec.texture, tv, tu)
        return np.where(below, img, SKY_FILL)

    return _render_blocks(spec, depth_ground, drop_rate, lateral_rate, sin_t, cos_t)


def _render_blocks(spec: SceneSpec, depth_ground, drop_rate, lateral_rate, sin_t, cos_t):
    """Ray march the block height field; blocks occlude the ground behind them."""
    cam = spec.cam
    tex_h, tex_w = spec.texture.shape
    d_far = spec.alpha * (tex_h + tex_w)
    steps = np.linspace(0.5, d_far, 256)

    hit_depth = np.full(drop_rate.shape, np.inf)
    found = np.zeros(drop_rate.shape, dtype=bool)
    for d in steps:
        ray_y = cam.cam_height - d * drop_rate  # height above ground at this depth
        if np.all(ray_y < 0):
            break
        tv, tu = _world_from_depth(spec, np.full_like(drop_rate, d), lateral_rate, sin_t, cos_t)
        r = np.clip(np.round(tv).astype(int), 0, tex_h - 1)
        c = np.clip(np.round(tu).astype(int), 0, tex_w - 1)
        inside = (tv >= 0) & (tv <= tex_h - 1) & (tu >= 0) & (tu <= tex_w - 1)
        block_h = np.where(inside, spec.height_field[r, c], 0.0)
        hit = ~found & (ray_y >= 0) & (ray_y <= block_h)
        hit_depth[hit] = d
        found |= hit

    below = drop_rate > 1e-9
    ground_first = below & (depth_ground <= hit_depth)
    depth = np.where(ground_first, depth_ground, hit_depth)
    visible = ground_first | found
    tv, tu = _world_from_depth(spec, np.where(visible, depth, 0.0), lateral_rate, sin_t, cos_t)
    img = _texture_lookup(spec.texture, tv, tu)
    img = np.where(found & ~ground_first, 0.85 * img, img)  # darken block faces
    return np.where(visible, img, SKY_FILL)


def render_pair(spec: SceneSpec, noise: NoiseSpec | None = None,
                rng: np.random.Generator | None = None) -> SampleRecord:
    """Render one ground/overhead pair; prior = GT plus sampled noise."""
    ground = render_ground(spec)
    satellite = spec.texture.copy()
    if noise is None or rng is None:
        prior = spec.gt_pose
        noise = noise or NoiseSpec(0.0, 0.0)
    else:
        prior = Pose3DoF(
            theta=wrap_angle(spec.gt_pose.theta + math.radians(rng.uniform(-noise.theta_deg, noise.theta_deg))),
            t_x=spec.gt_pose.t_x + rng.uniform(-noise.trans_m, noise.trans_m),
            t_z=spec.gt_pose.t_z + rng.uniform(-noise.trans_m, noise.trans_m),
        )
    return SampleRecord(ground=ground, satellite=satellite, gt_pose=spec.gt_pose,
                        prior_pose=prior, noise=noise, alpha=spec.alpha, cam=spec.cam)


def make_dataset(n: int, noise: NoiseSpec, seed: int,
                 cfg: SceneConfig | None = None) -> list[SampleRecord]:
    """Reproducible list of rendered samples; all randomness from ``seed``."""
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        spec = make_scene(rng, cfg)
        records.append(render_pair(spec, noise=noise, rng=rng))
    return records


def write_manifest(path, records: list[SampleRecord]) -> None:
    """CSV of GT and prior poses, one row per sample."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index", "theta_gt_deg", "tx_gt_m", "tz_gt_m",
             "theta_prior_deg", "tx_prior_m", "tz_prior_m"]
        )
        for i, rec in enumerate(records):
            writer.writerow(
                [
                    i,
                    f"{rec.gt_pose.theta_deg:.9f}",
                    f"{rec.gt_pose.t_x:.9f}",
                    f"{rec.gt_pose.t_z:.9f}",
                    f"{rec.prior_pose.theta_deg:.9f}",
                    f"{rec.prior_pose.t_x:.9f}",
                    f"{rec.prior_pose.t_z:.9f}",
                ]
            )


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
