"""Run configuration: one flat key/value surface shared by the CLI and the
test harnesses.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Documented keys (types in parentheses, defaults in :class:`Config`):

  seed (int)              master seed; every random draw derives from it
  scene (str)             scene preset: training | oracle | search | blocks
  noise_theta_deg (float) prior azimuth noise envelope, +- degrees
  noise_trans_m (float)   prior translation noise envelope, +- metres/axis
  channels (3 ints)       feature widths for pyramid levels 1,2,3 (coarse->fine)
  heads (int)             attention heads (all attention blocks)
  mhca_radius (int)       column pool radius r
  swin_window (int)       windowed-attention tile size in the pose optimizer
  opt_dim (int)           pose optimizer token width
  max_step_deg/max_step_m per-update pose step bounds
  levels (int)            pyramid levels used by refinement (coarse->fine)
  iterations (int)        refinement passes over the levels
  corr_level (int)        pyramid level used for dense translation search
  template_px (int)       template side length at corr_level
  search_window_m (float) dense search window (square side, metres)
  use_uncertainty (bool)  divide correlation scores by the uncertainty map
  gamma (float)           location-loss sharpness
  lambda1_init/lambda2_init  balance-weight initial values
  lr_start/lr_end (float) linear learning-rate schedule endpoints
  epochs (int)            training epochs
  batch_size (int)        samples per step
  max_steps (int)         hard cap on optimizer steps (0 = epochs decide)
  translation_supervision (bool)  include translation terms in the pose loss
  literal_margin_sign (bool)      use the location-loss margin sign as printed
                                  in its source formulation (see training module)
  theta_convention (str)  ccw | cw; cw negates azimuth values at the CLI edge
  deterministic (bool)    reserved flag; the CPU path is always deterministic
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .synthdata import NoiseSpec, SceneConfig


@dataclass(frozen=True)
class Config:
    seed: int = 0
    scene: str = "training"
    noise_theta_deg: float = 20.0
    noise_trans_m: float = 2.0
    channels: tuple[int, int, int] = (128, 64, 32)
    heads: int = 4
    mhca_radius: int = 1
    swin_window: int = 4
    opt_dim: int = 32
    max_step_deg: float = 45.0
    max_step_m: float = 10.0
    levels: int = 3
    iterations: int = 2
    corr_level: int = 3
    template_px: int = 17
    search_window_m: float = 40.0
    use_uncertainty: bool = True
    gamma: float = 10.0
    lambda1_init: float = -5.0
    lambda2_init: float = -3.0
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    epochs: int = 5
    batch_size: int = 3
    max_steps: int = 0
    translation_supervision: bool = True
    literal_margin_sign: bool = False
    theta_convention: str = "ccw"
    deterministic: bool = False

    def __post_init__(self):
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ConfigError(f"channels must be three positive ints, got {self.channels}")
        if self.levels not in (1, 2, 3):
            raise ConfigError(f"levels must be 1..3, got {self.levels}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.theta_convention not in ("ccw", "cw"):
            raise ConfigError(f"theta_convention must be ccw or cw, got {self.theta_convention}")
        if self.scene not in ("training", "oracle", "search", "blocks"):
            raise ConfigError(f"unknown scene preset {self.scene!r}")
        if self.template_px < 3:
            raise ConfigError(f"template_px must be >= 3, got {self.template_px}")

    def scene_config(self) -> SceneConfig:
        if self.scene == "oracle":
            return SceneConfig()
        if self.scene == "search":
            return SceneConfig.search()
        if self.scene == "blocks":
            base = SceneConfig.training()
            return replace(base, kind="blocks")
        return SceneConfig.training()

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(theta_deg=self.noise_theta_deg, trans_m=self.noise_trans_m)

    @classmethod
    def overfit(cls, **overrides) -> "Config":
        """Small-model preset sized for CPU training runs."""
        base = dict(
            scene="training",
            channels=(24, 12, 8),
            heads=4,
            opt_dim=24,
            noise_theta_deg=20.0,
            noise_trans_m=1.5,
            max_step_deg=45.0,
            max_step_m=10.0,
            iterations=1,
            template_px=9,
            search_window_m=8.0,
            epochs=300,
            batch_size=3,
            max_steps=1600,
        )
        base.update(overrides)
        return cls(**base)


def _parse_value(field_type, raw: str):
    raw = raw.strip()
    if field_type == "bool":
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if field_type == "int":
        return int(raw)
    if field_type == "float":
        return float(raw)
    if field_type.startswith("tuple"):
        return tuple(int(part) for part in raw.replace(",", " ").split())
    return raw


def load_config(path) -> Config:
    """Parse a key/value config file; unknown keys are errors."""
    path = Path(path)
    type_by_name = {f.name: f.type for f in fields(Config)}
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in type_by_name:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _parse_value(str(type_by_name[key]), raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return Config(**values)


def save_config(path, cfg: Config) -> None:
    lines = []
    for f in fields(Config):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")
