"""g2sloc: 3-DoF ground-to-satellite camera pose refinement.

Synthesizes overhead-view features from a ground image through a
geometry-guided cross-view transformer, refines the camera azimuth with a
learned pose optimizer, and recovers the translation by uncertainty-guided
dense correlation over the satellite feature map.  Ships with a synthetic
planar-scene oracle that exercises every geometric and numerical component.
"""

from .config import Config, load_config, save_config
from .correlation import (
    ProbabilityMap,
    UncertaintyMap,
    emit_heatmap,
    locate,
    ncc_direct,
    ncc_fft,
    normalized_correlation,
)
from .errors import ConfigError, G2SLocError, NumericError, ShapeError, TapeError
from .geometry import (
    CameraModel,
    Pose3DoF,
    SamplingGrid,
    SatelliteMeta,
    bilinear_sample,
    build_grid,
    pinhole_oracle,
    project_pixel,
    wrap_angle,
)
from .metrics import MetricsReport, compute_metrics
from .model import ModelParams, init_model, load_model, save_model
from .optimizer import OptimizerParams, RefineSchedule, pose_step, refine
from .synthdata import NoiseSpec, SampleRecord, SceneConfig, SceneSpec, make_dataset, render_pair
from .synthesis import (
    ColumnPool,
    SynthesisParams,
    build_column_pool,
    column_index,
    cross_view_transform,
    encode_ground,
    encode_satellite,
    gp_project,
)
from .tensorcore import AttentionParams, FeatureMap, Parameter, Tape, Tensor, mha
from .training import LossWeights, TrainConfig, loss_location, loss_pose, loss_total, train

__version__ = "0.1.0"
