"""Point-based neural radiance fields with visibility-guided feature fetching,
log sampling around estimated surfaces and a learnable aggregation kernel."""

from .core import (
    FEATURE_DIM,
    BehindCameraError,
    CameraView,
    NeuralPointField,
    Ray,
    SceneBounds,
    generate_rays,
    intrinsics_from_fov,
    look_at,
    project_point,
    unproject,
)
from .depth import DepthEstimationConfig, build_visibility_table, estimate_depth_map, visibility_score
from .edit import select_points, transfer_features, transform_points
from .kernel import KernelConfig, KernelParameters, kernel_aggregate
from .metrics import psnr, ssim
from .render import Model, Scene, composite, render_image, render_ray
from .sampling import LogSamplingConfig, log_sample, sample_batch, uniform_sample
from .spatial import SpatialIndex, StaleIndexError, build_index
from .synth import synth_scene
from .training import (
    FinetuneConfig,
    TrainConfig,
    TrainingDivergedError,
    build_scene,
    finetune_schedule,
    grow_points,
    prune_points,
    refine_points,
    train,
)

__version__ = "0.1.0"
