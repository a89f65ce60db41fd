"""Two-step whole-slide image registration.

Step 1 estimates translation and a 0/180-degree orientation by exhaustive
normalized-cross-correlation template matching; step 2 refines the alignment
by optimizing a dense displacement field under an MSE objective with Adam and
a cosine-annealed learning rate. Includes the landmark-distance evaluation
metric and a deterministic synthetic-pair generator for verification.
"""

from .deform import (
    AdamState,
    DeformConfig,
    DisplacementField,
    LossTrace,
    adam_step,
    cosine_lr,
    load_field,
    loss_gradient,
    mse_loss,
    optimize_deformation,
    save_field,
    smoothness_loss,
    warp,
)
from .landmarks import (
    CohortEval,
    ImageEval,
    LandmarkPair,
    landmark_distances,
    map_fixed_to_moving,
    median_p90,
    parse_landmarks,
    percentile_90,
)
from .pipeline import PipelineConfig, cmd_evaluate, cmd_register, cmd_synth, register_pair
from .raster import (
    CropRect,
    GrayImage,
    RgbImage,
    bilinear_sample,
    downsample,
    gaussian_blur,
    read_gray,
    read_image,
    rotate180,
    to_grayscale,
    trim_black_border,
    write_png,
)
from .rigid import MatchConfig, RigidEstimate, apply_rigid, ncc, ncc_at, template_match
from .synth import SynthPair, SynthSpec, make_pair, make_smooth_field, make_texture

__version__ = "0.1.0"
