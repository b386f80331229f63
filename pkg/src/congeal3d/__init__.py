"""3D-aware alignment of object image collections to a canonical voxel field."""

from .errors import CongealError
from .field import Aabb, VoxelField, density_aabb, nocs_value, sample
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    Ray,
    RigidTransform,
    Twist,
    camera_from_spherical,
    exp_map,
    log_map,
    ray_for_pixel,
)
from .metric import (
    DistanceWeights,
    FeatureImage,
    combined_distance,
    image_distance,
    iou_distance,
    pixel_distance,
)
from .pose_fit import (
    AdamState,
    CandidateGrid,
    InitConfig,
    OptimConfig,
    PoseEstimate,
    adam_step,
    candidate_grid,
    init_pose,
    refine_pose,
)
from .render import (
    NocsImage,
    RenderConfig,
    Rendering,
    render,
    render_nocs,
    resample,
    tight_bbox_crop,
)
from .warp import (
    CanonicalPoint,
    ImageContext,
    WarpConfig,
    WarpField,
    fit_forward_warp,
    forward_2d3d,
    reverse_2d2d,
    reverse_3d2d,
    rigidity_loss,
    smooth_loss,
    transfer_keypoint,
    transfer_pixels,
    tv_loss,
)
from .evaluate import PckConfig, PoseSet, nn_match, pck, procrustes_align
from .synth import Primitive, SynthSpec, make_dataset, make_field

__version__ = "0.1.0"
