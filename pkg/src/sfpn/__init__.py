"""CPU sparse 3D feature pyramid backbone with a streaming RGB-D front end,
online instance merging, supervision losses, and a latency profiler."""

from . import errors
from .losses import (
    ContrastiveResult,
    FrameSupervision,
    LossWeights,
    bce_loss,
    combine_frame_components,
    contrastive_loss,
    cross_frame_loss,
    dice_loss,
    fd_gradient,
    iou_loss,
    per_frame_loss,
    sem_loss,
    total_loss,
)
from .network import (
    FeaturePyramid,
    ForwardTrace,
    SFPNConfig,
    SFPNModel,
    build_model,
    forward,
    forward_ablation,
    load_model,
    parameter_count,
    save_model,
)
from .profiler import (
    BenchReport,
    LayerProfile,
    ProfileResult,
    RunConfig,
    ablate,
    bench_variants,
    profile,
    run_sequence,
)
from .rgbd import (
    FrameRecord,
    SceneState,
    SequenceReader,
    accumulate,
    backproject,
    perturb_pose,
    project_depth,
)
from .segmentation import (
    InstanceStore,
    MaskSet2D,
    QueryRefiner,
    QuerySet,
    lift_masks,
    merge,
    unit_normalize,
)
from .sparse_conv import (
    ConvParams,
    NormParams,
    Rulebook,
    build_rulebook,
    conv_forward,
    dense_oracle_conv,
    norm_forward,
    norm_relu_forward,
    residual_block_forward,
)
from .sparse_tensor import (
    CoordIndex,
    SparseTensor,
    build_index,
    downsample_coords,
    load_point_cloud,
    save_point_cloud,
    voxelize,
)
from .synthetic import room_points, room_tensor, synthetic_sequence

__version__ = "0.1.0"
