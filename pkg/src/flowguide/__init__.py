"""Optical-flow-guided attention for video diffusion editing, at desk scale."""
from .attention import (
    AttentionParams,
    FeatureVideo,
    ProjectionWeights,
    dense_spatio_temporal_attention,
    dsta_flatten_block,
    flow_guided_attention,
    masked_attention_oracle,
    scaled_dot_attention,
    spatial_attention,
    trajectory_mask,
)
from .diffusion import (
    InjectionCache,
    NoiseSchedule,
    ToyDenoiser,
    ddim_inversion_step,
    ddim_sampling_step,
    forward_noise_sample,
    make_linear_schedule,
    run_inversion,
    run_sampling,
)
from .flow import (
    FlowField,
    FlowSequence,
    downsample_flow,
    load_flo,
    perturb_flow,
    project_coords,
    synth_flow,
    write_flo,
)
from .kernels import BACKEND
from .metrics import (
    ImageSequence,
    MetricReport,
    edit_score,
    psnr,
    ssim,
    warp_frame,
    warping_error,
)
from .pipeline import PipelineConfig, ToyUNet, edit_video, invert_video, reconstruct_experiment
from .trajectory import (
    PatchRef,
    Trajectory,
    TrajectorySet,
    render_trajectories,
    sample_trajectories,
    validate_partition,
)

__version__ = "0.1.0"
