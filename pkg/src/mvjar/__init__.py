"""Masked voxel jigsaw and reconstruction pre-training for LiDAR point clouds."""

from .benchmark_splits import SplitSpec, diversity_report, sample_sequence_splits, sample_uniform_frame_split
from .kernels import BACKEND
from .mask_sampler import MaskPlan, SamplingStrategy, build_mask_plan, furthest_voxel_sampling
from .nn_core import MVJARModel, ModelConfig, chamfer_l2, load_checkpoint, save_checkpoint
from .pointcloud_io import Frame, SceneManifest, SynthConfig, generate_synthetic_frame, load_manifest, read_frame
from .pretrain_harness import evaluate, pretrain
from .task_targets import MaskedBatch, WindowConfig, assemble_masked_batch, window_relative_index
from .voxel_grid import GridConfig, VoxelizedFrame, voxelize

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Frame", "GridConfig", "MVJARModel", "MaskPlan", "MaskedBatch", "ModelConfig",
    "SamplingStrategy", "SceneManifest", "SplitSpec", "SynthConfig", "VoxelizedFrame", "WindowConfig",
    "assemble_masked_batch", "build_mask_plan", "chamfer_l2", "diversity_report", "evaluate",
    "furthest_voxel_sampling", "generate_synthetic_frame", "load_checkpoint", "load_manifest",
    "pretrain", "read_frame", "sample_sequence_splits", "sample_uniform_frame_split",
    "save_checkpoint", "voxelize", "window_relative_index",
]
