"""Video pose estimation as conditional diffusion over keypoint heatmaps."""
from .config import InferenceOptions, ModelConfig, RunConfig, SyntheticSceneConfig, TrainConfig, from_flat, load_config
from .data import AnnotationRecord, crop_person_clip, load_keypoint_annotations, read_dataset, write_dataset
from .diffusion import NoiseSchedule, build_cosine_schedule, ddim_step, forward_diffuse, make_sampling_plan
from .engine import ablation_grid, predict_clips, predict_keypoints, sample_pose, train, train_step
from .errors import DiffPoseError
from .heatmap import CodecConfig, KeypointSet, decode_keypoints, encode_heatmaps
from .metrics import MetricReport, evaluate, pck
from .model import Checkpoint, DiffPoseNet, build_model, load_checkpoint, save_checkpoint
from .synthetic import generate_dataset, generate_synthetic_clip

__all__ = [
    "AnnotationRecord", "Checkpoint", "CodecConfig", "DiffPoseError", "DiffPoseNet", "InferenceOptions",
    "KeypointSet", "MetricReport", "ModelConfig", "NoiseSchedule", "RunConfig", "SyntheticSceneConfig",
    "TrainConfig", "ablation_grid", "build_cosine_schedule", "build_model", "crop_person_clip", "ddim_step",
    "decode_keypoints", "encode_heatmaps", "evaluate", "forward_diffuse", "from_flat",
    "generate_dataset", "generate_synthetic_clip", "load_checkpoint", "load_config",
    "load_keypoint_annotations", "make_sampling_plan", "pck", "predict_clips", "predict_keypoints",
    "read_dataset", "sample_pose", "save_checkpoint", "train", "train_step", "write_dataset",
]
