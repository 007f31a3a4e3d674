"""CPU differentiable Gaussian splatting with a static/dynamic scene split."""

__version__ = "0.1.0"

from .camera import Camera, look_at
from .dataio import Dataset, Frame, load_checkpoint, load_dataset, save_checkpoint
from .encoding import EncodingConfig, encode_input
from .errors import SplitGSError
from .estimator import SplitGaussianReconstructor
from .gaussian import GaussianPrimitive, GaussianSet
from .pipeline import (
    TrainConfig,
    Trainer,
    TrainReport,
    evaluate,
    initialize_scene,
    pretrain_dap,
    train,
    train_stage1,
    train_stage2,
)
from .rasterizer import RasterOptions, render, render_backward
from .scene import Scene, build_scene, render_scene, resolve, scene_at
from .synth import SynthSpec, make_synthetic, synth_scene

__all__ = [
    "Camera", "Dataset", "EncodingConfig", "Frame", "GaussianPrimitive", "GaussianSet",
    "RasterOptions", "Scene", "SplitGSError", "SplitGaussianReconstructor", "SynthSpec",
    "TrainConfig", "TrainReport", "Trainer", "build_scene", "encode_input", "evaluate",
    "initialize_scene", "load_checkpoint", "load_dataset", "look_at", "make_synthetic",
    "pretrain_dap", "render", "render_backward", "render_scene", "resolve", "save_checkpoint",
    "scene_at", "synth_scene", "train", "train_stage1", "train_stage2",
]
