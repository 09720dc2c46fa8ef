"""Re-parameterizable x3 super-resolution student with quantization-aware
training and a pure-integer deployment path, implemented on numpy."""

from .checkpoint import Checkpoint, make_checkpoint, restore_model
from .config import RunConfig
from .data import ImagePair, PatchSample, bicubic_resize, load_dataset, make_synthetic_dataset
from .errors import InvalidArgument, InvalidGraph, InvalidState, ParseError
from .evaluate import MetricReport, evaluate, psnr_rgb, ssim
from .graph import DeployGraph, export_graph, import_graph, integer_infer
from .losses import stage_loss
from .model import DeployModel, StudentConfig, TrainModel, fuse_block, fuse_model, recalibrate_bn
from .quant import QatModel, QuantParams, compute_qparams, fake_quant, insert_qat, set_phase
from .train import StageConfig, run_stage

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DeployGraph",
    "DeployModel",
    "ImagePair",
    "InvalidArgument",
    "InvalidGraph",
    "InvalidState",
    "MetricReport",
    "ParseError",
    "PatchSample",
    "QatModel",
    "QuantParams",
    "RunConfig",
    "StageConfig",
    "StudentConfig",
    "TrainModel",
    "bicubic_resize",
    "compute_qparams",
    "evaluate",
    "export_graph",
    "fake_quant",
    "fuse_block",
    "fuse_model",
    "import_graph",
    "insert_qat",
    "integer_infer",
    "load_dataset",
    "make_checkpoint",
    "make_synthetic_dataset",
    "psnr_rgb",
    "recalibrate_bn",
    "restore_model",
    "run_stage",
    "set_phase",
    "ssim",
    "stage_loss",
]
