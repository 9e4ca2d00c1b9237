"""Tree-structured temporal feature grids for neural video representation."""

from .autodiff import Tape, Tensor, backward
from .codec import ModelContainer, bpp, compress, decompress, psnr
from .decoder import Decoder, DecoderConfig, param_count
from .model import TreeNerv
from .trainer import FitResult, TrainConfig, TuneConfig, fit, tune_for_compression
from .tree import TreeGrid
from .video import VideoSequence, load_frames, save_frames, synth

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "ModelContainer",
    "bpp",
    "compress",
    "decompress",
    "psnr",
    "Decoder",
    "DecoderConfig",
    "param_count",
    "TreeNerv",
    "FitResult",
    "TrainConfig",
    "fit",
    "TuneConfig",
    "tune_for_compression",
    "TreeGrid",
    "VideoSequence",
    "load_frames",
    "save_frames",
    "synth",
]
