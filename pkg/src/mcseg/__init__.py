"""Microcalcification detection and segmentation on mammograms.

Two small convolutional classifiers built on a from-scratch numpy
engine: a detector that triages candidate regions and a segmentator
that labels individual pixels, composed into an end-to-end pipeline
with classical pre/post-processing (Otsu thresholding, connected
components, a sliding-window cluster rule) and feature-space
diagnostics (penultimate-layer embeddings, exact t-SNE).
"""

from . import analysis, dataset, figures, imaging, network, neural, pipeline, trainer
from .dataset import CLASS_ORDER, PatchClass, build_patch_index
from .imaging import GrayImage, PhantomConfig, generate_phantom, read_pgm
from .network import NetworkSpec, build_network, forward, load_weights, save_weights
from .pipeline import PipelineResult, run_pipeline
from .trainer import TrainConfig, TrainLog, evaluate_per_class, train

__version__ = "0.1.0"

__all__ = [
    "analysis", "dataset", "figures", "imaging", "network", "neural",
    "pipeline", "trainer",
    "CLASS_ORDER", "PatchClass", "build_patch_index",
    "GrayImage", "PhantomConfig", "generate_phantom", "read_pgm",
    "NetworkSpec", "build_network", "forward", "load_weights", "save_weights",
    "PipelineResult", "run_pipeline",
    "TrainConfig", "TrainLog", "evaluate_per_class", "train",
    "__version__",
]
