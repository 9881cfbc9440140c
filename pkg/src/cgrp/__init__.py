"""Joint registration and fusion of misaligned infrared/visible image pairs.

A visible image is translated into a pseudo-infrared image, the distorted
infrared image is registered against it with a coarse-to-fine deformation
field, and the registered pair is fused by a dual-path attention network.
"""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .cpstn import CPSTN, DiscriminatorConfig, TranslatorConfig
from .datasets import (
    DistortionRanges,
    PairRecord,
    SplitManifest,
    distort_corpus,
    synthesize_pair,
    synthetic_corpus,
)
from .difn import DIFN, DIFNConfig
from .estimators import (
    InfraredRegistrar,
    MisalignedFusion,
    PseudoInfraredTranslator,
)
from .geometry import (
    AffineParams,
    DeformationField,
    affine_to_field,
    compose,
    elastic_field,
    load_field,
    save_field,
    warp,
)
from .images import GrayImage
from .losses import LossWeights, VGGFeatures
from .metrics import MetricsReport, evaluate_fusion, evaluate_registration
from .mrrn import MRRN, MRRNConfig
from .pipeline import CGRPModel, count_params
from .trainer import MissingStageError, RunLedger, TrainConfig, time_inference, train_stage

__version__ = "0.1.0"

__all__ = [
    "AffineParams",
    "CGRPModel",
    "CPSTN",
    "Checkpoint",
    "CheckpointError",
    "DIFN",
    "DIFNConfig",
    "DeformationField",
    "DiscriminatorConfig",
    "DistortionRanges",
    "GrayImage",
    "InfraredRegistrar",
    "LossWeights",
    "MRRN",
    "MRRNConfig",
    "MetricsReport",
    "MisalignedFusion",
    "MissingStageError",
    "PairRecord",
    "PseudoInfraredTranslator",
    "RunLedger",
    "SplitManifest",
    "TrainConfig",
    "TranslatorConfig",
    "VGGFeatures",
    "affine_to_field",
    "compose",
    "count_params",
    "distort_corpus",
    "elastic_field",
    "evaluate_fusion",
    "evaluate_registration",
    "load_checkpoint",
    "load_field",
    "save_checkpoint",
    "save_field",
    "synthesize_pair",
    "synthetic_corpus",
    "time_inference",
    "train_stage",
    "warp",
]
