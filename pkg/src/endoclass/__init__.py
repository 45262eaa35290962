"""Multi-class abnormality classification for endoscopic image frames.

A numpy/scipy pipeline: dataset ingest with stratified splits, seeded
flip/rotate augmentation, a densely-connected + residual convolutional
ensemble trained with Adam and cross-entropy, a full evaluation suite
(confusion matrix, per-class precision/recall/F1, one-vs-rest ROC/AUC),
and exact t-SNE feature visualization.
"""

from .config import RunConfig, default_config_text, dump_config, load_config
from .dataset import (ClassSet, DatasetManifest, LabeledFrame, SplitSpec,
                      TRAIN, VAL, read_manifest_csv, scan_dataset,
                      stratified_split, write_manifest_csv)
from .errors import (ConfigError, CorruptCheckpoint, DataError,
                     DegenerateClass, EmptyClass, EmptyHistory,
                     EndoclassError, FusionMismatch, IncompatibleConfig,
                     LabelOutOfRange, NonFiniteGradient,
                     PerplexityUnreachable, ShapeMismatch, TooFewSamples,
                     UnknownClassDir, UnreadableImage, WrongRangeState)
from .metrics import (ClassificationReport, ConfusionMatrix, EvaluationResult,
                      ROCCurve, auc_pairwise_oracle, classification_report,
                      confusion_matrix, evaluate_model, evaluate_predictions,
                      roc_curve, write_confusion_csv, write_report_json)
from .models import (Backbone, BackboneConfig, EnsembleModel, build_backbone,
                     build_ensemble, densenet121_config, extract_features,
                     resnet50_config, tiny_densenet_config, tiny_resnet_config)
from .preprocess import (AugmentationPolicy, FrameCache, ImageTensor,
                         NormalizationStats, apply_pipeline, load_raw,
                         normalize, random_horizontal_flip, random_rotation,
                         resize, to_unit)
from .synth import generate_dataset, nearest_centroid_accuracy
from .training import (Checkpoint, EpochMetrics, TrainingConfig, fit,
                       load_checkpoint, restore_model, save_checkpoint)
from .tsne import Embedding2D, TsneConfig, pairwise_affinities, tsne_embed

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "Backbone", "BackboneConfig", "Checkpoint",
    "ClassSet", "ClassificationReport", "ConfigError", "ConfusionMatrix",
    "CorruptCheckpoint", "DataError", "DatasetManifest", "DegenerateClass",
    "Embedding2D", "EmptyClass", "EmptyHistory", "EndoclassError",
    "EnsembleModel", "EpochMetrics", "EvaluationResult", "FrameCache",
    "FusionMismatch", "ImageTensor", "IncompatibleConfig", "LabelOutOfRange",
    "LabeledFrame", "NonFiniteGradient", "NormalizationStats",
    "PerplexityUnreachable", "ROCCurve", "RunConfig", "ShapeMismatch",
    "SplitSpec", "TooFewSamples", "TrainingConfig", "TRAIN", "TsneConfig",
    "UnknownClassDir", "UnreadableImage", "VAL", "WrongRangeState",
    "apply_pipeline", "auc_pairwise_oracle", "build_backbone",
    "build_ensemble", "classification_report", "confusion_matrix",
    "default_config_text", "densenet121_config", "dump_config",
    "evaluate_model", "evaluate_predictions", "extract_features", "fit",
    "generate_dataset", "load_checkpoint", "load_config", "load_raw",
    "nearest_centroid_accuracy", "normalize", "pairwise_affinities",
    "random_horizontal_flip", "random_rotation", "read_manifest_csv",
    "resize", "resnet50_config", "restore_model", "roc_curve",
    "save_checkpoint", "scan_dataset", "stratified_split",
    "tiny_densenet_config", "tiny_resnet_config", "to_unit", "tsne_embed",
    "write_confusion_csv", "write_manifest_csv", "write_report_json",
]
