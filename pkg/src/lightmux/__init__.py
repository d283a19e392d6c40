"""Simulate-train-optimize toolkit for multiplexed-illumination classification."""
from .errors import (
    ConditioningError,
    ConsistencyError,
    ContainerError,
    DegenerateFitError,
    LightmuxError,
    ModelLoadError,
    ParameterError,
    StratificationError,
)
from .evaluation import SplitAccuracy, repeated_split_accuracy
from .features import HOGTransformer, concat_sequence, downscale, hog
from .greedy import GreedyPatternSelector, GreedyTrace, effective_prefix, evaluate_matrix, greedy_select
from .multiplex import (
    IlluminationMatrix,
    MuxNoiseEstimate,
    SNROptimalMultiplexer,
    demultiplex,
    optimize_snr,
    predicted_mse,
    sigma_w,
)
from .noise import (
    AffineNoiseCalibrator,
    CameraSettings,
    NoiseModel,
    NoiseObservation,
    characterize_stack,
    fit_affine,
    generalize,
    predict_variance,
    synthesize,
)
from .relight import RenderedImage, render_clean, render_noisy, select_gain
from .scene import (
    Dataset,
    RelightableModel,
    SceneFamilySpec,
    average_reflectance,
    generate_scene_family,
    load_dataset,
    load_model,
    save_model,
)
from .svm import OneVsOneLinearSVC

__version__ = "0.1.0"

__all__ = [
    "AffineNoiseCalibrator",
    "CameraSettings",
    "ConditioningError",
    "ConsistencyError",
    "ContainerError",
    "Dataset",
    "DegenerateFitError",
    "GreedyPatternSelector",
    "GreedyTrace",
    "HOGTransformer",
    "IlluminationMatrix",
    "LightmuxError",
    "ModelLoadError",
    "MuxNoiseEstimate",
    "NoiseModel",
    "NoiseObservation",
    "OneVsOneLinearSVC",
    "ParameterError",
    "RelightableModel",
    "RenderedImage",
    "SNROptimalMultiplexer",
    "SceneFamilySpec",
    "SplitAccuracy",
    "StratificationError",
    "average_reflectance",
    "characterize_stack",
    "concat_sequence",
    "demultiplex",
    "downscale",
    "effective_prefix",
    "evaluate_matrix",
    "fit_affine",
    "generalize",
    "generate_scene_family",
    "greedy_select",
    "hog",
    "load_dataset",
    "load_model",
    "optimize_snr",
    "predict_variance",
    "predicted_mse",
    "render_clean",
    "render_noisy",
    "repeated_split_accuracy",
    "save_model",
    "select_gain",
    "sigma_w",
    "synthesize",
]
