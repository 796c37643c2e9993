"""Structure-tensor front-end + trainable encoder-decoder detection pipeline."""

__version__ = "0.1.0"

from .structure_tensor import (
    GaussianSpec,
    GradientStack,
    StructureTensorField,
    TensorSet,
    CoherentRepresentation,
    gaussian_kernel,
    directional_gradient,
    gradient_stack,
    conventional_structure_tensor,
    coherency_map,
    modified_tensor_set,
    select_coherent,
    coherent_representation,
)
from .segmenter import PipelineConfig, Detection, preprocess, segment, postprocess, detect
from .backbone import BackboneConfig, OptimizerState, TrainRecord, TrainingDivergedError
from .metrics import GroundTruthItem, EvalReport, evaluate
from .synthdata import ShapeSpec, SceneSpec, SceneTemplate, compose_scan, generate_dataset

__all__ = [
    "GaussianSpec",
    "GradientStack",
    "StructureTensorField",
    "TensorSet",
    "CoherentRepresentation",
    "gaussian_kernel",
    "directional_gradient",
    "gradient_stack",
    "conventional_structure_tensor",
    "coherency_map",
    "modified_tensor_set",
    "select_coherent",
    "coherent_representation",
    "PipelineConfig",
    "Detection",
    "preprocess",
    "segment",
    "postprocess",
    "detect",
    "BackboneConfig",
    "OptimizerState",
    "TrainRecord",
    "TrainingDivergedError",
    "GroundTruthItem",
    "EvalReport",
    "evaluate",
    "ShapeSpec",
    "SceneSpec",
    "SceneTemplate",
    "compose_scan",
    "generate_dataset",
]
