"""causalzoo: seeded zoos of small CNN classifiers and treatment-effect
analysis of training hyperparameters on predictions and saliency maps.

Layers, bottom up:

- nn_engine: deterministic forward/backward for small conv stacks
- zoo: independent hyperparameter sampling, synthetic data, population training
- explain: gradient / smoothed / path-integrated / class-activation saliency
- effects: discretization, kernels, individual and kernelized treatment effects
- analysis: accuracy bucketing, effect correlations, mediation, kernel sensitivity
- pipeline, cli: reproducible stage orchestration with run manifests
"""

from . import analysis, effects, explain, nn_engine, pipeline, plots, zoo
from .config import PipelineConfig, default_config
from .effects import Kernel, kte_distance
from .nn_engine import ArchitectureSpec, ParameterSet
from .zoo import DatasetSpec, HyperparamSpace, HyperparamVector

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "DatasetSpec", "HyperparamSpace", "HyperparamVector",
    "Kernel", "ParameterSet", "PipelineConfig", "analysis", "default_config",
    "effects", "explain", "kte_distance", "nn_engine", "pipeline", "plots", "zoo",
]
