"""Temporal dilated video transformer blocks with feature memories and key/value reuse."""
from tdvit.backbone import VARIANTS, Model, ModelConfig, build_model, build_stage, toy_config
from tdvit.errors import ColdStartError, ConfigError, TDViTError, TrainingError, UsageError
from tdvit.memory import FeatureMemory, SamplingStrategy
from tdvit.streaming import measure_trf, oracle_recompute, process_video
from tdvit.tdtb import TDTBState, tdtb_forward

__version__ = "0.1.0"

__all__ = [
    "VARIANTS",
    "ColdStartError",
    "ConfigError",
    "FeatureMemory",
    "Model",
    "ModelConfig",
    "SamplingStrategy",
    "TDTBState",
    "TDViTError",
    "TrainingError",
    "UsageError",
    "build_model",
    "build_stage",
    "measure_trf",
    "oracle_recompute",
    "process_video",
    "tdtb_forward",
    "toy_config",
]
