"""MTBIT: joint 2D change detection and elevation-change regression from
bitemporal optical images."""

from .model import (
    BackboneSpec,
    ForwardTrace,
    ModelConfig,
    ParamSet,
    PredictionPair,
    export_attention_maps,
    forward,
    grad,
    init_params,
    paper_config,
    param_count,
    tiny_config,
)

__version__ = "0.1.0"
