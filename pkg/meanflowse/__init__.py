"""
MeanFlowSE - 平均速度流语音增强
在复数 STFT 域学习平均速度场，单步或少步位移采样完成增强
"""

__version__ = "0.1.0"
__author__ = "MeanFlowSE Team"

from meanflowse.errors import MeanFlowError
from meanflowse.models import (
    FieldConfig,
    FrontendConfig,
    ObjectiveConfig,
    PathConfig,
    RunConfig,
    SamplerConfig,
    TrainConfig,
)
from meanflowse.pipeline import (
    EnhancementPipeline,
    enhance_file,
    generate_corpus,
    load_field,
    run_bench,
    run_verify,
    train_model,
    verify,
)

__all__ = [
    "MeanFlowError",
    "FieldConfig",
    "FrontendConfig",
    "ObjectiveConfig",
    "PathConfig",
    "RunConfig",
    "SamplerConfig",
    "TrainConfig",
    "EnhancementPipeline",
    "enhance_file",
    "generate_corpus",
    "load_field",
    "run_bench",
    "run_verify",
    "train_model",
    "verify",
]
