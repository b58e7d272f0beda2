from .checkpoint import import_pretrained_transformer, load_archive, load_model, save_archive, save_model
from .config import ModelConfig
from .network import PARAMETER_GROUPS, AVHuMARTSE, ExtractOutput, Stage2Output, build_model

__all__ = [
    "AVHuMARTSE", "ExtractOutput", "ModelConfig", "PARAMETER_GROUPS", "Stage2Output",
    "build_model", "import_pretrained_transformer", "load_archive", "load_model",
    "save_archive", "save_model",
]
