"""Agreement-based hard/noisy sample triage for sequence classification."""
from .checkpoint import Checkpoint
from .nets import ModelConfig
from .synthdata import GenConfig, Kind, VideoSample
from .trainer import TrainConfig, evaluate, train
from .triage import Category, TriageConfig

__version__ = "0.1.0"

__all__ = ["Category", "Checkpoint", "GenConfig", "Kind", "ModelConfig", "TrainConfig",
           "TriageConfig", "VideoSample", "evaluate", "train", "__version__"]
