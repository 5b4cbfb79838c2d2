"""Cross-modality (RGB/infrared) person re-identification with an auxiliary
pose-estimation branch: model, losses, data pipeline, training, and
retrieval evaluation."""

from .config import ScaleConfig, TrainConfig, scale_config
from .data import Dataset, MiniBatch, Sample, load_dataset, synth_generate
from .evaluation import RankingResult, RetrievalProtocol, run_protocol
from .network import CrossModalReIDNet, FeatureBundle, build_model
from .trainer import ablate, load_checkpoint, train

__all__ = [
    "ScaleConfig", "TrainConfig", "scale_config",
    "Dataset", "MiniBatch", "Sample", "load_dataset", "synth_generate",
    "RankingResult", "RetrievalProtocol", "run_protocol",
    "CrossModalReIDNet", "FeatureBundle", "build_model",
    "ablate", "load_checkpoint", "train",
]
