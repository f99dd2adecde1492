"""Frame-synchronized recurrent attentive video VAE (numpy, hand-written gradients)."""
from .rvae import CUBOID, SYNC, Conditioning, LossReport, ModelConfig, SyncDraw
from .training import TrainConfig, Trainer

__all__ = ["CUBOID", "SYNC", "Conditioning", "LossReport", "ModelConfig", "SyncDraw",
           "TrainConfig", "Trainer"]
