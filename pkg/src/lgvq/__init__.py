"""Language-guided codebook learning for vector-quantized autoencoders."""

from .config import ConfigError, LossWeights, TrainConfig, load_config
from .data import CaptionDataset, DataError, make_toy_corpus, read_manifest
from .train import (
    CHECKPOINT_FORMAT,
    CheckpointError,
    LGVQModel,
    LossBundle,
    Trainer,
    build_model,
    load_checkpoint,
    save_checkpoint,
    total_loss,
    train_step,
)
from .vq import CodeGrid, TrainingDivergence, VQAutoencoder, quantize, straight_through, vq_loss

__version__ = "0.1.0"
