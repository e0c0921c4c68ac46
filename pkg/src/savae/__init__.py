"""Syntax-aware variational autoencoder on a small numpy autodiff engine."""

from .corpus import ParallelExample, Vocab, build_vocab, build_vocabs, load_corpus, make_batches
from .model import ModelConfig, SavaeParams, loss_supervised, loss_unsupervised
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ParallelExample",
    "SavaeParams",
    "TrainConfig",
    "Vocab",
    "build_vocab",
    "build_vocabs",
    "load_checkpoint",
    "load_corpus",
    "loss_supervised",
    "loss_unsupervised",
    "make_batches",
    "save_checkpoint",
    "train",
]
