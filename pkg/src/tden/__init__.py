"""Two-stream decoupled vision-language encoder-decoder in numpy.

Per-modality encoders feed a cross-modal encoder (understanding objectives)
and a causal cross-modal decoder (sentence generation).  Everything runs on
the small reverse-mode engine in :mod:`tden.autodiff`.
"""

from .autodiff import Tape, Tensor, grad_check
from .data import DataConfig, World, gen_splits, read_dataset, write_dataset
from .model import TdenModel
from .nn import ModelConfig, tiny_config
from .proxy import loss_tden, make_masked_batch
from .sampling import SCHEMES, run_step
from .train import TrainConfig, load_checkpoint, pretrain, save_checkpoint

__all__ = [
    "DataConfig", "ModelConfig", "SCHEMES", "Tape", "TdenModel", "Tensor", "TrainConfig", "World",
    "gen_splits", "grad_check", "load_checkpoint", "loss_tden", "make_masked_batch", "pretrain",
    "read_dataset", "run_step", "save_checkpoint", "tiny_config", "write_dataset",
]
