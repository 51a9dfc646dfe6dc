"""ssllab: a desk-scale semi-supervised learning laboratory.

Eight SSL training methods (Pi-Model, Pseudo-label, Mean Teacher, VAT, UDA,
MixMatch, ReMixMatch, FixMatch) on top of a compact tensor/autodiff core,
with a benchmark CLI for label-budget grids, sensitivity sweeps, and
supervised baselines. The hot convolution kernels are compiled (Cython)
with a pure-numpy fallback selected at import; see
``ssllab.kernel_backend()``.
"""

from ._kernels import active_backend as kernel_backend
from .autodiff import Tensor, backward, no_grad, tensor
from .data import DatasetSplits, generate_synthetic, load_fer_csv, make_splits
from .methods import MethodConfig, compute_method_loss, default_config
from .model import EncoderConfig, build_encoder, ema_update, forward
from .trainer import TrainConfig, cosine_lr, evaluate, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "tensor",
    "backward",
    "no_grad",
    "kernel_backend",
    "EncoderConfig",
    "build_encoder",
    "forward",
    "ema_update",
    "MethodConfig",
    "default_config",
    "compute_method_loss",
    "TrainConfig",
    "train",
    "evaluate",
    "sgd_step",
    "cosine_lr",
    "DatasetSplits",
    "generate_synthetic",
    "load_fer_csv",
    "make_splits",
    "__version__",
]
