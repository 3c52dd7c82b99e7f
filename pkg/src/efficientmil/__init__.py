"""Linear-complexity multiple instance learning on precomputed instance
features: adaptive patch selection, recurrent and state-space sequence
encoders, a two-term bag/instance objective, and a full train/eval/benchmark
workflow."""

from .aps import APSResult, APSWeights, select
from .config import EncoderConfig, MambaConfig, TrainConfig
from .data import Bag, DatasetManifest, SplitSpec, WitnessSpec, read_bag, synth_witness, write_bag
from .encoders import ForwardTrace, ModelParams, forward, init_params
from .metrics import EvalReport, FlopsBreakdown, accuracy, auc, count_flops, evaluate
from .training import FitResult, TrainState, adam_step, cosine_lr, fit, mil_loss

__version__ = "0.1.0"

__all__ = [
    "APSResult", "APSWeights", "select",
    "EncoderConfig", "MambaConfig", "TrainConfig",
    "Bag", "DatasetManifest", "SplitSpec", "WitnessSpec", "read_bag", "synth_witness", "write_bag",
    "ForwardTrace", "ModelParams", "forward", "init_params",
    "EvalReport", "FlopsBreakdown", "accuracy", "auc", "count_flops", "evaluate",
    "FitResult", "TrainState", "adam_step", "cosine_lr", "fit", "mil_loss",
    "__version__",
]
