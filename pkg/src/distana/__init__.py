"""Weight-shared prediction-kernel lattice with latent-context inference.

The package splits into small, separately testable layers:

* :mod:`distana.autodiff` — minimal reverse-mode tape engine
* :mod:`distana.wavegen` — 2D wave-equation data generator
* :mod:`distana.core` — the lattice network itself
* :mod:`distana.training` — Adam, BPTT loop, rollout evaluation
* :mod:`distana.tuning` — Active Tuning of latent inputs
* :mod:`distana.metrics` — MSE, latitude-weighted RMSE, SNR, Spearman
* :mod:`distana.cli` — experiment runner (``distana`` command)
"""
from .core import (
    DistanaModel,
    LatticeTopology,
    NetworkConfig,
    PKState,
    PKWeights,
    load_weights,
    param_count,
    save_weights,
)
from .training import Adam, EvalResult, TrainConfig, evaluate, train
from .tuning import ContextEstimate, TuningConfig, at_washin, infer_context, tune
from .wavegen import (
    ImpulseSpec,
    SimParams,
    VelocityField,
    WaveDataset,
    WaveSequence,
    generate_sequence,
    load_dataset,
    save_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ContextEstimate",
    "DistanaModel",
    "EvalResult",
    "ImpulseSpec",
    "LatticeTopology",
    "NetworkConfig",
    "PKState",
    "PKWeights",
    "SimParams",
    "TrainConfig",
    "TuningConfig",
    "VelocityField",
    "WaveDataset",
    "WaveSequence",
    "at_washin",
    "evaluate",
    "generate_sequence",
    "infer_context",
    "load_dataset",
    "load_weights",
    "param_count",
    "save_dataset",
    "save_weights",
    "train",
    "tune",
    "__version__",
]
