"""Desk-scale federated learning with privacy noise and evasion attacks.

The package splits into small, separately usable layers:

- ``autograd``: reverse-mode autodiff over float64 numpy arrays.
- ``model``: convolutional classifiers, weight containers, presets.
- ``data``: dataset container, binary file format, synthesis, augmentation.
- ``federated``: FedAvg orchestration with optional DP clipping/noise.
- ``attacks``: FGSM/BIM/PGD under a shared L-infinity engine.
- ``metrics``: accuracy, attack success rates, cross-client transfer.
- ``experiment``: config-driven pipeline emitting deterministic CSVs.
"""

__version__ = "0.1.0"

from .autograd import Tensor, ShapeError
from .data import ImageDataset, generate_synthetic, load_dataset, save_dataset
from .model import (
    ModelArchitecture,
    ModelWeights,
    build_architecture,
    init_weights,
)
from .federated import (
    ClientState,
    DPConfig,
    FedConfig,
    run_federated_training,
)
from .attacks import AttackConfig, AdversarialBatch, fgsm, bim, pgd, run_attack
from .metrics import TransferMatrix, transfer_matrix, average_asr, aetr
from .experiment import (
    ExperimentConfig,
    ExperimentReport,
    parse_config_file,
    run_experiment,
    run_sweep,
)
