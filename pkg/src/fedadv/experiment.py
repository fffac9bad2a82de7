"""Config-driven experiment pipeline.

An experiment is: load or synthesize a dataset, partition it across
clients, train federated models, let each client in turn act as the
adversary and perturb its own test samples, evaluate every batch on
every client's final local model, and reduce to transfer metrics.

Result tables are written as CSV with deterministic content: rerunning
the same config and seed on the same package version produces byte
identical files.  Attack wall times go to a separate timings file so
that the main results stay reproducible byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeding
from .attacks import AdversarialBatch, AttackConfig, run_attack
from .data import ImageDataset, generate_synthetic, load_dataset
from .federated import (
    ClientState,
    DPConfig,
    FedConfig,
    FederatedResult,
    RoundRecord,
    build_clients,
    load_round_history,
    partition_non_iid,
    run_federated_training,
    write_round_history,
)
from .metrics import (
    MetricUndefinedError,
    TransferMatrix,
    aetr_from_matrix,
    average_asr,
    clean_accuracy,
    transfer_matrix,
)
from .model import (
    ModelArchitecture,
    ModelWeights,
    PRESETS,
    build_architecture,
    load_weights,
    save_weights,
)

log = logging.getLogger("fedadv")

THREADS_ENV = "FEDADV_THREADS"

SWEEP_PARAMETERS = ("epsilon", "alpha", "iterations")


class ConfigError(ValueError):
    """A config file or override is malformed or inconsistent."""


# -- configuration ----------------------------------------------------------------


@dataclass
class DataSpec:
    """Where the experiment's dataset comes from."""

    kind: str = "synthetic"
    path: Optional[str] = None
    num_samples: int = 600
    image_size: int = 16
    num_classes: int = 2
    noise_level: float = 0.3
    signal_strength: float = 0.2
    channels: int = 1
    name: str = "synthetic"

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ValueError(f"data.kind must be synthetic or file, got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ValueError("data.kind=file requires data.path")


@dataclass
class SweepSpec:
    parameter: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ValueError(
                f"sweep.parameter must be one of {SWEEP_PARAMETERS}, "
                f"got {self.parameter!r}"
            )
        if not self.values:
            raise ValueError("sweep.values must not be empty")


@dataclass
class ExperimentConfig:
    """Everything one experiment run depends on."""

    data: DataSpec = field(default_factory=DataSpec)
    fed: FedConfig = field(default_factory=FedConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        kind="pgd", epsilon=0.03, alpha=0.007, iterations=20))
    preset: str = "desk-cnn"
    normalize: Optional[tuple[tuple[float, ...], tuple[float, ...]]] = None
    chunks_per_client: int = 2
    train_fraction: float = 0.62
    attack_samples: int = 100
    rotate_adversary: bool = True
    restrict_to_correct: bool = False
    sweep: Optional[SweepSpec] = None
    output_dir: str = "out"
    seed: int = 0
    use_cache: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"model.preset must be one of {PRESETS}")
        if self.chunks_per_client < 1:
            raise ValueError("chunks_per_client must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.attack_samples < 1:
            raise ValueError("attack_samples must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        # One seed drives the whole run; the orchestration seed follows it.
        self.fed.seed = self.seed


# -- config file parsing ------------------------------------------------------------


def _to_int(text: str) -> int:
    return int(text, 10)


def _to_float(text: str) -> float:
    return float(text)


def _to_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _to_str(text: str) -> str:
    return text


def _to_float_list(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(p) for p in parts)


_KEY_TYPES: dict[str, Callable[[str], object]] = {
    "data.kind": _to_str,
    "data.path": _to_str,
    "data.num_samples": _to_int,
    "data.image_size": _to_int,
    "data.num_classes": _to_int,
    "data.noise_level": _to_float,
    "data.signal_strength": _to_float,
    "data.channels": _to_int,
    "data.name": _to_str,
    "fed.num_clients": _to_int,
    "fed.rounds": _to_int,
    "fed.clients_per_round": _to_int,
    "fed.local_epochs": _to_int,
    "fed.learning_rate": _to_float,
    "fed.batch_size": _to_int,
    "fed.local_iterations": _to_int,
    "fed.dp.enabled": _to_bool,
    "fed.dp.clip_norm": _to_float,
    "fed.dp.epsilon": _to_float,
    "fed.dp.delta": _to_float,
    "fed.dp.noise_sigma": _to_float,
    "fed.dp.apply_downlink": _to_bool,
    "model.preset": _to_str,
    "model.normalize.mean": _to_float_list,
    "model.normalize.std": _to_float_list,
    "attack.kind": _to_str,
    "attack.epsilon": _to_float,
    "attack.alpha": _to_float,
    "attack.iterations": _to_int,
    "attack.random_init": _to_bool,
    "attack.samples": _to_int,
    "sweep.parameter": _to_str,
    "sweep.values": _to_float_list,
    "experiment.rotate_adversary": _to_bool,
    "experiment.restrict_to_correct": _to_bool,
    "experiment.chunks_per_client": _to_int,
    "experiment.train_fraction": _to_float,
    "experiment.seed": _to_int,
    "experiment.output_dir": _to_str,
    "experiment.cache": _to_bool,
}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse flat ``key=value`` lines into an experiment config.

    Blank lines and ``#`` comments are ignored.  Unknown keys,
    duplicate keys, unparsable values and inconsistent settings all
    raise :class:`ConfigError` naming the offending line.
    """
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEY_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _KEY_TYPES[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return build_config(values)


def parse_config_file(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, source=str(path))


def build_config(values: dict[str, object]) -> ExperimentConfig:
    """Assemble an :class:`ExperimentConfig` from parsed key/value pairs."""
    def take(prefix: str) -> dict[str, object]:
        return {
            key[len(prefix):]: value
            for key, value in values.items() if key.startswith(prefix)
        }

    try:
        data = DataSpec(**take("data."))
        dp = DPConfig(**take("fed.dp."))
        fed_kwargs = {k: v for k, v in take("fed.").items() if not k.startswith("dp.")}
        fed = FedConfig(dp=dp, **fed_kwargs)
        attack_kwargs = {k: v for k, v in take("attack.").items() if k != "samples"}
        attack_kwargs.setdefault("kind", "pgd")
        attack_kwargs.setdefault("epsilon", 0.03)
        if attack_kwargs["kind"] == "pgd" and "alpha" not in attack_kwargs:
            attack_kwargs["alpha"] = 0.007
        if attack_kwargs["kind"] != "fgsm":
            attack_kwargs.setdefault("iterations", 20)
        attack = AttackConfig(**attack_kwargs)

        normalize = None
        mean = values.get("model.normalize.mean")
        std = values.get("model.normalize.std")
        if (mean is None) != (std is None):
            raise ValueError(
                "model.normalize.mean and model.normalize.std must come together"
            )
        if mean is not None:
            normalize = (tuple(mean), tuple(std))

        sweep = None
        parameter = values.get("sweep.parameter")
        grid = values.get("sweep.values")
        if (parameter is None) != (grid is None):
            raise ValueError("sweep.parameter and sweep.values must come together")
        if parameter is not None:
            sweep = SweepSpec(str(parameter), tuple(grid))

        exp_kwargs: dict[str, object] = {}
        renames = {
            "rotate_adversary": "rotate_adversary",
            "restrict_to_correct": "restrict_to_correct",
            "chunks_per_client": "chunks_per_client",
            "train_fraction": "train_fraction",
            "seed": "seed",
            "output_dir": "output_dir",
            "cache": "use_cache",
        }
        for short, target in renames.items():
            if f"experiment.{short}" in values:
                exp_kwargs[target] = values[f"experiment.{short}"]
        if "attack.samples" in values:
            exp_kwargs["attack_samples"] = values["attack.samples"]
        if "model.preset" in values:
            exp_kwargs["preset"] = values["model.preset"]

        return ExperimentConfig(
            data=data, fed=fed, attack=attack, normalize=normalize,
            sweep=sweep, **exp_kwargs,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def resolve_threads() -> int:
    """Worker-thread cap from the environment, default 1."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or not raw.strip():
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads


# -- data and training ---------------------------------------------------------------


def load_data(config: ExperimentConfig) -> ImageDataset:
    spec = config.data
    if spec.kind == "file":
        dataset = load_dataset(spec.path, name=spec.name if spec.name else None)
        if spec.name == "synthetic":
            dataset = dataclasses.replace(dataset, name=Path(spec.path).stem)
        return dataset
    return generate_synthetic(
        num_samples=spec.num_samples,
        image_size=spec.image_size,
        num_classes=spec.num_classes,
        noise_level=spec.noise_level,
        signal_strength=spec.signal_strength,
        channels=spec.channels,
        seed=config.seed,
        name=spec.name,
    )


def build_model_architecture(config: ExperimentConfig,
                             dataset: ImageDataset) -> ModelArchitecture:
    norm = None
    if config.normalize is not None:
        mean, std = config.normalize
        channels = dataset.image_shape[0]
        if len(mean) == 1:
            mean = mean * channels
        if len(std) == 1:
            std = std * channels
        norm = (mean, std)
    return build_architecture(config.preset, dataset.image_shape,
                              dataset.num_classes, input_norm=norm)


def training_cache_key(config: ExperimentConfig) -> str:
    """Hash of every setting that influences the trained weights."""
    relevant = {
        "data": dataclasses.asdict(config.data),
        "fed": dataclasses.asdict(config.fed),
        "preset": config.preset,
        "normalize": config.normalize,
        "chunks_per_client": config.chunks_per_client,
        "train_fraction": config.train_fraction,
        "seed": config.seed,
    }
    blob = json.dumps(relevant, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainedModels:
    arch: ModelArchitecture
    clients: list[ClientState]
    result: FederatedResult
    dataset: ImageDataset
    cache_key: str
    from_cache: bool = False


def _cache_dir(config: ExperimentConfig, key: str) -> Path:
    return Path(config.output_dir) / "cache" / key


def _try_load_cache(config: ExperimentConfig, arch: ModelArchitecture,
                    clients: Sequence[ClientState], key: str
                    ) -> Optional[FederatedResult]:
    cache = _cache_dir(config, key)
    expected = sum(
        2 for layer in arch.layers if type(layer).__name__ in ("Conv2D", "Dense"))
    try:
        global_weights = load_weights(cache / "global.fadw")
        client_weights = {
            c.client_id: load_weights(cache / f"client{c.client_id}.fadw")
            for c in clients
        }
        history = load_round_history(cache / "rounds.csv")
    except (OSError, ValueError):
        return None
    if len(global_weights.arrays) != expected or any(
        len(w.arrays) != expected for w in client_weights.values()
    ):
        return None
    for client in clients:
        client.local_weights = client_weights[client.client_id]
    return FederatedResult(global_weights, client_weights, history)


def _write_cache(config: ExperimentConfig, result: FederatedResult,
                 key: str) -> None:
    cache = _cache_dir(config, key)
    cache.mkdir(parents=True, exist_ok=True)
    save_weights(result.global_weights, cache / "global.fadw")
    for cid, weights in result.client_weights.items():
        save_weights(weights, cache / f"client{cid}.fadw")
    write_round_history(result.history, cache / "rounds.csv")


def train_models(config: ExperimentConfig) -> TrainedModels:
    """Load data, partition, and train (or reuse cached) client models."""
    dataset = load_data(config)
    shards = partition_non_iid(
        dataset, config.fed.num_clients,
        chunks_per_client=config.chunks_per_client,
        train_fraction=config.train_fraction,
        seed=config.seed,
    )
    clients = build_clients(shards)
    arch = build_model_architecture(config, dataset)
    key = training_cache_key(config)
    if config.use_cache:
        cached = _try_load_cache(config, arch, clients, key)
        if cached is not None:
            log.info("reusing cached models (key %s)", key)
            return TrainedModels(arch, clients, cached, dataset, key, True)
    log.info("training %d clients for %d rounds", config.fed.num_clients,
             config.fed.rounds)
    result = run_federated_training(arch, clients, config.fed)
    if config.use_cache:
        _write_cache(config, result, key)
    return TrainedModels(arch, clients, result, dataset, key, False)


# -- attack phase ---------------------------------------------------------------------


def select_attack_samples(seed: int, client_id: int, shard_size: int,
                          count: int) -> np.ndarray:
    """Deterministic sample indices an adversary perturbs from its shard."""
    count = min(count, shard_size)
    rng = seeding.derive_rng(seed, seeding.ATTACK, client_id)
    return np.sort(rng.choice(shard_size, size=count, replace=False))


def role_attack_config(base: AttackConfig, seed: int,
                       client_id: int) -> AttackConfig:
    """The attack config a given adversary uses (role-specific seed)."""
    return replace(base, seed=seeding.derive_seed(seed, seeding.ATTACK, client_id))


@dataclass
class ExperimentReport:
    """All measurements from one attack configuration."""

    dataset_name: str
    attack: AttackConfig
    seed: int
    matrix: TransferMatrix
    acc_own: dict[int, float]
    acc_cell: dict[tuple[int, int], float]
    aasr: float
    aetr_by_adversary: dict[int, Optional[float]]
    attack_sizes: dict[int, int]
    attack_seconds: dict[int, float]
    history: list[RoundRecord]
    sweep_parameter: Optional[str] = None
    sweep_value: Optional[float] = None

    @property
    def mean_acc_own(self) -> float:
        return float(np.mean(list(self.acc_own.values())))

    @property
    def mean_aetr(self) -> Optional[float]:
        defined = [v for v in self.aetr_by_adversary.values() if v is not None]
        return float(np.mean(defined)) if defined else None

    @property
    def mean_diag_asr(self) -> float:
        cells = [self.matrix.cell(s, s) for s in self.matrix.source_ids
                 if s in self.matrix.target_ids]
        return float(np.mean(cells))

    @property
    def mean_offdiag_asr(self) -> float:
        return average_asr(self.matrix, exclude_diagonal=True)


def _attack_phase(trained: TrainedModels, config: ExperimentConfig,
                  attack: AttackConfig, sweep_parameter: Optional[str] = None,
                  sweep_value: Optional[float] = None) -> ExperimentReport:
    arch, clients, result = trained.arch, trained.clients, trained.result
    models = result.client_weights
    adversaries = ([c.client_id for c in clients] if config.rotate_adversary
                   else [clients[0].client_id])

    def craft(adv_id: int) -> tuple[int, AdversarialBatch]:
        client = next(c for c in clients if c.client_id == adv_id)
        shard = client.test_shard
        idx = select_attack_samples(config.seed, adv_id, len(shard),
                                    config.attack_samples)
        cfg = replace(role_attack_config(attack, config.seed, adv_id),
                      pixel_min=shard.pixel_min, pixel_max=shard.pixel_max)
        batch = run_attack(
            arch, models[adv_id], shard.images[idx], shard.labels[idx], cfg,
            sample_ids=idx,
        )
        return adv_id, batch

    threads = resolve_threads()
    if threads > 1 and len(adversaries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            batches = dict(pool.map(craft, adversaries))
    else:
        batches = dict(map(craft, adversaries))

    matrix = transfer_matrix(arch, models, batches,
                             restrict_to_correct=config.restrict_to_correct)
    acc_own = {
        c.client_id: clean_accuracy(arch, models[c.client_id],
                                    c.test_shard.images, c.test_shard.labels)
        for c in clients
    }
    acc_cell = {
        (s, t): clean_accuracy(arch, models[t], batches[s].clean,
                               batches[s].labels)
        for s in matrix.source_ids for t in matrix.target_ids
    }
    aetr_by_adv: dict[int, Optional[float]] = {}
    for adv in matrix.source_ids:
        if adv not in matrix.target_ids or len(matrix.target_ids) < 2:
            aetr_by_adv[adv] = None
            continue
        try:
            aetr_by_adv[adv] = aetr_from_matrix(matrix, adv)
        except MetricUndefinedError:
            aetr_by_adv[adv] = None
    return ExperimentReport(
        dataset_name=trained.dataset.name,
        attack=attack,
        seed=config.seed,
        matrix=matrix,
        acc_own=acc_own,
        acc_cell=acc_cell,
        aasr=average_asr(matrix),
        aetr_by_adversary=aetr_by_adv,
        attack_sizes={adv: len(batch) for adv, batch in batches.items()},
        attack_seconds={adv: batch.wall_time_s for adv, batch in batches.items()},
        history=result.history,
        sweep_parameter=sweep_parameter,
        sweep_value=sweep_value,
    )


def run_experiment(config: ExperimentConfig,
                   trained: Optional[TrainedModels] = None) -> ExperimentReport:
    """Train (or reuse) models and measure one attack configuration."""
    if trained is None:
        trained = train_models(config)
    return _attack_phase(trained, config, config.attack)


def run_sweep(config: ExperimentConfig) -> list[ExperimentReport]:
    """Measure every point of the configured parameter grid.

    Training happens once; each grid point only reruns the attack and
    evaluation phase with the swept field substituted into the attack
    config.
    """
    if config.sweep is None:
        raise ConfigError("config has no sweep section")
    trained = train_models(config)
    reports = []
    for value in config.sweep.values:
        if config.sweep.parameter == "iterations":
            point = replace(config.attack, iterations=int(value))
        elif config.sweep.parameter == "alpha":
            point = replace(config.attack, alpha=float(value))
        else:
            point = replace(config.attack, epsilon=float(value))
        log.info("sweep %s=%s", config.sweep.parameter, value)
        reports.append(_attack_phase(trained, config, point,
                                     config.sweep.parameter, float(value)))
    return reports


# -- CSV emission ----------------------------------------------------------------------

RESULTS_COLUMNS = ("dataset", "attack_kind", "epsilon", "alpha", "iterations",
                   "adversary_id", "target_id", "acc", "asr", "aasr", "aetr",
                   "seed")
TIMINGS_COLUMNS = ("dataset", "attack_kind", "epsilon", "alpha", "iterations",
                   "adversary_id", "samples", "wall_time_s", "seed")
SWEEP_COLUMNS = ("parameter", "value", "aasr", "mean_diag_asr",
                 "mean_offdiag_asr", "mean_aetr", "mean_acc", "seed")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_rows(path: Path, columns: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_csv(reports: Sequence[ExperimentReport], output_dir,
             config: Optional[ExperimentConfig] = None) -> dict[str, Path]:
    """Write results, timings, round history and (for sweeps) summary CSV.

    Returns a name -> path mapping of everything written.  Timing rows
    are machine-dependent and live apart from the deterministic tables.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}

    result_rows = []
    timing_rows = []
    for report in reports:
        a = report.attack
        for s in report.matrix.source_ids:
            for t in report.matrix.target_ids:
                result_rows.append((
                    report.dataset_name, a.kind, a.epsilon, a.alpha,
                    a.iterations, s, t, report.acc_cell[(s, t)],
                    report.matrix.cell(s, t), report.aasr,
                    report.aetr_by_adversary.get(s), report.seed,
                ))
            timing_rows.append((
                report.dataset_name, a.kind, a.epsilon, a.alpha, a.iterations,
                s, report.attack_sizes[s], report.attack_seconds[s],
                report.seed,
            ))
    written["results"] = out / "results.csv"
    _write_rows(written["results"], RESULTS_COLUMNS, result_rows)
    written["timings"] = out / "timings.csv"
    _write_rows(written["timings"], TIMINGS_COLUMNS, timing_rows)

    if reports:
        written["rounds"] = out / "rounds.csv"
        write_round_history(reports[0].history, written["rounds"])

    sweep_rows = [
        (r.sweep_parameter, r.sweep_value, r.aasr, r.mean_diag_asr,
         r.mean_offdiag_asr, r.mean_aetr, r.mean_acc_own, r.seed)
        for r in reports if r.sweep_parameter is not None
    ]
    if sweep_rows:
        written["sweep"] = out / "sweep.csv"
        _write_rows(written["sweep"], SWEEP_COLUMNS, sweep_rows)

    if config is not None:
        meta = {
            "package_version": _package_version(),
            "training_cache_key": training_cache_key(config),
            "config": dataclasses.asdict(config),
        }
        written["meta"] = out / "meta.json"
        with open(written["meta"], "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
    return written


def _package_version() -> str:
    from . import __version__
    return __version__
