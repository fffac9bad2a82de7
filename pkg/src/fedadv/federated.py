"""Federated averaging with optional differential-privacy noise.

One round: sample clients, broadcast the global weights, run local SGD
on each client's shard, clip each client's weight delta to a fixed L2
norm, add calibrated Gaussian noise, and aggregate the resulting client
weights by shard-size-weighted averaging.  With privacy disabled the
clip/noise stage is skipped and the round is plain FedAvg.

Local batch order and dropout draw from a stream keyed by (seed, client,
global epoch index), so a single-client run with full participation
replays exactly the same randomness as an uninterrupted centralized run.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import seeding
from .data import ImageDataset
from .model import (
    ModelArchitecture,
    ModelWeights,
    init_weights,
    loss_and_param_gradients,
    predict_labels,
    sgd_step,
    forward,
)
from .autograd import cross_entropy


# -- configuration ---------------------------------------------------------------


@dataclass
class DPConfig:
    """Differential-privacy settings for client updates.

    ``noise_sigma`` overrides the (epsilon, delta)-calibrated value when
    set.  ``apply_downlink`` additionally perturbs the broadcast weights
    once per round before clients receive them.
    """

    enabled: bool = False
    clip_norm: float = 1.0
    epsilon: float = 1.0
    delta: float = 1e-5
    noise_sigma: Optional[float] = None
    apply_downlink: bool = False

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def sigma(self) -> float:
        if self.noise_sigma is not None:
            return float(self.noise_sigma)
        return calibrate_sigma(self.clip_norm, self.epsilon, self.delta)


@dataclass
class FedConfig:
    """Orchestration settings for federated training."""

    num_clients: int = 3
    rounds: int = 10
    clients_per_round: Optional[int] = None
    local_epochs: int = 4
    learning_rate: float = 0.08
    batch_size: int = 32
    # Accepted for interface compatibility with iteration-budgeted setups;
    # local work is driven by local_epochs.
    local_iterations: Optional[int] = None
    dp: DPConfig = field(default_factory=DPConfig)
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        if self.clients_per_round is not None and not (
            1 <= self.clients_per_round <= self.num_clients
        ):
            raise ValueError(
                f"clients_per_round must lie in [1, {self.num_clients}]"
            )
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class ClientState:
    """One participant: its data shards and most recent local model."""

    client_id: int
    train_shard: ImageDataset
    test_shard: ImageDataset
    weight_fraction: float
    role: str = "benign"
    local_weights: Optional[ModelWeights] = None
    epochs_trained: int = 0


# -- partitioning ----------------------------------------------------------------


def weight_fractions(sizes: Sequence[int]) -> list[float]:
    """FedAvg weights n_i / sum(n): scale-invariant by construction."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("every shard must contain at least one sample")
    total = sum(sizes)
    return [s / total for s in sizes]


def partition_non_iid(
    dataset: ImageDataset,
    num_clients: int,
    chunks_per_client: int = 2,
    train_fraction: float = 0.62,
    seed: int = 0,
) -> list[tuple[ImageDataset, ImageDataset]]:
    """Label-skewed partition into per-client (train, test) shards.

    Samples are sorted by label, cut into ``num_clients *
    chunks_per_client`` contiguous chunks, and chunk j is dealt to
    client ``j mod num_clients``.  Fewer chunks per client means
    stronger label skew.  Each client's pooled samples are then
    shuffled and split train/test by ``train_fraction``.

    The shards are disjoint and their union is the whole dataset.
    """
    if num_clients < 1:
        raise ValueError("num_clients must be positive")
    if chunks_per_client < 1:
        raise ValueError("chunks_per_client must be positive")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    num_chunks = num_clients * chunks_per_client
    if len(dataset) < 2 * num_clients:
        raise ValueError(
            f"{len(dataset)} samples cannot give every one of "
            f"{num_clients} clients a non-empty train and test shard"
        )
    order = np.argsort(dataset.labels, kind="stable")
    chunks = np.array_split(order, num_chunks)
    shards: list[tuple[ImageDataset, ImageDataset]] = []
    for cid in range(num_clients):
        mine = np.concatenate([chunks[j] for j in range(cid, num_chunks, num_clients)])
        rng = seeding.derive_rng(seed, seeding.PARTITION, cid)
        rng.shuffle(mine)
        n_train = int(round(train_fraction * len(mine)))
        n_train = max(1, min(len(mine) - 1, n_train))
        shards.append((
            dataset.subset(mine[:n_train], name=f"{dataset.name}/c{cid}/train"),
            dataset.subset(mine[n_train:], name=f"{dataset.name}/c{cid}/test"),
        ))
    return shards


def build_clients(
    shards: Sequence[tuple[ImageDataset, ImageDataset]],
) -> list[ClientState]:
    """Wrap (train, test) shards into client states with FedAvg fractions."""
    fractions = weight_fractions([len(train) for train, _ in shards])
    return [
        ClientState(cid, train, test, frac)
        for cid, ((train, test), frac) in enumerate(zip(shards, fractions))
    ]


# -- privacy primitives ------------------------------------------------------------


def calibrate_sigma(clip_norm: float, epsilon: float, delta: float) -> float:
    """Gaussian-mechanism noise scale C * sqrt(2 ln(1.25/delta)) / epsilon."""
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return clip_norm * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def clip_update(update: ModelWeights, clip_norm: float) -> ModelWeights:
    """Scale an update by min(1, clip_norm / ||update||_2).

    Updates already inside the ball pass through unchanged; larger ones
    keep their direction and land on the ball's surface.
    """
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    norm = update.l2_norm()
    if norm <= clip_norm:
        return update
    return update.scale(clip_norm / norm)


def add_gaussian_noise(weights: ModelWeights, sigma: float,
                       rng: np.random.Generator) -> ModelWeights:
    """Add iid N(0, sigma^2) noise to every weight entry."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    return ModelWeights([
        a + rng.normal(0.0, sigma, size=a.shape) for a in weights.arrays
    ])


# -- aggregation -------------------------------------------------------------------


def aggregate_fedavg(
    models: Sequence[tuple[ModelWeights, float]],
) -> ModelWeights:
    """Fraction-weighted average of client weights.

    Computed as w_0 + sum_i p_i (w_i - w_0), which equals sum_i p_i w_i
    when the fractions sum to 1 but is exact in two cases the tests
    rely on: a single client (returns its weights bit for bit) and all
    clients equal.
    """
    if not models:
        raise ValueError("aggregate_fedavg needs at least one model")
    total = math.fsum(frac for _, frac in models)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"client fractions sum to {total}, expected 1")
    anchor, _ = models[0]
    if len(models) == 1:
        return anchor.copy()
    acc = anchor.zeros_like()
    for weights, frac in models:
        anchor._check_compatible(weights)
        for a, (w, w0) in zip(acc.arrays, zip(weights.arrays, anchor.arrays)):
            a += frac * (w - w0)
    return anchor + acc


# -- local training ----------------------------------------------------------------


def sgd_train(
    arch: ModelArchitecture,
    weights: ModelWeights,
    images: np.ndarray,
    labels: np.ndarray,
    learning_rate: float,
    batch_size: int,
    epochs: int,
    seed: int,
    client_id: int = 0,
    start_epoch: int = 0,
) -> tuple[ModelWeights, list[float]]:
    """Plain minibatch SGD on cross-entropy.

    Each epoch draws its shuffle order and dropout masks from a stream
    keyed by (seed, client_id, start_epoch + epoch), so training the
    same data for e1 epochs and then e2 more (passing
    ``start_epoch=e1``) replays exactly the draws of a single
    (e1 + e2)-epoch run.

    Returns the trained weights and the mean per-sample loss of each
    epoch (measured on the pre-step weights of each batch).
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels)
    n = x.shape[0]
    losses: list[float] = []
    for epoch in range(epochs):
        rng = seeding.derive_rng(seed, seeding.TRAINING, client_id,
                                 start_epoch + epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_param_gradients(
                arch, weights, x[idx], y[idx], training=True, rng=rng)
            weights = sgd_step(weights, grads, learning_rate)
            total += loss * len(idx)
        losses.append(total / n)
    return weights, losses


def local_update(
    arch: ModelArchitecture,
    global_weights: ModelWeights,
    client: ClientState,
    config: FedConfig,
    start_epoch: int = 0,
) -> tuple[ModelWeights, list[float]]:
    """One client's local refinement of the broadcast weights."""
    return sgd_train(
        arch,
        global_weights,
        client.train_shard.images,
        client.train_shard.labels,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        epochs=config.local_epochs,
        seed=config.seed,
        client_id=client.client_id,
        start_epoch=start_epoch,
    )


def train_centralized(
    arch: ModelArchitecture,
    weights: ModelWeights,
    dataset: ImageDataset,
    learning_rate: float,
    batch_size: int,
    epochs: int,
    seed: int,
) -> tuple[ModelWeights, list[float]]:
    """Single-worker SGD baseline, stream-compatible with client 0."""
    return sgd_train(arch, weights, dataset.images, dataset.labels,
                     learning_rate, batch_size, epochs, seed, client_id=0)


# -- evaluation helpers --------------------------------------------------------------


def mean_loss(arch: ModelArchitecture, weights: ModelWeights, images,
              labels, batch_size: int = 256) -> float:
    """Mean cross-entropy in inference mode, batched for memory."""
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels)
    total = 0.0
    for start in range(0, x.shape[0], batch_size):
        chunk = slice(start, start + batch_size)
        logits = forward(arch, weights, x[chunk], training=False)
        total += cross_entropy(logits, y[chunk]).item() * (logits.shape[0])
    return total / x.shape[0]


def accuracy(arch: ModelArchitecture, weights: ModelWeights, images,
             labels) -> float:
    predicted = predict_labels(arch, weights, images)
    return float((predicted == np.asarray(labels)).mean())


# -- orchestration -------------------------------------------------------------------


@dataclass
class RoundRecord:
    """Metrics captured after each aggregation, one CSV row each."""

    round: int
    global_train_loss: float
    global_val_acc: float
    per_client_val_acc: tuple[float, ...]
    dp_enabled: bool
    sigma: float


@dataclass
class FederatedResult:
    global_weights: ModelWeights
    client_weights: dict[int, ModelWeights]
    history: list[RoundRecord]


UpdateAudit = Callable[[int, int, float, float], None]


def run_federated_training(
    arch: ModelArchitecture,
    clients: Sequence[ClientState],
    config: FedConfig,
    initial_weights: Optional[ModelWeights] = None,
    update_audit: Optional[UpdateAudit] = None,
) -> FederatedResult:
    """Run the full federated loop and return final models plus history.

    Per round: sample ``clients_per_round`` clients without replacement,
    broadcast the global weights (optionally noised when downlink
    privacy is on), train locally, then with privacy enabled clip each
    client's weight delta to ``dp.clip_norm`` and add N(0, sigma^2)
    noise before aggregation.  ``update_audit`` (round, client, raw
    norm, clipped norm) observes every delta right after clipping.

    ``client_weights`` holds each client's final local model; clients
    that were never sampled fall back to the final global weights.
    """
    clients = list(clients)
    if len(clients) != config.num_clients:
        raise ValueError(
            f"config expects {config.num_clients} clients, got {len(clients)}"
        )
    global_weights = (initial_weights.copy() if initial_weights is not None
                      else init_weights(arch, config.seed))
    sigma = config.dp.sigma() if config.dp.enabled else 0.0
    per_round = config.clients_per_round or config.num_clients

    train_images = np.concatenate([c.train_shard.images for c in clients])
    train_labels = np.concatenate([c.train_shard.labels for c in clients])
    val_images = np.concatenate([c.test_shard.images for c in clients])
    val_labels = np.concatenate([c.test_shard.labels for c in clients])

    history: list[RoundRecord] = []
    for round_idx in range(1, config.rounds + 1):
        sampler = seeding.derive_rng(config.seed, seeding.SAMPLING, round_idx)
        chosen = sorted(sampler.choice(len(clients), per_round, replace=False))
        participants = [clients[i] for i in chosen]

        broadcast = global_weights
        if config.dp.enabled and config.dp.apply_downlink:
            broadcast = add_gaussian_noise(
                global_weights, sigma,
                seeding.derive_rng(config.seed, seeding.NOISE_DOWNLINK, round_idx),
            )

        contributions: list[tuple[ModelWeights, float]] = []
        fractions = weight_fractions([len(c.train_shard) for c in participants])
        for client, fraction in zip(participants, fractions):
            local_weights, _ = local_update(
                arch, broadcast, client, config, start_epoch=client.epochs_trained)
            client.epochs_trained += config.local_epochs
            if config.dp.enabled:
                delta = local_weights - broadcast
                raw_norm = delta.l2_norm()
                delta = clip_update(delta, config.dp.clip_norm)
                if update_audit is not None:
                    update_audit(round_idx, client.client_id,
                                 raw_norm, delta.l2_norm())
                delta = add_gaussian_noise(
                    delta, sigma,
                    seeding.derive_rng(config.seed, seeding.NOISE_UPLINK,
                                       round_idx, client.client_id),
                )
                local_weights = broadcast + delta
            client.local_weights = local_weights
            contributions.append((local_weights, fraction))

        global_weights = aggregate_fedavg(contributions)
        history.append(RoundRecord(
            round=round_idx,
            global_train_loss=mean_loss(arch, global_weights,
                                        train_images, train_labels),
            global_val_acc=accuracy(arch, global_weights, val_images, val_labels),
            per_client_val_acc=tuple(
                accuracy(arch, global_weights, c.test_shard.images,
                         c.test_shard.labels)
                for c in clients
            ),
            dp_enabled=config.dp.enabled,
            sigma=sigma,
        ))

    client_weights = {
        c.client_id: (c.local_weights if c.local_weights is not None
                      else global_weights.copy())
        for c in clients
    }
    return FederatedResult(global_weights, client_weights, history)


# -- history CSV ---------------------------------------------------------------------

_HISTORY_COLUMNS = ("round", "global_train_loss", "global_val_acc",
                    "per_client_val_acc", "dp_enabled", "sigma")


def write_round_history(history: Sequence[RoundRecord], path) -> None:
    """Write per-round metrics; per-client accuracies join with '|'."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HISTORY_COLUMNS)
        for rec in history:
            writer.writerow([
                rec.round,
                repr(rec.global_train_loss),
                repr(rec.global_val_acc),
                "|".join(repr(a) for a in rec.per_client_val_acc),
                str(rec.dp_enabled).lower(),
                repr(rec.sigma),
            ])


def load_round_history(path) -> list[RoundRecord]:
    """Parse a file written by :func:`write_round_history`."""
    out: list[RoundRecord] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != _HISTORY_COLUMNS:
            raise ValueError(f"unexpected history columns {reader.fieldnames}")
        for row in reader:
            out.append(RoundRecord(
                round=int(row["round"]),
                global_train_loss=float(row["global_train_loss"]),
                global_val_acc=float(row["global_val_acc"]),
                per_client_val_acc=tuple(
                    float(v) for v in row["per_client_val_acc"].split("|") if v
                ),
                dp_enabled=row["dp_enabled"] == "true",
                sigma=float(row["sigma"]),
            ))
    return out
