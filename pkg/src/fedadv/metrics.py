"""Robustness metrics: accuracy, attack success, and cross-client transfer.

Attack success here means label flipping: a sample counts as a success
when the model's prediction on the perturbed input differs from its
prediction on the clean input, regardless of the true label.  The
``restrict_to_correct`` switches limit evaluation to samples the model
classified correctly before the attack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .attacks import AdversarialBatch
from .model import ModelArchitecture, ModelWeights, predict_labels


class MetricUndefinedError(ValueError):
    """Raised when a metric's denominator is empty."""


@dataclass(frozen=True)
class LabelPair:
    """One sample's labels before and after perturbation, on one model."""

    sample_id: int
    true_label: int
    pre_label: int
    post_label: int

    @property
    def flipped(self) -> bool:
        return self.pre_label != self.post_label


def label_pairs(arch: ModelArchitecture, weights: ModelWeights,
                batch: AdversarialBatch) -> list[LabelPair]:
    """Evaluate a batch on a model, pairing pre- and post-attack labels."""
    pre = predict_labels(arch, weights, batch.clean)
    post = predict_labels(arch, weights, batch.perturbed)
    return [
        LabelPair(int(sid), int(y), int(a), int(b))
        for sid, y, a, b in zip(batch.sample_ids, batch.labels, pre, post)
    ]


def clean_accuracy(arch: ModelArchitecture, weights: ModelWeights,
                   images, labels) -> float:
    """Fraction of unperturbed samples predicted correctly."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MetricUndefinedError("accuracy over an empty sample set")
    return float((predict_labels(arch, weights, images) == labels).mean())


def attack_success_rate(pairs: Sequence[LabelPair],
                        restrict_to_correct: bool = False) -> float:
    """Fraction of samples whose predicted label changed under attack."""
    pool = [p for p in pairs if p.pre_label == p.true_label] \
        if restrict_to_correct else list(pairs)
    if not pool:
        raise MetricUndefinedError(
            "attack success rate over an empty sample set"
        )
    return sum(p.flipped for p in pool) / len(pool)


@dataclass
class TransferMatrix:
    """Attack success rates for every (adversary, target) client pair.

    ``asr[i, j]`` is the success rate of source ``source_ids[i]``'s
    batch evaluated on target ``target_ids[j]``'s model.  ``pairs``
    keeps the underlying per-sample labels for each cell.
    """

    source_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    asr: np.ndarray
    pairs: dict[tuple[int, int], list[LabelPair]]

    def cell(self, source: int, target: int) -> float:
        i = self.source_ids.index(source)
        j = self.target_ids.index(target)
        return float(self.asr[i, j])


def transfer_matrix(
    arch: ModelArchitecture,
    models: Mapping[int, ModelWeights],
    batches: Mapping[int, AdversarialBatch],
    restrict_to_correct: bool = False,
) -> TransferMatrix:
    """Evaluate every adversary's batch against every client's model.

    ``models`` must cover all targets; ``batches`` maps each adversary
    to the batch it crafted against its own model.
    """
    source_ids = tuple(sorted(batches))
    target_ids = tuple(sorted(models))
    if not source_ids:
        raise MetricUndefinedError("transfer matrix needs at least one adversary")
    missing = [s for s in source_ids if s not in models]
    if missing:
        raise ValueError(f"no model for adversary clients {missing}")
    asr = np.zeros((len(source_ids), len(target_ids)))
    pairs: dict[tuple[int, int], list[LabelPair]] = {}
    for i, src in enumerate(source_ids):
        for j, tgt in enumerate(target_ids):
            cell_pairs = label_pairs(arch, models[tgt], batches[src])
            pairs[(src, tgt)] = cell_pairs
            asr[i, j] = attack_success_rate(cell_pairs, restrict_to_correct)
    return TransferMatrix(source_ids, target_ids, asr, pairs)


def average_asr(matrix: TransferMatrix, exclude_diagonal: bool = False) -> float:
    """Mean of the matrix cells, optionally without self-attack cells."""
    keep = np.ones(matrix.asr.shape, dtype=bool)
    if exclude_diagonal:
        for i, src in enumerate(matrix.source_ids):
            for j, tgt in enumerate(matrix.target_ids):
                if src == tgt:
                    keep[i, j] = False
    if not keep.any():
        raise MetricUndefinedError("no cells left to average")
    return float(matrix.asr[keep].mean())


def aetr(adversary_pairs: Sequence[LabelPair],
         benign_pairs_by_client: Mapping[int, Sequence[LabelPair]]) -> float:
    """Transfer rate of the adversary's successful flips.

    Among samples whose label flipped on the adversary's own model, the
    fraction that also flip on each benign client's model, averaged
    over benign clients.  Undefined (raises) when the adversary flipped
    nothing or there are no benign clients.
    """
    flipped_ids = {p.sample_id for p in adversary_pairs if p.flipped}
    if not flipped_ids:
        raise MetricUndefinedError(
            "transfer rate undefined: the adversary flipped no samples"
        )
    if not benign_pairs_by_client:
        raise MetricUndefinedError("transfer rate needs at least one benign client")
    rates = []
    for client_id in sorted(benign_pairs_by_client):
        pairs = benign_pairs_by_client[client_id]
        hits = [p for p in pairs if p.sample_id in flipped_ids]
        if len(hits) != len(flipped_ids):
            raise ValueError(
                f"client {client_id} pairs do not cover the adversary's samples"
            )
        rates.append(sum(p.flipped for p in hits) / len(hits))
    return float(np.mean(rates))


def aetr_from_matrix(matrix: TransferMatrix, adversary: int) -> float:
    """AETR for one adversary, read off a full transfer matrix."""
    benign = {
        tgt: matrix.pairs[(adversary, tgt)]
        for tgt in matrix.target_ids if tgt != adversary
    }
    return aetr(matrix.pairs[(adversary, adversary)], benign)
