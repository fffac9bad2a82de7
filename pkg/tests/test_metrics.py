"""Metric tests against hand-built label fixtures and brute-force oracles."""

import numpy as np
import pytest

from fedadv.attacks import AttackConfig, fgsm
from fedadv.data import generate_synthetic
from fedadv.metrics import (
    LabelPair,
    MetricUndefinedError,
    TransferMatrix,
    aetr,
    aetr_from_matrix,
    attack_success_rate,
    average_asr,
    clean_accuracy,
    label_pairs,
    transfer_matrix,
)
from fedadv.model import build_architecture, init_weights, predict_labels


def pair(sid, true, pre, post) -> LabelPair:
    return LabelPair(sample_id=sid, true_label=true, pre_label=pre,
                     post_label=post)


@pytest.fixture(scope="module")
def model_and_batch():
    ds = generate_synthetic(40, 8, num_classes=2, seed=2)
    arch = build_architecture("desk-cnn", (1, 8, 8), 2)
    weights = init_weights(arch, seed=2)
    batch = fgsm(arch, weights, ds.images[:12].astype(np.float64),
                 ds.labels[:12], epsilon=0.1)
    return arch, weights, batch


class TestLabelPairs:
    def test_pairs_match_direct_prediction(self, model_and_batch):
        arch, weights, batch = model_and_batch
        pairs = label_pairs(arch, weights, batch)
        pre = predict_labels(arch, weights, batch.clean)
        post = predict_labels(arch, weights, batch.perturbed)
        assert len(pairs) == len(batch)
        for i, p in enumerate(pairs):
            assert p.sample_id == i
            assert p.true_label == batch.labels[i]
            assert p.pre_label == pre[i]
            assert p.post_label == post[i]

    def test_flipped_property(self):
        assert pair(0, 1, 1, 0).flipped
        assert not pair(0, 1, 0, 0).flipped


class TestCleanAccuracy:
    def test_matches_brute_force(self, model_and_batch):
        arch, weights, batch = model_and_batch
        got = clean_accuracy(arch, weights, batch.clean, batch.labels)
        preds = predict_labels(arch, weights, batch.clean)
        want = sum(int(a == b) for a, b in zip(preds, batch.labels)) / len(batch)
        assert got == want

    def test_empty_set_undefined(self, model_and_batch):
        arch, weights, _ = model_and_batch
        with pytest.raises(MetricUndefinedError):
            clean_accuracy(arch, weights, np.zeros((0, 1, 8, 8)), [])


class TestAttackSuccessRate:
    def test_counts_label_changes(self):
        pairs = [pair(0, 0, 0, 1), pair(1, 1, 1, 1),
                 pair(2, 0, 1, 0), pair(3, 1, 0, 0)]
        assert attack_success_rate(pairs) == 0.5

    def test_restricted_pool_keeps_initially_correct_only(self):
        pairs = [
            pair(0, 0, 0, 1),  # correct before, flipped
            pair(1, 1, 1, 1),  # correct before, held
            pair(2, 0, 1, 0),  # wrong before: excluded
            pair(3, 1, 0, 1),  # wrong before: excluded
        ]
        assert attack_success_rate(pairs, restrict_to_correct=True) == 0.5
        assert attack_success_rate(pairs) == 0.75

    def test_empty_pool_undefined(self):
        with pytest.raises(MetricUndefinedError):
            attack_success_rate([])
        wrong_only = [pair(0, 0, 1, 1)]
        with pytest.raises(MetricUndefinedError):
            attack_success_rate(wrong_only, restrict_to_correct=True)

    def test_all_flipped_is_one(self):
        pairs = [pair(i, 0, 0, 1) for i in range(5)]
        assert attack_success_rate(pairs) == 1.0


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(60, 8, num_classes=2, seed=3)
    arch = build_architecture("desk-cnn", (1, 8, 8), 2)
    models = {cid: init_weights(arch, seed=cid) for cid in range(3)}
    batches = {
        cid: fgsm(arch, models[cid],
                  ds.images[cid * 10:(cid + 1) * 10].astype(np.float64),
                  ds.labels[cid * 10:(cid + 1) * 10], epsilon=0.1)
        for cid in range(3)
    }
    return arch, models, batches


class TestTransferMatrix:
    def test_shape_and_ids(self, setup):
        arch, models, batches = setup
        m = transfer_matrix(arch, models, batches)
        assert m.source_ids == (0, 1, 2)
        assert m.target_ids == (0, 1, 2)
        assert m.asr.shape == (3, 3)

    def test_cells_match_pairwise_evaluation(self, setup):
        arch, models, batches = setup
        m = transfer_matrix(arch, models, batches)
        for src in range(3):
            for tgt in range(3):
                want = attack_success_rate(
                    label_pairs(arch, models[tgt], batches[src]))
                assert m.cell(src, tgt) == want

    def test_subset_of_adversaries_allowed(self, setup):
        arch, models, batches = setup
        m = transfer_matrix(arch, models, {1: batches[1]})
        assert m.source_ids == (1,)
        assert m.asr.shape == (1, 3)

    def test_missing_target_model_rejected(self, setup):
        arch, models, batches = setup
        with pytest.raises(ValueError, match="no model"):
            transfer_matrix(arch, {0: models[0]}, batches)

    def test_no_adversaries_rejected(self, setup):
        arch, models, _ = setup
        with pytest.raises(MetricUndefinedError):
            transfer_matrix(arch, models, {})


class TestAverageAsr:
    def make_matrix(self, values) -> TransferMatrix:
        ids = tuple(range(len(values)))
        return TransferMatrix(ids, ids, np.array(values, dtype=float), {})

    def test_plain_mean(self):
        m = self.make_matrix([[0.2, 0.4], [0.6, 0.8]])
        assert average_asr(m) == pytest.approx(0.5)

    def test_diagonal_exclusion(self):
        m = self.make_matrix([[1.0, 0.4], [0.6, 1.0]])
        assert average_asr(m, exclude_diagonal=True) == pytest.approx(0.5)

    def test_single_cell_matrix_with_exclusion_undefined(self):
        m = self.make_matrix([[0.7]])
        with pytest.raises(MetricUndefinedError):
            average_asr(m, exclude_diagonal=True)

    def test_source_order_does_not_change_mean(self):
        values = np.array([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]])
        a = TransferMatrix((0, 1, 2), (0, 1, 2), values, {})
        perm = values[[2, 0, 1]]
        b = TransferMatrix((2, 0, 1), (0, 1, 2), perm, {})
        assert average_asr(a) == average_asr(b)
        assert average_asr(a, exclude_diagonal=True) == pytest.approx(
            average_asr(b, exclude_diagonal=True))


class TestAetr:
    def test_hand_oracle(self):
        # Adversary flips samples 0 and 2 of four.
        adv = [pair(0, 0, 0, 1), pair(1, 0, 0, 0),
               pair(2, 1, 1, 0), pair(3, 1, 1, 1)]
        benign = {
            # Client 1 flips both of the adversary's successes: rate 1.
            1: [pair(0, 0, 1, 0), pair(1, 0, 0, 1),
                pair(2, 1, 0, 1), pair(3, 1, 1, 1)],
            # Client 2 flips one of the two: rate 0.5.
            2: [pair(0, 0, 0, 1), pair(1, 0, 0, 0),
                pair(2, 1, 1, 1), pair(3, 1, 0, 1)],
        }
        assert aetr(adv, benign) == pytest.approx(0.75)

    def test_restricting_to_flipped_subset_can_beat_raw_asr(self):
        # The benign client flips 2 of its 4 samples overall (ASR 0.5),
        # but both of the adversary's successes transfer (AETR 1.0).
        adv = [pair(0, 0, 0, 1), pair(1, 0, 0, 0),
               pair(2, 1, 1, 0), pair(3, 1, 1, 1)]
        benign_pairs = [pair(0, 0, 0, 1), pair(1, 0, 0, 0),
                        pair(2, 1, 1, 0), pair(3, 1, 1, 1)]
        raw_asr = attack_success_rate(benign_pairs)
        value = aetr(adv, {1: benign_pairs})
        assert raw_asr == 0.5
        assert value == 1.0
        assert value >= raw_asr

    def test_no_flips_undefined(self):
        adv = [pair(0, 0, 0, 0), pair(1, 1, 1, 1)]
        with pytest.raises(MetricUndefinedError, match="flipped no samples"):
            aetr(adv, {1: adv})

    def test_no_benign_clients_undefined(self):
        adv = [pair(0, 0, 0, 1)]
        with pytest.raises(MetricUndefinedError):
            aetr(adv, {})

    def test_missing_sample_coverage_rejected(self):
        adv = [pair(0, 0, 0, 1), pair(1, 1, 1, 0)]
        benign = {1: [pair(0, 0, 0, 1)]}  # sample 1 missing
        with pytest.raises(ValueError, match="cover"):
            aetr(adv, benign)

    def test_from_matrix_excludes_adversary_itself(self):
        adv_pairs = [pair(0, 0, 0, 1), pair(1, 0, 0, 1)]
        benign_yes = [pair(0, 0, 0, 1), pair(1, 0, 0, 1)]
        benign_no = [pair(0, 0, 0, 0), pair(1, 0, 0, 0)]
        matrix = TransferMatrix(
            source_ids=(0,), target_ids=(0, 1, 2),
            asr=np.array([[1.0, 1.0, 0.0]]),
            pairs={(0, 0): adv_pairs, (0, 1): benign_yes, (0, 2): benign_no},
        )
        assert aetr_from_matrix(matrix, 0) == pytest.approx(0.5)

    def test_end_to_end_against_flip_sets(self, model_and_batch):
        arch, weights, batch = model_and_batch
        other = init_weights(arch, seed=9)
        adv_pairs = label_pairs(arch, weights, batch)
        benign_pairs = label_pairs(arch, other, batch)
        flipped = {p.sample_id for p in adv_pairs if p.flipped}
        if not flipped:
            pytest.skip("attack flipped nothing on this fixture")
        want = np.mean([
            any(q.sample_id == sid and q.flipped for q in benign_pairs)
            for sid in flipped
        ])
        assert aetr(adv_pairs, {1: benign_pairs}) == pytest.approx(want)
