"""Loss composition: cross-entropy, masked L1, deep supervision weighting."""

import numpy as np
import pytest

from upet.losses import combined_loss, cross_entropy, masked_l1, _pool_target
from upet.model import UPetConfig, ModelOutputs, build_model
from upet.tensor import Tensor


def t32(arr):
    return Tensor(np.asarray(arr, dtype=np.float32))


class TestCrossEntropy:
    def test_uniform_logits_give_ln3(self):
        logits = t32(np.zeros((5, 3)))
        for label in (0, 1, 2):
            loss = cross_entropy(logits, [label] * 5)
            assert abs(loss.item() - np.log(3.0)) < 1e-6

    def test_saturated_correct_prediction_is_near_zero(self):
        logits = t32([[30.0, -30.0, -30.0]])
        assert cross_entropy(logits, [0]).item() < 1e-9

    def test_matches_high_precision_direct_formula(self):
        rng = np.random.default_rng(17)
        logits = rng.standard_normal((5, 3)).astype(np.float32)
        labels = rng.integers(0, 3, size=5)
        got = cross_entropy(t32(logits), labels).item()
        z = logits.astype(np.float64)
        ref = np.mean([np.log(np.exp(z[i]).sum()) - z[i, labels[i]] for i in range(5)])
        assert abs(got - ref) < 1e-6

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="label"):
            cross_entropy(t32(np.zeros((2, 3))), [0, 3])

    def test_nonnegative_on_random_batches(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = t32(rng.standard_normal((4, 3)) * 10)
            labels = rng.integers(0, 3, size=4)
            assert cross_entropy(logits, labels).item() >= 0.0


class TestMaskedL1:
    def test_identical_tensors_give_zero(self):
        x = t32(np.random.default_rng(0).standard_normal((2, 1, 4, 4, 4)))
        loss, count = masked_l1(x, x, [True, True])
        assert loss.item() == 0.0 and count == 2

    def test_constant_offset(self):
        rng = np.random.default_rng(1)
        target = rng.standard_normal((3, 1, 2, 2, 2)).astype(np.float32)
        pred = target + np.float32(0.1)
        loss, count = masked_l1(t32(pred), t32(target), [True] * 3)
        assert count == 3
        assert abs(loss.item() - 0.1) < 1e-6

    def test_mixed_batch_equals_paired_subset(self):
        rng = np.random.default_rng(2)
        pred = rng.standard_normal((4, 1, 4, 4, 4)).astype(np.float32)
        target = rng.standard_normal((4, 1, 4, 4, 4)).astype(np.float32)
        mask = [True, False, True, False]
        loss, count = masked_l1(t32(pred), t32(target), mask)
        subset_loss, subset_count = masked_l1(
            t32(pred[[0, 2]]), t32(target[[0, 2]]), [True, True])
        assert count == 2 and subset_count == 2
        assert abs(loss.item() - subset_loss.item()) < 1e-6

    def test_empty_mask_gives_zero_and_no_tensor(self):
        pred = t32(np.ones((2, 1, 2, 2, 2)))
        loss, count = masked_l1(pred, pred, [False, False])
        assert loss is None and count == 0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes differ"):
            masked_l1(t32(np.zeros((1, 1, 2, 2, 2))), t32(np.zeros((1, 1, 4, 4, 4))), [True])


class TestPoolTarget:
    def test_average_pooling_by_two(self):
        vol = np.arange(8, dtype=np.float32).reshape(1, 1, 2, 2, 2)
        pooled = _pool_target(vol, 2)
        assert pooled.shape == (1, 1, 1, 1, 1)
        assert pooled.reshape(()) == np.float32(3.5)

    def test_constant_is_preserved_at_any_factor(self):
        vol = np.full((1, 1, 8, 8, 8), 2.5, dtype=np.float32)
        for factor in (2, 4, 8):
            assert np.allclose(_pool_target(vol, factor), 2.5)


def forward_batch(cfg, seed=0, batch=2, paired=None):
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng([seed, 1])
    mri = Tensor(rng.standard_normal((batch, 1) + cfg.input_shape).astype(np.float32))
    out = model.forward(mri)
    labels = rng.integers(0, 3, size=batch)
    pet = Tensor(rng.standard_normal((batch, 1) + cfg.input_shape).astype(np.float32))
    mask = np.array([True] * batch if paired is None else paired)
    return out, labels, pet, mask


class TestCombinedLoss:
    def cfg(self, **kw):
        base = dict(levels=3, base_channels=2, input_shape=(8, 8, 8))
        base.update(kw)
        return UPetConfig(**base)

    def test_lambda_zero_reduces_total_to_ce(self):
        cfg = self.cfg(lambda_l1=0.0)
        out, labels, pet, mask = forward_batch(cfg)
        bd = combined_loss(out, labels, pet, mask, cfg)
        assert abs(bd.total - bd.ce) < 1e-7

    def test_no_paired_samples_total_is_ce_exactly(self):
        cfg = self.cfg()
        out, labels, pet, mask = forward_batch(cfg, paired=[False, False])
        bd = combined_loss(out, labels, pet, mask, cfg)
        assert bd.total == bd.ce
        assert bd.paired_count == 0
        assert bd.l1_main == 0.0 and all(v == 0.0 for v in bd.l1_aux)

    def test_no_pet_head_total_is_ce_exactly(self):
        cfg = self.cfg(use_pet_head=False)
        out, labels, pet, mask = forward_batch(cfg)
        bd = combined_loss(out, labels, pet, mask, cfg)
        assert bd.total == bd.ce
        assert bd.total_tensor.item() == bd.ce

    def test_recomposition_matches_hand_sum(self):
        cfg = UPetConfig(levels=4, base_channels=2, input_shape=(16, 16, 16),
                         lambda_l1=0.7)
        assert cfg.deep_supervision_weights == (0.5, 0.25, 0.125)
        out, labels, pet, mask = forward_batch(cfg, batch=3, paired=[True, False, True])
        bd = combined_loss(out, labels, pet, mask, cfg)
        hand = bd.ce + 0.7 * (bd.l1_main + 0.5 * bd.l1_aux[0]
                              + 0.25 * bd.l1_aux[1] + 0.125 * bd.l1_aux[2])
        assert abs(bd.total - hand) / abs(hand) < 1e-6
        assert bd.paired_count == 2
        assert all(v >= 0 for v in [bd.ce, bd.l1_main, *bd.l1_aux])

    def test_aux_terms_check_against_independent_recomputation(self):
        cfg = self.cfg()
        out, labels, pet, mask = forward_batch(cfg, batch=2)
        bd = combined_loss(out, labels, pet, mask, cfg)
        for i, aux_pred in enumerate(out.aux_pet_preds):
            factor = 2 ** (i + 1)
            pooled = _pool_target(pet.data, factor)
            ref = np.abs(aux_pred.data.astype(np.float64) - pooled).mean()
            assert abs(bd.l1_aux[i] - ref) < 1e-6

    def test_missing_pet_targets_with_nonzero_mask_rejected(self):
        cfg = self.cfg()
        out, labels, _, mask = forward_batch(cfg)
        with pytest.raises(ValueError, match="pet_targets"):
            combined_loss(out, labels, None, mask, cfg)

    def test_probability_aggregation_ce_matches_nll_of_mean_probs(self):
        cfg = self.cfg(aggregate_probabilities=True)
        out, labels, pet, mask = forward_batch(cfg, paired=[False, False])
        bd = combined_loss(out, labels, pet, mask, cfg)
        probs = out.class_logits.data.astype(np.float64)
        ref = -np.mean([np.log(probs[i, labels[i]]) for i in range(len(labels))])
        assert abs(bd.total - ref) < 1e-6
