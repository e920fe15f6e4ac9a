"""Tests for fold splits, the combination sampler, augmentation and the training loop."""

import math
from collections import Counter

import numpy as np
import pytest

from src.config import HEAD_INPUT_GAIN
from src.errors import NonFiniteError, SplitError, TrainingError
from src.model import FibrosisModel
from src.phantom import generate_corpus
from src.tensor import backward, sgd_step
from src.training import (
    AugmentationConfig,
    EpochRecord,
    TrainConfig,
    apply_augmentation,
    augment,
    augment_item,
    batch_loss,
    fit_head_standardization,
    fold_split_for,
    read_history,
    sample_combination,
    split_folds,
    studies_for,
    train,
    validation_auc,
    write_history,
)
from tests.conftest import build_study


def _patients(n: int) -> list[str]:
    return [f"P{i:03d}" for i in range(n)]


# ============================================================================
# Fold splits
# ============================================================================

class TestSplitFolds:
    def test_ten_patients_split_seven_two_one(self):
        split = split_folds(_patients(10), seed=0)
        assert len(split) == 5
        for fold in split.folds:
            assert (len(fold.train), len(fold.test), len(fold.val)) == (7, 2, 1)

    def test_partitions_are_disjoint_and_complete(self):
        patients = _patients(23)
        for fold in split_folds(patients, seed=4).folds:
            train, test, val = set(fold.train), set(fold.test), set(fold.val)
            assert not (train & test) and not (train & val) and not (test & val)
            assert train | test | val == set(patients)

    def test_test_sets_cover_every_patient_once(self):
        patients = _patients(17)
        split = split_folds(patients, seed=1)
        tested = [pid for fold in split.folds for pid in fold.test]
        assert sorted(tested) == sorted(patients)

    def test_deterministic(self):
        a = split_folds(_patients(12), seed=7)
        b = split_folds(list(reversed(_patients(12))), seed=7)
        assert a.folds == b.folds

    def test_seed_changes_split(self):
        assert split_folds(_patients(30), seed=0).folds != split_folds(_patients(30), seed=1).folds

    def test_duplicate_ids_count_once(self):
        with pytest.raises(SplitError):
            split_folds(_patients(9) * 3)

    def test_too_few_patients(self):
        with pytest.raises(SplitError, match="at least 10"):
            split_folds(_patients(9))

    def test_too_few_folds(self):
        with pytest.raises(SplitError):
            split_folds(_patients(10), n_folds=1)

    def test_split_from_studies_keeps_patients_together(self, phantom_corpus):
        split = fold_split_for(phantom_corpus, seed=2)
        fold = split[0]
        test_studies = studies_for(phantom_corpus, fold.test)
        train_studies = studies_for(phantom_corpus, fold.train)
        assert {s.patient_id for s in test_studies}.isdisjoint({s.patient_id for s in train_studies})
        assert len(test_studies) == 2 * len(fold.test)


# ============================================================================
# Random combinations
# ============================================================================

class TestSampleCombination:
    def test_frequencies(self):
        rng = np.random.default_rng(0)
        draws = 30000
        counts = Counter(tuple(sample_combination(3, rng)) for _ in range(draws))
        assert set(counts) == {(0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)}
        for subset, count in counts.items():
            expected = 1 / 3 if len(subset) == 3 else 1 / 9
            assert abs(count / draws - expected) < 0.015

    def test_single_image_study(self, rng):
        assert all(sample_combination(1, rng) == [0] for _ in range(20))

    def test_sorted_and_distinct(self, rng, make_study):
        study = make_study(k=14, views=[1] * 14)
        for _ in range(50):
            subset = sample_combination(study, rng)
            assert subset == sorted(set(subset))
            assert 1 <= len(subset) <= 14

    def test_invalid_k(self, rng):
        with pytest.raises(ValueError):
            sample_combination(0, rng)


# ============================================================================
# Augmentation
# ============================================================================

class TestAugmentation:
    def test_identity_ranges_leave_image_unchanged(self, rng):
        image = rng.uniform(size=(8, 8))
        mask = image > 0.5
        out, out_mask = augment(image, mask, AugmentationConfig.identity(), rng)
        np.testing.assert_array_equal(out, image)
        np.testing.assert_array_equal(out_mask, mask)

    def test_quarter_turn_is_rot90(self, rng):
        image = rng.uniform(size=(8, 8))
        mask = np.zeros((8, 8), dtype=bool)
        mask[1:4, 2:7] = True
        out, out_mask = apply_augmentation(image, mask, 0.0, 1.0, 90.0, 1.0)
        np.testing.assert_allclose(out, np.rot90(image), rtol=0, atol=1e-12)
        np.testing.assert_array_equal(out_mask, np.rot90(mask))

    def test_brightness_is_clamped(self):
        out, _ = apply_augmentation(np.array([[0.2, 0.95]]), np.ones((1, 2), bool), 0.1, 1.0, 0.0, 1.0)
        np.testing.assert_allclose(out, [[0.3, 1.0]])

    def test_contrast_about_mean(self):
        out, _ = apply_augmentation(np.array([[0.4, 0.6]]), np.ones((1, 2), bool), 0.0, 2.0, 0.0, 1.0)
        np.testing.assert_allclose(out, [[0.3, 0.7]])

    def test_always_draws_four_numbers(self, rng):
        a, b = np.random.default_rng(5), np.random.default_rng(5)
        augment(rng.uniform(size=(4, 4)), np.ones((4, 4), bool), AugmentationConfig.identity(), a)
        b.uniform(size=4)
        assert a.uniform() == b.uniform()

    def test_item_keeps_view(self, rng, make_study):
        item = make_study(k=1, views=[4], size=(16, 16)).images[0]
        out = augment_item(item, AugmentationConfig(), rng)
        assert out.view == 4
        assert out.image.shape == (16, 16)

    def test_liver_out_of_frame_keeps_original(self, rng, make_study, monkeypatch):
        item = make_study(k=1).images[0]
        monkeypatch.setattr("src.training.augment", lambda image, mask, cfg, r: (image, np.zeros_like(mask)))
        assert augment_item(item, AugmentationConfig(), rng) is item

    @pytest.mark.parametrize(
        "kwargs",
        [{"brightness": (0.1, 0.2)}, {"contrast": (1.1, 1.3)}, {"rotation_deg": (5.0, 10.0)}, {"scale": (-1.0, 1.0)}],
    )
    def test_ranges_must_contain_identity(self, kwargs):
        with pytest.raises(ValueError):
            AugmentationConfig(**kwargs)


# ============================================================================
# Configuration
# ============================================================================

class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"lr": 0.0}, {"epochs": 0}, {"batch_size": 0}, {"model_variant": "mil"}, {"norm_kind": "group"}],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    def test_backbone_follows_variant(self, small_backbone):
        base = small_backbone()
        vsp = TrainConfig(model_variant="ghif_vsp", norm_kind="instance").backbone(base)
        plain = TrainConfig(model_variant="ghif", norm_kind="batch").backbone(base)
        assert vsp.vsp_enabled and not plain.vsp_enabled
        assert plain.norm_kind == "batch"
        assert plain.input_size == (16, 16)


# ============================================================================
# Loss and training loop
# ============================================================================

class TestBatchLoss:
    def test_imagewise_repeats_study_label(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "imagewise").train()
        study = build_study(rng, 1, 3)
        loss = batch_loss(model, [(study, [0, 2])]).item()
        probs = model.forward_groups([[study.images[0], study.images[2]]]).data
        assert loss == pytest.approx(-np.log(probs).sum(), rel=1e-12)

    def test_fusion_sums_over_studies(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif").train()
        pos, neg = build_study(rng, 1, 2), build_study(rng, 0, 3)
        loss = batch_loss(model, [(pos, [0, 1]), (neg, [1])]).item()
        probs = model.forward_groups([pos.images, [neg.images[1]]]).data
        assert loss == pytest.approx(-np.log(probs[0]) - np.log(1 - probs[1]), rel=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_one_step_lowers_loss(self, tiny_backbone, seed):
        rng = np.random.default_rng(seed)
        model = FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif_vsp", seed=seed).train()
        batch = [(build_study(rng, y, 3, study_id=f"S{y}"), [0, 1, 2]) for y in (0, 1, 1, 0)]
        before = batch_loss(model, batch)
        backward(before)
        sgd_step(model.parameters(), 1e-4)
        assert batch_loss(model, batch).item() < before.item()


class TestTrain:
    @staticmethod
    def _partitions(corpus):
        """Two positive and two negative patients validate; everyone else trains."""
        by_label: dict[int, list[str]] = {0: [], 1: []}
        for s in corpus:
            if s.patient_id not in by_label[s.label]:
                by_label[s.label].append(s.patient_id)
        held_out = by_label[0][:2] + by_label[1][:2]
        rest = [s.patient_id for s in corpus if s.patient_id not in held_out]
        return studies_for(corpus, rest), studies_for(corpus, held_out)

    def test_history_has_one_row_per_epoch(self, phantom_corpus, small_backbone):
        train_set, val_set = self._partitions(phantom_corpus)
        config = TrainConfig(epochs=3, batch_size=4, model_variant="ghif", seed=1)
        result = train(train_set, val_set, config, small_backbone())
        assert [r.epoch for r in result.history] == [1, 2, 3]
        assert all(math.isfinite(r.train_loss) for r in result.history)
        assert not result.model.training

    def test_best_epoch_is_first_maximum(self, phantom_corpus, small_backbone):
        train_set, val_set = self._partitions(phantom_corpus)
        config = TrainConfig(epochs=3, batch_size=4, model_variant="ghif_vsp", seed=2)
        result = train(train_set, val_set, config, small_backbone())
        aucs = [r.val_auc for r in result.history]
        assert result.best_epoch == 1 + int(np.argmax(aucs))
        assert result.best_val_auc == max(aucs)
        assert validation_auc(result.model, val_set) == pytest.approx(result.best_val_auc, abs=1e-12)

    def test_deterministic(self, phantom_corpus, small_backbone):
        train_set, val_set = self._partitions(phantom_corpus)
        config = TrainConfig(epochs=2, batch_size=5, model_variant="imagewise_roi", norm_kind="batch", seed=4)
        a = train(train_set, val_set, config, small_backbone()).model.state_dict()
        b = train(train_set, val_set, config, small_backbone()).model.state_dict()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_single_class_validation_keeps_last_epoch(self, phantom_corpus, small_backbone):
        train_set, _ = self._partitions(phantom_corpus)
        positives = [s for s in phantom_corpus if s.label == 1][:3]
        config = TrainConfig(epochs=2, batch_size=8, model_variant="global_fusion", augment=False)
        result = train(train_set, positives, config, small_backbone())
        assert all(math.isnan(r.val_auc) for r in result.history)
        assert result.best_epoch == 2

    def test_empty_training_set(self, small_backbone):
        with pytest.raises(TrainingError, match="empty"):
            train([], [], TrainConfig(epochs=1), small_backbone())

    def test_non_finite_step_names_batch(self, phantom_corpus, small_backbone, monkeypatch):
        def explode(params, lr):
            raise NonFiniteError("non-finite gradient")

        monkeypatch.setattr("src.training.sgd_step", explode)
        train_set, val_set = self._partitions(phantom_corpus)
        with pytest.raises(TrainingError) as info:
            train(train_set, val_set, TrainConfig(epochs=1, batch_size=2, model_variant="ghif"), small_backbone())
        assert info.value.study_id is not None
        assert all(sid.startswith("S") for sid in info.value.study_id.split(","))

    def test_validation_auc_single_class(self, phantom_corpus, small_backbone):
        model = FibrosisModel(small_backbone(), "ghif")
        negatives = [s for s in phantom_corpus if s.label == 0]
        assert math.isnan(validation_auc(model, negatives))


class TestHeadStandardization:
    def test_fit_leaves_backbone_untouched(self, phantom_corpus, small_backbone):
        config = TrainConfig(model_variant="ghif", norm_kind="batch", seed=5)
        model = FibrosisModel(config.backbone(small_backbone()), "ghif", seed=5)
        before = model.state_dict()
        fit_head_standardization(model, phantom_corpus, config, np.random.default_rng(0))
        after = model.state_dict()
        for name, array in before.items():
            if name.startswith("head."):
                continue
            np.testing.assert_array_equal(after[name], array, err_msg=name)
        assert not model.head_weight.data.any()
        assert (model.head_input_scale > 0).all()

    def test_fitted_inputs_are_centred(self, phantom_corpus, small_backbone):
        config = TrainConfig(model_variant="global_fusion", augment=False)
        model = FibrosisModel(config.backbone(small_backbone()), "global_fusion")
        fit_head_standardization(model, phantom_corpus, config, np.random.default_rng(0))
        model.train()
        vectors = model.head_inputs([s.images for s in phantom_corpus]).data
        standardized = (vectors - model.head_input_mean) * model.head_input_scale
        np.testing.assert_allclose(standardized.mean(axis=0), 0.0, atol=1e-9)
        assert standardized.std(axis=0).max() <= HEAD_INPUT_GAIN + 1e-9

    def test_single_sample_keeps_identity(self, small_backbone):
        study = generate_corpus(1, seed=0, max_images=1, size=(16, 16))
        config = TrainConfig(model_variant="ghif")
        model = FibrosisModel(config.backbone(small_backbone()), "ghif")
        fit_head_standardization(model, study, config, np.random.default_rng(0))
        assert (model.head_input_scale == 1.0).all()


class TestOverfit:
    def test_five_studies_are_memorized(self):
        studies = generate_corpus(5, seed=11, min_images=1, max_images=3)
        config = TrainConfig(epochs=50, model_variant="ghif_vsp", norm_kind="instance", augment=False, seed=0)
        result = train(studies, [], config)
        assert len(result.history) == 50
        assert result.history[-1].train_loss < 0.1


class TestHistory:
    def test_round_trip(self, tmp_path):
        history = [EpochRecord(1, 0.69, float("nan")), EpochRecord(2, 0.5, 0.75)]
        path = tmp_path / "history.csv"
        write_history(history, path)
        assert path.read_text().splitlines()[0] == "epoch,train_loss,val_auc"
        loaded = read_history(path)
        assert [r.epoch for r in loaded] == [1, 2]
        assert math.isnan(loaded[0].val_auc)
        assert loaded[1].val_auc == 0.75
