"""Tests for the backbone, clinical-ROI pooling, the fusion head and the baselines."""

import itertools

import numpy as np
import pytest

from src.errors import ShapeError, ViewError
from src.model import (
    BackboneConfig,
    FibrosisModel,
    batch_scores,
    clinical_roi_pool,
    downsample_mask,
    extract_features,
    ghif_fuse,
    image_probabilities,
    median_late_fusion,
    predict_image,
    predict_study,
    score_study,
    study_probability,
)
from src.tensor import Tensor, backward, bce_loss
from tests.conftest import build_study
from tests.gradcheck import max_gradient_error


# ============================================================================
# Backbone
# ============================================================================

class TestBackboneConfig:
    def test_defaults(self):
        config = BackboneConfig()
        assert config.input_size == (64, 64)
        assert config.feature_stride == 4
        assert config.feature_shape == (16, 16)
        assert config.channels == 64

    def test_input_must_divide_by_stride(self):
        with pytest.raises(ShapeError):
            BackboneConfig(input_size=(10, 10), widths=[2, 3], strides=[2, 2])

    def test_stage_lists_must_match(self):
        with pytest.raises(ShapeError):
            BackboneConfig(widths=[2, 3], strides=[1])

    def test_unknown_norm(self):
        with pytest.raises(ValueError):
            BackboneConfig(norm_kind="layer")


class TestModelConstruction:
    def test_unknown_variant(self, tiny_backbone):
        with pytest.raises(ValueError):
            FibrosisModel(tiny_backbone(), "attention")

    def test_vsp_flag_must_match_variant(self, tiny_backbone):
        with pytest.raises(ValueError):
            FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif")
        with pytest.raises(ValueError):
            FibrosisModel(tiny_backbone(), "ghif_vsp")

    @pytest.mark.parametrize(
        "variant,width",
        [("imagewise", 4), ("imagewise_roi", 4), ("global_fusion", 12), ("ghif", 12)],
    )
    def test_head_width(self, tiny_backbone, variant, width):
        model = FibrosisModel(tiny_backbone(), variant)
        assert model.head_width == width
        assert model.head_weight.shape == (1, width)

    def test_seed_controls_initialization(self, tiny_backbone):
        a = FibrosisModel(tiny_backbone(), "ghif", seed=5).state_dict()
        b = FibrosisModel(tiny_backbone(), "ghif", seed=5).state_dict()
        c = FibrosisModel(tiny_backbone(), "ghif", seed=6).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["stage1.conv.weight"], c["stage1.conv.weight"])

    def test_theta_holds_only_convolutions(self, tiny_backbone):
        model = FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif_vsp")
        assert [n for n, _ in model.theta()] == [
            f"stage{i}.conv.{p}" for i in (1, 2, 3) for p in ("weight", "bias")
        ]


class TestExtractFeatures:
    def test_shape(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        feats = extract_features(rng.uniform(size=(8, 8)), 1, model)
        assert feats.shape == (4, 2, 2)

    def test_deterministic(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        image = rng.uniform(size=(8, 8))
        np.testing.assert_array_equal(extract_features(image, 2, model).data, extract_features(image, 2, model).data)

    def test_identical_banks_ignore_view(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif_vsp")
        image = rng.uniform(size=(8, 8))
        reference = extract_features(image, 1, model).data
        for view in range(2, 7):
            np.testing.assert_array_equal(extract_features(image, view, model).data, reference)

    def test_perturbed_bank_changes_only_its_view(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif_vsp")
        image = rng.uniform(size=(8, 8))
        before_1 = extract_features(image, 1, model).data
        before_2 = extract_features(image, 2, model).data
        bank = model.stages[0].norm.bank
        bank.banks[1].gamma.data = bank.banks[1].gamma.data * 1.7
        np.testing.assert_array_equal(extract_features(image, 1, model).data, before_1)
        assert not np.array_equal(extract_features(image, 2, model).data, before_2)

    def test_wrong_size(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        with pytest.raises(ShapeError):
            extract_features(rng.uniform(size=(16, 16)), 1, model)

    def test_invalid_view(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        with pytest.raises(ViewError):
            extract_features(rng.uniform(size=(8, 8)), 7, model)


# ============================================================================
# Clinical ROI pooling
# ============================================================================

class TestDownsampleMask:
    def test_quadrant(self):
        grid = np.zeros((8, 8))
        grid[:4, :4] = 1
        np.testing.assert_array_equal(downsample_mask(grid, (2, 2)), [[1.0, 0.0], [0.0, 0.0]])

    def test_half_covered_cell_is_kept(self):
        grid = np.zeros((4, 4))
        grid[:2, :1] = 1  # 2 of 4 pixels in the top-left cell
        grid[2:, 2:3] = 1
        grid[3, 3] = 1     # 3 of 4 in the bottom-right cell
        grid[0, 2] = 1     # 1 of 4 in the top-right cell
        np.testing.assert_array_equal(downsample_mask(grid, (2, 2)), [[1.0, 0.0], [0.0, 1.0]])

    def test_indivisible_shape(self):
        with pytest.raises(ShapeError):
            downsample_mask(np.ones((7, 8)), (2, 2))

    def test_study_roi(self, rng):
        study = build_study(rng, 1, 1)
        cells = downsample_mask(study.images[0].roi, (2, 2))
        np.testing.assert_array_equal(cells, [[1.0, 1.0], [0.0, 0.0]])


class TestClinicalRoiPool:
    def test_full_area_divisor(self):
        feats = Tensor(np.ones((3, 2, 2)))
        mask = np.array([[1.0, 0.0], [0.0, 0.0]])
        np.testing.assert_allclose(clinical_roi_pool(feats, mask).data, [0.25, 0.25, 0.25])

    def test_full_mask_equals_global_average(self, rng):
        feats = rng.standard_normal((4, 3, 3))
        pooled = clinical_roi_pool(Tensor(feats), np.ones((3, 3))).data
        np.testing.assert_allclose(pooled, feats.mean(axis=(1, 2)), rtol=0, atol=1e-15)

    def test_batched(self, rng):
        feats = rng.standard_normal((2, 3, 2, 2))
        masks = np.stack([np.ones((2, 2)), np.eye(2)])
        pooled = clinical_roi_pool(Tensor(feats), masks).data
        assert pooled.shape == (2, 3)
        np.testing.assert_allclose(pooled[1], (feats[1, :, 0, 0] + feats[1, :, 1, 1]) / 4.0, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            clinical_roi_pool(Tensor(np.ones((3, 2, 2))), np.ones((3, 3)))
        with pytest.raises(ShapeError):
            clinical_roi_pool(Tensor(np.ones((2, 3, 2, 2))), np.ones((3, 2, 2)))


# ============================================================================
# Fusion head
# ============================================================================

class TestGhifFuse:
    def test_worked_example(self):
        fused = ghif_fuse([Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))]).data
        assert fused.tolist() == [2.0, 3.0, 1.0, 1.0, 3.0, 4.0]

    def test_single_image(self, rng):
        vector = rng.standard_normal(5)
        fused = ghif_fuse([Tensor(vector)]).data
        np.testing.assert_array_equal(fused[:5], vector)
        np.testing.assert_array_equal(fused[5:10], np.zeros(5))
        np.testing.assert_array_equal(fused[10:], vector)

    @pytest.mark.parametrize("k", range(1, 15))
    def test_width_is_three_channels(self, rng, k):
        assert ghif_fuse([Tensor(rng.standard_normal(6)) for _ in range(k)]).shape == (18,)

    def test_permutation_invariant(self, rng):
        vectors = [rng.standard_normal(4) for _ in range(4)]
        reference = ghif_fuse([Tensor(v) for v in vectors]).data
        for order in itertools.permutations(range(4)):
            fused = ghif_fuse([Tensor(vectors[i]) for i in order]).data
            np.testing.assert_allclose(fused, reference, rtol=0, atol=1e-12)

    def test_empty_set(self):
        with pytest.raises(ShapeError):
            ghif_fuse([])

    def test_study_prediction_ignores_image_order(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif_vsp", seed=2)
        study = build_study(rng, 1, 4, views=[1, 2, 3, 4])
        forward = predict_study(study, None, model)
        backward_order = predict_study(study.with_images(study.images[::-1]), None, model)
        assert abs(forward - backward_order) < 1e-12


class TestEndToEndGradient:
    @staticmethod
    def _checked(model: FibrosisModel) -> list[Tensor]:
        """Every parameter except conv biases, which the following normalization cancels."""
        return [t for name, t in model.named_parameters() if not name.endswith("conv.bias")]

    @pytest.mark.parametrize("seed", range(3))
    def test_study_loss(self, tiny_backbone, seed):
        rng = np.random.default_rng(seed)
        model = FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif_vsp", seed=seed).train()
        study = build_study(rng, seed % 2, 3, views=[1, 4, 4])
        error = max_gradient_error(lambda: bce_loss(study_probability(model, study), study.label), self._checked(model))
        assert error < 1e-4

    def test_imagewise_loss(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "imagewise_roi").train()
        study = build_study(rng, 1, 1)
        error = max_gradient_error(
            lambda: bce_loss(model.forward_groups([study.images]), study.label), self._checked(model)
        )
        assert error < 1e-4

    def test_conv_bias_gradient_vanishes_under_normalization(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif", seed=1).train()
        study = build_study(rng, 1, 3)
        backward(bce_loss(study_probability(model, study), study.label))
        for stage in model.stages:
            assert np.abs(stage.conv.bias.grad).max() < 1e-12
            assert np.abs(stage.conv.weight.grad).max() > 1e-8


# ============================================================================
# Batching and state
# ============================================================================

class TestBatchComposition:
    def test_instance_norm_ignores_other_studies(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif", seed=1).train()
        a = build_study(rng, 1, 2, views=[1, 2])
        b = build_study(rng, 0, 3, views=[3, 5, 6])
        alone = model.forward_groups([a.images]).data
        together = model.forward_groups([a.images, b.images]).data
        np.testing.assert_allclose(together[0], alone[0], rtol=0, atol=1e-12)

    def test_batch_norm_couples_studies(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone("batch"), "ghif", seed=1).train()
        a = build_study(rng, 1, 2, views=[1, 2])
        b = build_study(rng, 0, 3, views=[3, 5, 6])
        alone = model.forward_groups([a.images]).data
        together = model.forward_groups([a.images, b.images]).data
        assert abs(together[0] - alone[0]) > 1e-9

    def test_imagewise_returns_one_probability_per_image(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "imagewise")
        a, b = build_study(rng, 1, 2), build_study(rng, 0, 3)
        assert model.forward_groups([a.images, b.images]).shape == (5,)

    def test_empty_batch(self, tiny_backbone):
        with pytest.raises(ShapeError):
            FibrosisModel(tiny_backbone(), "ghif").forward_groups([[]])


class TestStateDict:
    def test_round_trip(self, rng, tiny_backbone):
        source = FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif_vsp", seed=0)
        source.stages[1].norm.bank.banks[4].beta.data = np.array([0.1, -0.2, 0.3])
        target = FibrosisModel(tiny_backbone(vsp_enabled=True), "ghif_vsp", seed=9)
        target.load_state_dict(source.state_dict())
        study = build_study(rng, 1, 3, views=[5, 2, 5])
        assert predict_study(study, None, target) == predict_study(study, None, source)

    def test_batch_norm_buffers_travel(self, tiny_backbone):
        source = FibrosisModel(tiny_backbone("batch"), "ghif")
        source.stages[0].norm.state.running_mean = np.array([0.5, -0.5])
        state = source.state_dict()
        assert "stage1.norm.running_mean" in state
        target = FibrosisModel(tiny_backbone("batch"), "ghif", seed=4)
        target.load_state_dict(state)
        assert target.stages[0].norm.state.running_mean.tolist() == [0.5, -0.5]

    def test_state_is_a_copy(self, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        state = model.state_dict()
        state["head.bias"][0] = 9.0
        assert model.head_bias.data[0] == 0.0

    def test_missing_tensor(self, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        state = model.state_dict()
        del state["head.weight"]
        with pytest.raises(KeyError):
            model.load_state_dict(state)

    def test_wrong_shape(self, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        state = model.state_dict()
        state["head.weight"] = np.zeros((1, 4))
        with pytest.raises(ShapeError):
            model.load_state_dict(state)

    def test_head_input_statistics_travel(self, tiny_backbone):
        source = FibrosisModel(tiny_backbone(), "ghif")
        source.head_input_mean = np.linspace(0.0, 1.0, 12)
        source.head_input_scale = np.full(12, 3.0)
        target = FibrosisModel(tiny_backbone(), "ghif", seed=4)
        target.load_state_dict(source.state_dict())
        np.testing.assert_array_equal(target.head_input_mean, source.head_input_mean)
        np.testing.assert_array_equal(target.head_input_scale, source.head_input_scale)

    def test_missing_head_input_buffer(self, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        state = model.state_dict()
        del state["head.input_scale"]
        with pytest.raises(KeyError):
            model.load_state_dict(state)


class TestHeadInput:
    def test_identity_until_fitted(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif", seed=2)
        assert not model.head_input_mean.any()
        assert (model.head_input_scale == 1.0).all()
        vector = Tensor(rng.normal(size=(3, 12)))
        direct = 1.0 / (1.0 + np.exp(-(vector.data @ model.head_weight.data.T + model.head_bias.data)))
        np.testing.assert_allclose(model.head(vector).data, direct, rtol=0, atol=1e-14)

    def test_fit_standardizes_and_zeroes_head(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        vectors = rng.normal(loc=5.0, scale=rng.uniform(0.5, 2.0, size=12), size=(400, 12))
        model.fit_head_input(vectors, gain=2.0)
        standardized = (vectors - model.head_input_mean) * model.head_input_scale
        np.testing.assert_allclose(standardized.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(standardized.std(axis=0), 2.0, rtol=1e-12)
        assert not model.head_weight.data.any() and not model.head_bias.data.any()
        assert model.head(Tensor(vectors[:4])).data.reshape(-1).tolist() == [0.5] * 4

    def test_quiet_features_are_floored(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        vectors = rng.normal(size=(50, 12))
        vectors[:, 0] *= 1e-6
        vectors[:, 1] = 4.0
        model.fit_head_input(vectors, gain=1.0, floor=0.1)
        median = np.median(vectors.std(axis=0))
        assert model.head_input_scale[0] == pytest.approx(1.0 / (0.1 * median))
        assert model.head_input_scale[1] == pytest.approx(1.0 / (0.1 * median))
        assert model.head_input_mean[1] == 4.0

    def test_shape_checked(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        with pytest.raises(ShapeError):
            model.fit_head_input(rng.normal(size=(10, 4)))
        with pytest.raises(ShapeError):
            model.fit_head_input(rng.normal(size=(1, 12)))

    def test_head_inputs_width(self, rng, tiny_backbone):
        study = build_study(rng, 1, 3)
        fused = FibrosisModel(tiny_backbone(), "ghif").head_inputs([study.images, study.images[:1]])
        per_image = FibrosisModel(tiny_backbone(), "imagewise").head_inputs([study.images])
        assert fused.shape == (2, 12)
        assert per_image.shape == (3, 4)


# ============================================================================
# Prediction paths
# ============================================================================

class TestPrediction:
    def test_probability_in_unit_interval(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        p = predict_study(build_study(rng, 1, 5), None, model)
        assert 0.0 < p < 1.0

    def test_subset(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "ghif")
        study = build_study(rng, 1, 4)
        subset = predict_study(study, [0, 2], model)
        assert subset == predict_study(study.with_images([study.images[0], study.images[2]]), None, model)

    def test_empty_subset(self, rng, tiny_backbone):
        with pytest.raises(ShapeError):
            predict_study(build_study(rng, 1, 2), [], FibrosisModel(tiny_backbone(), "ghif"))

    def test_fusion_model_rejects_single_image_path(self, rng, tiny_backbone):
        with pytest.raises(ValueError):
            predict_image(rng.uniform(size=(8, 8)), 1, None, FibrosisModel(tiny_backbone(), "ghif"))

    def test_imagewise_study_path_rejected(self, rng, tiny_backbone):
        with pytest.raises(ValueError):
            predict_study(build_study(rng, 1, 2), None, FibrosisModel(tiny_backbone(), "imagewise"))

    def test_roi_baseline_needs_mask(self, rng, tiny_backbone):
        with pytest.raises(ShapeError):
            predict_image(rng.uniform(size=(8, 8)), 1, None, FibrosisModel(tiny_backbone(), "imagewise_roi"))

    def test_predict_image_matches_batched_path(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "imagewise_roi")
        study = build_study(rng, 0, 3)
        batched = image_probabilities(model, study)
        single = [predict_image(item.image, item.view, item.roi, model) for item in study.images]
        np.testing.assert_allclose(single, batched, rtol=0, atol=1e-12)

    def test_imagewise_score_is_median(self, rng, tiny_backbone):
        model = FibrosisModel(tiny_backbone(), "imagewise")
        study = build_study(rng, 1, 4)
        assert score_study(model, study) == median_late_fusion(image_probabilities(model, study))

    @pytest.mark.parametrize("variant", ["imagewise", "ghif"])
    def test_batch_scores_match_one_study_at_a_time(self, rng, tiny_backbone, variant):
        model = FibrosisModel(tiny_backbone(), variant, seed=3)
        studies = [build_study(rng, i % 2, k) for i, k in enumerate([1, 4, 2, 3, 5])]
        subsets = [None, [0, 3], None, [2], None]
        batched = batch_scores(model, studies, subsets, max_images=4)
        single = [score_study(model, s, sub) for s, sub in zip(studies, subsets)]
        np.testing.assert_allclose(batched, single, rtol=0, atol=1e-12)

    def test_batch_scores_subset_count_checked(self, rng, tiny_backbone):
        with pytest.raises(ShapeError):
            batch_scores(FibrosisModel(tiny_backbone(), "ghif"), [build_study(rng, 1, 2)], [None, None])


class TestMedianLateFusion:
    def test_odd(self):
        assert median_late_fusion([0.2, 0.9, 0.4]) == 0.4

    def test_even_takes_midpoint(self):
        assert median_late_fusion([0.1, 0.9, 0.3, 0.5]) == pytest.approx(0.4)

    def test_single(self):
        assert median_late_fusion([0.7]) == 0.7

    def test_empty(self):
        with pytest.raises(ValueError):
            median_late_fusion([])

    @pytest.mark.parametrize("probs", [[0.2, 1.5], [-0.1], [0.3, float("nan")]])
    def test_out_of_range(self, probs):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            median_late_fusion(probs)

    def test_bounds_are_accepted(self):
        assert median_late_fusion([0.0, 1.0]) == 0.5
