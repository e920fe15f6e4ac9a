"""
Fibrosis classifier: backbone, clinical-ROI masked pooling, global
hetero-image fusion head and the baseline prediction paths.

Variants:
  imagewise      plain global average pooling, one prediction per image
  imagewise_roi  ROI-masked pooling, one prediction per image
  global_fusion  ROI pooling + fusion head, trained on all images of a study
  ghif           ROI pooling + fusion head, trained on random image combinations
  ghif_vsp       ghif with view-specific normalization banks
Image-wise variants reach a study-level score through the median of the
per-image probabilities.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .config import (
    FUSION_VARIANTS,
    HEAD_INPUT_GAIN,
    HEAD_SCALE_FLOOR,
    INPUT_SIZE,
    KERNEL_SIZE,
    MASK_KEEP_FRACTION,
    MASKED_VARIANTS,
    MODEL_VARIANTS,
    NORM_KINDS,
    STAGE_STRIDES,
    STAGE_WIDTHS,
)
from .dataset import ClinicalRoi, Study, StudyImage, UsImage
from .errors import NonFiniteError, ShapeError
from .layers import BatchNorm2d, Conv2d, InstanceNorm2d, check_view, make_norm
from .tensor import (
    Tensor,
    add,
    amax,
    concat,
    elementwise_mul,
    linear,
    mean,
    no_grad,
    relu,
    reshape,
    sigmoid,
    stack,
    take_rows,
    var,
)

logger = logging.getLogger(__name__)

# Aᵏ for one image: [C, H′, W′]; batched passes carry a leading N axis.
FeatureMap = Tensor
# One element of the pooled set: [C]
PooledVector = Tensor


@dataclass
class BackboneConfig:
    input_size: tuple[int, int] = INPUT_SIZE
    widths: list[int] = field(default_factory=lambda: list(STAGE_WIDTHS))
    strides: list[int] = field(default_factory=lambda: list(STAGE_STRIDES))
    norm_kind: str = "instance"
    vsp_enabled: bool = False

    def __post_init__(self) -> None:
        self.input_size = (int(self.input_size[0]), int(self.input_size[1]))
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ShapeError("backbone", "stages", len(self.widths), len(self.strides))
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        stride = self.feature_stride
        h, w = self.input_size
        if h % stride or w % stride:
            raise ShapeError("backbone", "input_size", f"multiple of feature stride {stride}", self.input_size)
        if min(self.feature_shape) < 2:
            raise ShapeError("backbone", "feature_shape", "≥ 2", self.feature_shape)

    @property
    def feature_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feature_shape(self) -> tuple[int, int]:
        s = self.feature_stride
        return self.input_size[0] // s, self.input_size[1] // s

    @property
    def channels(self) -> int:
        return self.widths[-1]


class Stage:
    def __init__(self, c_in: int, c_out: int, stride: int, config: BackboneConfig, rng: np.random.Generator) -> None:
        self.conv = Conv2d(c_in, c_out, KERNEL_SIZE, stride, rng)
        self.norm: InstanceNorm2d | BatchNorm2d = make_norm(config.norm_kind, c_out, config.vsp_enabled)

    def __call__(self, x: Tensor, views: Sequence[int], training: bool) -> Tensor:
        return relu(self.norm(self.conv(x), views, training))


class FibrosisModel:
    """Shared backbone θ, normalization banks Ω, and head weights w."""

    def __init__(self, config: BackboneConfig, variant: str, seed: int = 0) -> None:
        if variant not in MODEL_VARIANTS:
            raise ValueError(f"variant must be one of {MODEL_VARIANTS}, got {variant!r}")
        if config.vsp_enabled != (variant == "ghif_vsp"):
            raise ValueError(f"vsp_enabled={config.vsp_enabled} does not match variant {variant!r}")
        self.config = config
        self.variant = variant
        self.training = False
        rng = np.random.default_rng(seed)
        self.stages: list[Stage] = []
        c_in = 1
        for width, stride in zip(config.widths, config.strides):
            self.stages.append(Stage(c_in, width, stride, config, rng))
            c_in = width
        head_in = self.head_width
        self.head_weight = Tensor(rng.normal(0.0, np.sqrt(1.0 / head_in), size=(1, head_in)),
                                  requires_grad=True, name="head.weight")
        self.head_bias = Tensor(np.zeros(1), requires_grad=True, name="head.bias")
        # Frozen (not trained) centring and scaling of the head input; identity until fitted.
        self.head_input_mean = np.zeros(head_in)
        self.head_input_scale = np.ones(head_in)

    # ─── Properties ─────────────────────────────────────────────────────────

    @property
    def fuses(self) -> bool:
        return self.variant in FUSION_VARIANTS

    @property
    def uses_mask(self) -> bool:
        return self.variant in MASKED_VARIANTS

    @property
    def head_width(self) -> int:
        return 3 * self.config.channels if self.fuses else self.config.channels

    def train(self) -> FibrosisModel:
        self.training = True
        return self

    def eval(self) -> FibrosisModel:
        self.training = False
        return self

    # ─── Parameters ─────────────────────────────────────────────────────────

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Checkpoint order: stage by stage (conv, then norm), then the head."""
        named: list[tuple[str, Tensor]] = []
        for i, stage in enumerate(self.stages, start=1):
            named += [(f"stage{i}.conv.{n}", t) for n, t in stage.conv.named_parameters()]
            named += [(f"stage{i}.norm.{n}", t) for n, t in stage.norm.named_parameters()]
        named += [("head.weight", self.head_weight), ("head.bias", self.head_bias)]
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def theta(self) -> list[tuple[str, Tensor]]:
        """Backbone weights shared across views (everything but normalization affines and head)."""
        return [(n, t) for n, t in self.named_parameters() if ".conv." in n]

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, stage in enumerate(self.stages, start=1):
            out.update({f"stage{i}.norm.{n}": b for n, b in stage.norm.buffers().items()})
        out["head.input_mean"] = self.head_input_mean.copy()
        out["head.input_scale"] = self.head_input_scale.copy()
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, tensor in self.named_parameters():
            if name not in state:
                raise KeyError(f"state is missing tensor {name}")
            if state[name].shape != tensor.shape:
                raise ShapeError("load_state_dict", name, tensor.shape, state[name].shape)
            tensor.data = np.array(state[name], dtype=np.float64)
            tensor.grad = None
        for i, stage in enumerate(self.stages, start=1):
            prefix = f"stage{i}.norm."
            buffers = {n[len(prefix):]: b for n, b in state.items() if n.startswith(prefix) and "running_" in n}
            if buffers:
                stage.norm.load_buffers(buffers)
        for name in ("head.input_mean", "head.input_scale"):
            if name not in state:
                raise KeyError(f"state is missing buffer {name}")
            if state[name].shape != (self.head_width,):
                raise ShapeError("load_state_dict", name, (self.head_width,), state[name].shape)
        self.head_input_mean = np.array(state["head.input_mean"], dtype=np.float64)
        self.head_input_scale = np.array(state["head.input_scale"], dtype=np.float64)

    def fit_head_input(self, vectors: np.ndarray, gain: float = HEAD_INPUT_GAIN,
                       floor: float = HEAD_SCALE_FLOOR) -> None:
        """
        Freeze the head-input statistics from sample head inputs [M, D] and
        zero the head. Each feature is centred on its sample mean and scaled by
        gain / max(std, floor · median std); features with no spread keep scale gain.
        """
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != self.head_width:
            raise ShapeError("fit_head_input", "vectors", f"[M, {self.head_width}]", vectors.shape)
        if vectors.shape[0] < 2:
            raise ShapeError("fit_head_input", "M", "≥ 2", vectors.shape[0])
        if not np.isfinite(vectors).all():
            raise NonFiniteError("head input statistics are not finite")
        std = vectors.std(axis=0)
        spread = np.maximum(std, floor * float(np.median(std)))
        spread[spread <= 1e-12] = 1.0
        self.head_input_mean = vectors.mean(axis=0)
        self.head_input_scale = gain / spread
        self.head_weight.data = np.zeros_like(self.head_weight.data)
        self.head_bias.data = np.zeros_like(self.head_bias.data)
        logger.debug("Head input fitted on %d samples (scale %.3g..%.3g)",
                     vectors.shape[0], self.head_input_scale.min(), self.head_input_scale.max())

    # ─── Forward ────────────────────────────────────────────────────────────

    def features(self, pixels: np.ndarray, views: Sequence[int]) -> Tensor:
        """Backbone pass over a batch of images [N, H, W] → [N, C, H′, W′]."""
        if pixels.ndim != 3:
            raise ShapeError("features", "input.ndim", 3, pixels.ndim)
        if pixels.shape[1:] != self.config.input_size:
            raise ShapeError("features", "H×W", self.config.input_size, pixels.shape[1:])
        views = [check_view(v) for v in views]
        x = Tensor(pixels[:, None, :, :])
        for stage in self.stages:
            x = stage(x, views, self.training)
        return x

    def pool(self, items: Sequence[StudyImage]) -> Tensor:
        """Pooled vectors [N, C] of a batch of study images (ROI-masked for masked variants)."""
        pixels = np.stack([item.image.pixels for item in items])
        feats = self.features(pixels, [item.view for item in items])
        if not self.uses_mask:
            return mean(feats, axis=(2, 3))
        masks = np.stack([downsample_mask(item.roi, self.config.feature_shape) for item in items])
        return clinical_roi_pool(feats, masks)

    def head(self, vector: Tensor) -> Tensor:
        """f(·; w): frozen input standardization, fully-connected layer and sigmoid; [D] → [1] or [N, D] → [N, 1]."""
        centred = add(vector, Tensor(-self.head_input_mean))
        scaled = elementwise_mul(centred, Tensor(self.head_input_scale))
        return sigmoid(linear(scaled, self.head_weight, self.head_bias))

    def head_inputs(self, groups: Sequence[Sequence[StudyImage]]) -> Tensor:
        """
        Head input vectors of every group, computed in one batch: the fused
        [G, 3C] for fusion variants, the pooled [ΣKᵢ, C] per image otherwise.
        """
        items = [item for group in groups for item in group]
        if not items:
            raise ShapeError("forward_groups", "images", "≥ 1", 0)
        pooled = self.pool(items)
        if not self.fuses:
            return pooled
        fused: list[Tensor] = []
        start = 0
        for group in groups:
            rows = list(range(start, start + len(group)))
            start += len(group)
            fused.append(ghif_fuse(take_rows(pooled, rows)))
        return stack(fused)

    def forward_groups(self, groups: Sequence[Sequence[StudyImage]]) -> Tensor:
        """
        Run every image of every group in one batch.

        Fusion variants return one probability per group [G]; image-wise
        variants return one probability per image [ΣKᵢ].
        """
        vectors = self.head_inputs(groups)
        return reshape(self.head(vectors), (vectors.shape[0],))


# ─── Operations ─────────────────────────────────────────────────────────────

def _pixels_of(image: UsImage | np.ndarray) -> np.ndarray:
    return image.pixels if isinstance(image, UsImage) else np.asarray(image, dtype=np.float64)


def extract_features(image: UsImage | np.ndarray, view: int, model: FibrosisModel) -> FeatureMap:
    """Aᵏ = h(Xᵏ; θ, ω_v) for a single image → [C, H′, W′]."""
    feats = model.features(_pixels_of(image)[None], [view])
    return reshape(feats, feats.shape[1:])


def downsample_mask(roi: ClinicalRoi | np.ndarray, feature_shape: tuple[int, int]) -> np.ndarray:
    """Average the binary mask over each stride×stride cell and keep cells ≥ 0.5 covered."""
    grid = np.asarray(roi.grid if isinstance(roi, ClinicalRoi) else roi, dtype=np.float64)
    h, w = grid.shape
    fh, fw = feature_shape
    if h % fh or w % fw:
        raise ShapeError("downsample_mask", "H×W", f"multiple of {feature_shape}", grid.shape)
    cells = grid.reshape(fh, h // fh, fw, w // fw).mean(axis=(1, 3))
    return (cells >= MASK_KEEP_FRACTION).astype(np.float64)


def clinical_roi_pool(features: FeatureMap, mask: np.ndarray) -> PooledVector:
    """
    GAP(M ⊙ A): per channel Σ M·A / (H′·W′). The divisor is the full spatial
    area, so the pooled value also reflects how much of the map the ROI covers.
    Accepts A [C,H′,W′] with M [H′,W′], or A [N,C,H′,W′] with M [N,H′,W′].
    """
    m = np.asarray(mask, dtype=np.float64)
    if features.shape[-2:] != m.shape[-2:]:
        raise ShapeError("clinical_roi_pool", "H′×W′", features.shape[-2:], m.shape[-2:])
    if features.ndim == 4:
        if m.ndim != 3 or m.shape[0] != features.shape[0]:
            raise ShapeError("clinical_roi_pool", "N", features.shape[0], m.shape)
        m = m[:, None, :, :]
    elif features.ndim != 3 or m.ndim != 2:
        raise ShapeError("clinical_roi_pool", "ndim", "A[C,H,W] with M[H,W]", (features.ndim, m.ndim))
    return mean(elementwise_mul(features, Tensor(m)), axis=(-2, -1))


def ghif_fuse(pooled: Sequence[PooledVector] | Tensor) -> Tensor:
    """concat(mean, population var, max) over the set → [3C], for any K ≥ 1."""
    if isinstance(pooled, Tensor):
        batch = pooled
    else:
        if not pooled:
            raise ShapeError("ghif_fuse", "K", "≥ 1", 0)
        batch = stack(list(pooled))
    if batch.ndim != 2:
        raise ShapeError("ghif_fuse", "pooled.ndim", 2, batch.ndim)
    return concat([mean(batch, axis=0), var(batch, axis=0), amax(batch, axis=0)])


def _subset_items(study: Study, subset: Sequence[int] | None) -> list[StudyImage]:
    if subset is None:
        return list(study.images)
    if len(subset) == 0:
        raise ShapeError("predict_study", "subset", "non-empty", 0)
    return [study.images[i] for i in subset]


def study_probability(model: FibrosisModel, study: Study, subset: Sequence[int] | None = None) -> Tensor:
    """Differentiable study-level probability of a fusion model."""
    if not model.fuses:
        raise ValueError(f"variant {model.variant!r} has no fusion head")
    return model.forward_groups([_subset_items(study, subset)])


def predict_study(study: Study, subset: Sequence[int] | None, model: FibrosisModel) -> float:
    """ŷ = f(g(𝒜; ℳ); w) on the chosen images (all when ``subset`` is None)."""
    with no_grad():
        return float(study_probability(model, study, subset).data[0])


def predict_image(image: UsImage | np.ndarray, view: int, mask: ClinicalRoi | np.ndarray | None,
                  model: FibrosisModel) -> float:
    """ŷᵏ = f(g(Aᵏ); w) for an image-wise model; the mask is ignored by the unmasked variant."""
    if model.fuses:
        raise ValueError(f"variant {model.variant!r} predicts studies, not single images")
    with no_grad():
        feats = model.features(_pixels_of(image)[None], [view])
        if model.uses_mask:
            if mask is None:
                raise ShapeError("predict_image", "mask", "clinical ROI", None)
            pooled = clinical_roi_pool(feats, downsample_mask(mask, model.config.feature_shape)[None])
        else:
            pooled = mean(feats, axis=(2, 3))
        return float(model.head(pooled).data.reshape(-1)[0])


def median_late_fusion(probs: Sequence[float]) -> float:
    """Median of per-image probabilities; even counts take the midpoint of the two central values."""
    if len(probs) == 0:
        raise ValueError("median_late_fusion needs at least one probability")
    values = np.asarray(probs, dtype=np.float64)
    if not ((values >= 0.0) & (values <= 1.0)).all():
        raise ValueError(f"median_late_fusion expects probabilities in [0, 1], got {values.tolist()}")
    return float(np.median(values))


def image_probabilities(model: FibrosisModel, study: Study, subset: Sequence[int] | None = None) -> list[float]:
    """Per-image probabilities of an image-wise model, in image order."""
    with no_grad():
        return [float(p) for p in model.forward_groups([_subset_items(study, subset)]).data]


def score_study(model: FibrosisModel, study: Study, subset: Sequence[int] | None = None) -> float:
    """Study-level score for any variant (median late fusion for image-wise models)."""
    if model.fuses:
        return predict_study(study, subset, model)
    return median_late_fusion(image_probabilities(model, study, subset))


def batch_scores(
    model: FibrosisModel,
    studies: Sequence[Study],
    subsets: Sequence[Sequence[int] | None] | None = None,
    max_images: int = 64,
) -> list[float]:
    """``score_study`` for many studies, packing whole studies up to ``max_images`` images per forward pass."""
    if subsets is None:
        subsets = [None] * len(studies)
    if len(subsets) != len(studies):
        raise ShapeError("batch_scores", "subsets", len(studies), len(subsets))
    scores: list[float] = []
    groups: list[list[StudyImage]] = []

    def flush() -> None:
        probs = model.forward_groups(groups).data
        if model.fuses:
            scores.extend(float(p) for p in probs)
        else:
            start = 0
            for group in groups:
                scores.append(median_late_fusion(probs[start:start + len(group)]))
                start += len(group)
        groups.clear()

    with no_grad():
        for study, subset in zip(studies, subsets):
            items = _subset_items(study, subset)
            if groups and sum(len(g) for g in groups) + len(items) > max_images:
                flush()
            groups.append(items)
        if groups:
            flush()
    return scores
