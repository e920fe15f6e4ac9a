"""
Training: patient-level fold splits, the random-combination sampler, data
augmentation and the SGD loop shared by every model variant.

Per epoch the training studies are shuffled and turned into samples:
  ghif, ghif_vsp   one random non-empty combination of each study's images
  global_fusion    every image of each study
  imagewise(_roi)  every image on its own, labelled with its study's label
Samples are batched ``batch_size`` at a time; the batch loss is the sum of
the per-sample BCE losses and each batch is one SGD step.
Before the first epoch the head input is centred and scaled per feature on
one epoch of samples and then frozen.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import affine_transform

from .config import (
    AUG_BRIGHTNESS,
    AUG_CONTRAST,
    AUG_ROTATION_DEG,
    AUG_SCALE,
    BATCH_SIZE,
    EPOCHS,
    LEARNING_RATE,
    MIN_PATIENTS,
    MODEL_VARIANTS,
    N_FOLDS,
    NORM_KINDS,
    SPLIT_FRACTIONS,
)
from .dataset import LiverMask, Study, StudyImage, UsImage, patients_of
from .errors import NonFiniteError, SplitError, TrainingError
from .evaluation import auc, roc_curve
from .model import BackboneConfig, FibrosisModel, batch_scores
from .tensor import Tensor, backward, bce_loss, no_grad, sgd_step, stack, sum_all, take_rows

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["epoch", "train_loss", "val_auc"]


# ─── Configuration ──────────────────────────────────────────────────────────

@dataclass
class AugmentationConfig:
    brightness: tuple[float, float] = AUG_BRIGHTNESS
    contrast: tuple[float, float] = AUG_CONTRAST
    rotation_deg: tuple[float, float] = AUG_ROTATION_DEG
    scale: tuple[float, float] = AUG_SCALE

    def __post_init__(self) -> None:
        identity = {"brightness": 0.0, "contrast": 1.0, "rotation_deg": 0.0, "scale": 1.0}
        for name, neutral in identity.items():
            lo, hi = (float(v) for v in getattr(self, name))
            if not lo <= neutral <= hi:
                raise ValueError(f"augmentation {name} range [{lo}, {hi}] must contain {neutral}")
            setattr(self, name, (lo, hi))
        if self.scale[0] <= 0:
            raise ValueError(f"augmentation scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> AugmentationConfig:
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0))


@dataclass
class TrainConfig:
    lr: float = LEARNING_RATE
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    seed: int = 0
    model_variant: str = "ghif_vsp"
    norm_kind: str = "instance"
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    augment: bool = True

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be ≥ 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be ≥ 1, got {self.batch_size}")
        if self.model_variant not in MODEL_VARIANTS:
            raise ValueError(f"model_variant must be one of {MODEL_VARIANTS}, got {self.model_variant!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")

    def backbone(self, base: BackboneConfig | None = None) -> BackboneConfig:
        """Backbone shape from ``base`` with this run's norm kind and VSP switch."""
        base = base or BackboneConfig()
        return BackboneConfig(
            input_size=base.input_size,
            widths=list(base.widths),
            strides=list(base.strides),
            norm_kind=self.norm_kind,
            vsp_enabled=self.model_variant == "ghif_vsp",
        )


# ─── Splits ─────────────────────────────────────────────────────────────────

@dataclass
class Fold:
    index: int
    train: list[str]
    test: list[str]
    val: list[str]


@dataclass
class FoldSplit:
    seed: int
    folds: list[Fold]

    def __len__(self) -> int:
        return len(self.folds)

    def __getitem__(self, index: int) -> Fold:
        return self.folds[index]


def split_folds(patient_ids: Sequence[str], n_folds: int = N_FOLDS, seed: int = 0) -> FoldSplit:
    """
    Shuffle the distinct patient ids once, cut them into ``n_folds`` test
    chunks, and take each fold's validation patients from the start of the
    remaining ones (in fold-rotation order); the rest train.
    """
    unique = sorted(set(patient_ids))
    if len(unique) < MIN_PATIENTS:
        raise SplitError(f"need at least {MIN_PATIENTS} patients for a fold split, got {len(unique)}")
    if n_folds < 2:
        raise SplitError(f"need at least 2 folds, got {n_folds}")
    rng = np.random.default_rng(seed)
    shuffled = [unique[i] for i in rng.permutation(len(unique))]
    chunks = [list(c) for c in np.array_split(np.array(shuffled, dtype=object), n_folds)]
    n_val = round(SPLIT_FRACTIONS[2] * len(unique))

    folds: list[Fold] = []
    for k in range(n_folds):
        rest = [pid for chunk in chunks[k + 1:] + chunks[:k] for pid in chunk]
        folds.append(Fold(index=k, train=rest[n_val:], test=list(chunks[k]), val=rest[:n_val]))
    logger.debug("Split %d patients into %d folds (seed %d)", len(unique), n_folds, seed)
    return FoldSplit(seed=seed, folds=folds)


# ─── Sampling and augmentation ──────────────────────────────────────────────

def sample_combination(study: Study | int, rng: np.random.Generator) -> list[int]:
    """Size uniform on 1..K, then that many distinct indices uniformly; sorted."""
    k = study if isinstance(study, int) else study.k
    if k < 1:
        raise ValueError(f"K must be ≥ 1, got {k}")
    size = int(rng.integers(1, k + 1))
    return sorted(int(i) for i in rng.choice(k, size=size, replace=False))


def _rotation_matrix(angle_deg: float, scale: float) -> np.ndarray:
    theta = math.radians(angle_deg)
    matrix = np.array([[math.cos(theta), math.sin(theta)], [-math.sin(theta), math.cos(theta)]]) / scale
    matrix[np.abs(matrix) < 1e-12] = 0.0
    return matrix


def apply_augmentation(
    image: np.ndarray,
    mask: np.ndarray,
    brightness: float,
    contrast: float,
    angle_deg: float,
    scale: float,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Deterministic part of ``augment``: rotate/scale image (bilinear) and mask
    (nearest) about the centre with the same parameters, then contrast about
    the mean and additive brightness on the image, clamped to [0, 1].
    """
    out = np.asarray(image, dtype=np.float64)
    out_mask = np.asarray(mask, dtype=bool)
    if angle_deg != 0.0 or scale != 1.0:
        matrix = _rotation_matrix(angle_deg, scale)
        center = (np.array(out.shape, dtype=np.float64) - 1.0) / 2.0
        offset = center - matrix @ center
        out = affine_transform(out, matrix, offset=offset, order=1, mode="nearest")
        out_mask = affine_transform(out_mask.astype(np.float64), matrix, offset=offset, order=0, mode="nearest") > 0.5
    if contrast != 1.0:
        m = out.mean()
        out = (out - m) * contrast + m
    if brightness != 0.0:
        out = out + brightness
    return np.clip(out, 0.0, 1.0), out_mask


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Random brightness, contrast, rotation and scale; always draws four numbers from ``rng``."""
    brightness = float(rng.uniform(*cfg.brightness))
    contrast = float(rng.uniform(*cfg.contrast))
    angle = float(rng.uniform(*cfg.rotation_deg))
    scale = float(rng.uniform(*cfg.scale))
    return apply_augmentation(image, mask, brightness, contrast, angle, scale)


def augment_item(item: StudyImage, cfg: AugmentationConfig, rng: np.random.Generator) -> StudyImage:
    """Augmented copy of a study image; the untouched image when the liver leaves the frame."""
    pixels, mask = augment(item.image.pixels, item.liver_mask.grid, cfg, rng)
    if not mask.any():
        logger.debug("Augmentation moved the liver out of frame; keeping the original image")
        return item
    return StudyImage(UsImage(pixels), item.view, LiverMask(mask))


# ─── Training loop ──────────────────────────────────────────────────────────

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class TrainResult:
    model: FibrosisModel
    history: list[EpochRecord]
    best_epoch: int
    best_val_auc: float


@dataclass
class _Sample:
    study: Study
    indices: list[int]


def _epoch_samples(studies: Sequence[Study], variant: str, rng: np.random.Generator) -> list[_Sample]:
    order = rng.permutation(len(studies))
    samples: list[_Sample] = []
    for i in order:
        study = studies[int(i)]
        if variant in ("ghif", "ghif_vsp"):
            samples.append(_Sample(study, sample_combination(study, rng)))
        elif variant == "global_fusion":
            samples.append(_Sample(study, list(range(study.k))))
        else:
            samples.extend(_Sample(study, [j]) for j in range(study.k))
    return samples


def _batch_groups(batch: Sequence[_Sample] | Sequence[tuple[Study, list[int]]], cfg: TrainConfig | None,
                  rng: np.random.Generator | None) -> tuple[list[list[StudyImage]], list[int]]:
    groups: list[list[StudyImage]] = []
    labels: list[int] = []
    for entry in batch:
        study, indices = (entry.study, entry.indices) if isinstance(entry, _Sample) else entry
        items = [study.images[j] for j in indices]
        if cfg is not None and cfg.augment and rng is not None:
            items = [augment_item(item, cfg.augmentation, rng) for item in items]
        groups.append(items)
        labels.append(study.label)
    return groups, labels


def batch_loss(model: FibrosisModel, batch: Sequence[_Sample] | Sequence[tuple[Study, list[int]]],
               cfg: TrainConfig | None = None, rng: np.random.Generator | None = None) -> Tensor:
    """Summed BCE of one batch in a single forward pass; augmentation when ``cfg`` and ``rng`` are given."""
    groups, labels = _batch_groups(batch, cfg, rng)
    probs = model.forward_groups(groups)
    if not model.fuses:
        labels = [label for label, group in zip(labels, groups) for _ in group]
    losses = [bce_loss(take_rows(probs, [i]), y) for i, y in enumerate(labels)]
    return sum_all(stack(losses))


def validation_auc(model: FibrosisModel, studies: Sequence[Study]) -> float:
    """Study-level AUC on ``studies``; NaN when they hold a single class."""
    labels = [s.label for s in studies]
    if len(set(labels)) < 2:
        return math.nan
    model.eval()
    scores = batch_scores(model, studies)
    return auc(roc_curve(scores, labels))


def fit_head_standardization(model: FibrosisModel, studies: Sequence[Study], config: TrainConfig,
                             rng: np.random.Generator) -> None:
    """
    Fit the head's frozen input statistics on one epoch's worth of training
    samples, drawn and augmented as in training. No parameter is updated;
    batch-norm running statistics are restored afterwards.
    """
    samples = _epoch_samples(studies, config.model_variant, rng)
    state = model.state_dict()
    model.train()
    vectors: list[np.ndarray] = []
    with no_grad():
        for start in range(0, len(samples), config.batch_size):
            groups, _ = _batch_groups(samples[start:start + config.batch_size], config, rng)
            vectors.append(model.head_inputs(groups).data)
    model.load_state_dict(state)
    stacked = np.concatenate(vectors)
    if stacked.shape[0] < 2:
        logger.debug("Too few training samples to fit the head input; keeping the identity")
        return
    model.fit_head_input(stacked)


def train(
    train_studies: Sequence[Study],
    val_studies: Sequence[Study],
    config: TrainConfig,
    backbone: BackboneConfig | None = None,
) -> TrainResult:
    """Train one model; returns it with the parameters of its best-validation-AUC epoch."""
    if not train_studies:
        raise TrainingError("training partition is empty")
    rng = np.random.default_rng(config.seed)
    model = FibrosisModel(config.backbone(backbone), config.model_variant, seed=config.seed)
    logger.info("Training %s/%s: %d studies, %d parameters, %d epochs",
                config.model_variant, config.norm_kind, len(train_studies), model.parameter_count(), config.epochs)
    fit_head_standardization(model, train_studies, config, rng)

    history: list[EpochRecord] = []
    best_state = model.state_dict()
    best_epoch, best_auc = 0, -math.inf
    for epoch in range(1, config.epochs + 1):
        started = time.time()
        model.train()
        samples = _epoch_samples(train_studies, config.model_variant, rng)
        total, count = 0.0, 0
        for start in range(0, len(samples), config.batch_size):
            batch = samples[start:start + config.batch_size]
            try:
                loss = batch_loss(model, batch, config, rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"loss is {value}")
                backward(loss)
                sgd_step(model.parameters(), config.lr)
            except NonFiniteError as exc:
                ids = ",".join(dict.fromkeys(s.study.study_id for s in batch))
                raise TrainingError(f"epoch {epoch}: non-finite training step: {exc}", ids) from exc
            total += value
            count += len(batch)
        train_loss = total / max(count, 1)

        val_auc = validation_auc(model, val_studies) if val_studies else math.nan
        history.append(EpochRecord(epoch, train_loss, val_auc))
        score = -math.inf if math.isnan(val_auc) else val_auc
        if score > best_auc or (best_epoch == 0 and epoch == config.epochs):
            best_auc, best_epoch = score, epoch
            best_state = model.state_dict()
        logger.info("  epoch %3d/%d  loss %.4f  val AUC %.4f  (%.1fs)",
                    epoch, config.epochs, train_loss, val_auc, time.time() - started)

    if math.isinf(best_auc):
        logger.warning("Validation AUC was undefined in every epoch; keeping the final epoch")
    model.load_state_dict(best_state)
    model.eval()
    logger.info("Best epoch %d (val AUC %.4f)", best_epoch, best_auc)
    return TrainResult(model, history, best_epoch, best_auc)


# ─── History CSV ────────────────────────────────────────────────────────────

def write_history(history: Sequence[EpochRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for record in history:
            writer.writerow([record.epoch, format(record.train_loss, ".12g"), format(record.val_auc, ".12g")])


def read_history(path: Path) -> list[EpochRecord]:
    with path.open(newline="", encoding="utf-8") as handle:
        return [
            EpochRecord(int(row["epoch"]), float(row["train_loss"]), float(row["val_auc"]))
            for row in csv.DictReader(handle)
        ]


def studies_for(studies: Sequence[Study], patient_ids: Sequence[str]) -> list[Study]:
    wanted = set(patient_ids)
    return [s for s in studies if s.patient_id in wanted]


def fold_split_for(studies: Sequence[Study], n_folds: int = N_FOLDS, seed: int = 0) -> FoldSplit:
    return split_folds(patients_of(list(studies)), n_folds, seed)
