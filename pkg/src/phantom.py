"""
Seeded synthetic ultrasound phantom studies.

Each image is a speckled background with an elliptical "liver" whose position
and orientation depend on the view id. Fibrosis-positive studies carry the two
markers clinicians read: coarser parenchyma texture (band-pass noise with a
longer correlation length) and a nodular upper liver border. The generator
also emits the ground-truth liver mask and, on request, a corner patch whose
brightness tracks the label (``train``) or its inverse (``flipped``) so that
shortcut learning can be measured.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import (
    CONFOUNDER_MODES,
    INPUT_SIZE,
    MAX_IMAGES_PER_STUDY,
    PHANTOM_BACKGROUND_LEVEL,
    PHANTOM_CONFOUNDER_LEVELS,
    PHANTOM_CONFOUNDER_SIZE,
    PHANTOM_LIVER_LEVEL,
    PHANTOM_NODULE_AMPLITUDE,
    PHANTOM_NODULE_CYCLES,
    PHANTOM_POSITION_JITTER,
    PHANTOM_TEXTURE_AMPLITUDE,
    PHANTOM_TEXTURE_SIGMA,
    THREADS,
    VIEW_GEOMETRY,
)
from .dataset import LiverMask, Study, StudyImage, UsImage
from .layers import check_view

logger = logging.getLogger(__name__)


def _band_pass(rng: np.random.Generator, shape: tuple[int, int], sigma: float) -> np.ndarray:
    """Difference-of-Gaussians noise with correlation length ~sigma, unit variance."""
    noise = rng.standard_normal(shape)
    band = gaussian_filter(noise, sigma) - gaussian_filter(noise, 4.0 * sigma)
    return band / band.std()


def _speckle(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Multiplicative Rayleigh speckle with unit mean."""
    return rng.rayleigh(scale=math.sqrt(2.0 / math.pi), size=shape)


def _render_image(
    rng: np.random.Generator,
    label: int,
    view: int,
    confounder_mode: str,
    size: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    geom = VIEW_GEOMETRY[view]
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)

    center_r = (geom["center_row"] + rng.uniform(-PHANTOM_POSITION_JITTER, PHANTOM_POSITION_JITTER)) * h
    center_c = (geom["center_col"] + rng.uniform(-PHANTOM_POSITION_JITTER, PHANTOM_POSITION_JITTER)) * w
    semi_r = geom["semi_rows"] * h
    semi_c = geom["semi_cols"] * w
    theta = math.radians(geom["angle_deg"] + rng.uniform(-5.0, 5.0))

    dr, dc = rows - center_r, cols - center_c
    u = (dr * math.cos(theta) + dc * math.sin(theta)) / semi_r
    v = (-dr * math.sin(theta) + dc * math.cos(theta)) / semi_c
    rho = np.hypot(u, v)
    phi = np.arctan2(u, v)

    # Border modulation only on the upper half (u < 0 points towards the transducer).
    upper = np.sqrt(np.clip(-np.sin(phi), 0.0, 1.0))
    phase = rng.uniform(0.0, 2.0 * math.pi)
    boundary = 1.0 + PHANTOM_NODULE_AMPLITUDE[label] * upper * np.sin(PHANTOM_NODULE_CYCLES * phi + phase)
    liver = rho <= boundary

    texture = _band_pass(rng, size, PHANTOM_TEXTURE_SIGMA[label])
    echo = np.full(size, PHANTOM_BACKGROUND_LEVEL) * (1.0 + 0.25 * rows / h)
    echo += 0.08 * _band_pass(rng, size, 3.0)
    echo[liver] = PHANTOM_LIVER_LEVEL * (1.0 + PHANTOM_TEXTURE_AMPLITUDE * texture[liver])

    # Bright capsule line along the liver border.
    capsule = np.abs(rho - boundary) * min(semi_r, semi_c) < 1.0
    echo[capsule] += 0.25

    pixels = echo * (0.75 + 0.25 * _speckle(rng, size))

    if confounder_mode != "off":
        level_label = label if confounder_mode == "train" else 1 - label
        p = PHANTOM_CONFOUNDER_SIZE
        pixels[:p, :p] = PHANTOM_CONFOUNDER_LEVELS[level_label] + rng.normal(0.0, 0.02, size=(p, p))

    quantized = np.clip(np.rint(np.clip(pixels, 0.0, 1.0) * 255.0), 0, 255) / 255.0
    return quantized, liver


def generate_synthetic_study(
    seed: int,
    label: int,
    k: int,
    views: Sequence[int],
    confounder_mode: str = "off",
    study_id: str | None = None,
    patient_id: str | None = None,
    size: tuple[int, int] = INPUT_SIZE,
) -> Study:
    """Deterministic phantom study with ``k`` images; ``views`` gives each image's view id."""
    if not 1 <= k <= MAX_IMAGES_PER_STUDY:
        raise ValueError(f"K must be in 1..{MAX_IMAGES_PER_STUDY}, got {k}")
    if len(views) != k:
        raise ValueError(f"expected {k} view ids, got {len(views)}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    if confounder_mode not in CONFOUNDER_MODES:
        raise ValueError(f"confounder_mode must be one of {CONFOUNDER_MODES}, got {confounder_mode!r}")
    views = [check_view(v) for v in views]

    images: list[StudyImage] = []
    for index, view in enumerate(views):
        rng = np.random.default_rng([seed, index])
        pixels, liver = _render_image(rng, label, view, confounder_mode, size)
        images.append(StudyImage(UsImage(pixels), view, LiverMask(liver)))
    return Study(study_id or f"S{seed}", patient_id or f"P{seed}", label, images)


def study_seed(corpus_seed: int, study_index: int) -> int:
    """Independent per-study stream derived from (corpus seed, study index)."""
    return int(np.random.SeedSequence([corpus_seed, study_index]).generate_state(1)[0])


def generate_corpus(
    n_studies: int,
    seed: int,
    min_images: int = 1,
    max_images: int = MAX_IMAGES_PER_STUDY,
    confounder_mode: str = "off",
    size: tuple[int, int] = INPUT_SIZE,
    threads: int = THREADS,
) -> list[Study]:
    """
    Balanced corpus: ⌈N/2⌉ positive studies. Consecutive studies of the same
    label share a patient (two exams per patient), so patient-level splits
    have something to keep together.
    """
    if n_studies < 1:
        raise ValueError(f"need at least one study, got {n_studies}")
    if not 1 <= min_images <= max_images <= MAX_IMAGES_PER_STUDY:
        raise ValueError(f"invalid image range [{min_images}, {max_images}]")

    rng = np.random.default_rng(seed)
    n_pos = (n_studies + 1) // 2
    labels = [1] * n_pos + [0] * (n_studies - n_pos)
    order = rng.permutation(n_studies)

    plans: list[tuple[int, int, int, list[int], str, str]] = []
    seen_per_label = {0: 0, 1: 0}
    patient_of_slot: dict[tuple[int, int], str] = {}
    next_patient = 0
    for index in range(n_studies):
        label = labels[order[index]]
        slot = (label, seen_per_label[label] // 2)
        seen_per_label[label] += 1
        if slot not in patient_of_slot:
            patient_of_slot[slot] = f"P{next_patient:04d}"
            next_patient += 1
        k = int(rng.integers(min_images, max_images + 1))
        views = [int(v) for v in rng.integers(1, 7, size=k)]
        plans.append((study_seed(seed, index), label, k, views, f"S{index:04d}", patient_of_slot[slot]))

    def _build(plan: tuple[int, int, int, list[int], str, str]) -> Study:
        s, label, k, views, sid, pid = plan
        return generate_synthetic_study(s, label, k, views, confounder_mode, sid, pid, size)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        studies = list(pool.map(_build, plans))
    logger.info("Generated %d synthetic studies (%d images, %d patients, confounder=%s)",
                len(studies), sum(s.k for s in studies), next_patient, confounder_mode)
    return studies
