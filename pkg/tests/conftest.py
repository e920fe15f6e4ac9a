"""Shared fixtures: seeded generators, tiny backbones and hand-built studies."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np
import pytest

from src.dataset import LiverMask, Study, StudyImage, UsImage
from src.model import BackboneConfig
from src.phantom import generate_corpus

StudyFactory = Callable[..., Study]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_backbone() -> Callable[..., BackboneConfig]:
    """8×8 input, widths [2, 3, 4], feature map 2×2 (a few hundred parameters)."""

    def _make(norm_kind: str = "instance", vsp_enabled: bool = False) -> BackboneConfig:
        return BackboneConfig(input_size=(8, 8), widths=[2, 3, 4], strides=[1, 2, 2],
                              norm_kind=norm_kind, vsp_enabled=vsp_enabled)

    return _make


@pytest.fixture
def small_backbone() -> Callable[..., BackboneConfig]:
    """16×16 input, widths [4, 6, 8], feature map 4×4."""

    def _make(norm_kind: str = "instance", vsp_enabled: bool = False) -> BackboneConfig:
        return BackboneConfig(input_size=(16, 16), widths=[4, 6, 8], strides=[1, 2, 2],
                              norm_kind=norm_kind, vsp_enabled=vsp_enabled)

    return _make


def build_study(
    rng: np.random.Generator,
    label: int,
    k: int,
    size: tuple[int, int] = (8, 8),
    views: Sequence[int] | None = None,
    study_id: str = "S0",
    patient_id: str = "P0",
) -> Study:
    """Random pixels with a rectangular liver filling most of the frame."""
    h, w = size
    views = list(views) if views is not None else [int(v) for v in rng.integers(1, 7, size=k)]
    images = []
    for view in views:
        mask = np.zeros(size, dtype=bool)
        mask[h // 8:, w // 8: w - w // 8] = True
        images.append(StudyImage(UsImage(rng.uniform(0.0, 1.0, size=size)), view, LiverMask(mask)))
    return Study(study_id, patient_id, label, images)


@pytest.fixture
def make_study(rng: np.random.Generator) -> StudyFactory:
    def _make(label: int = 1, k: int = 3, **kwargs) -> Study:
        return build_study(rng, label, k, **kwargs)

    return _make


@pytest.fixture(scope="session")
def phantom_corpus() -> list[Study]:
    """24 small phantom studies (12 patients) at 16×16."""
    return generate_corpus(24, seed=3, min_images=1, max_images=4, size=(16, 16))
