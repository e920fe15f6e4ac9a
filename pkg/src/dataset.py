"""
Study / image data model and the clinical ROI rule.

A Study is one patient exam: a label, a patient id and 1..14 view-tagged
ultrasound images, each with its liver mask. The clinical ROI of an image is
the filled rectangle covering the top half of the liver plus a margin above
its upper border.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .config import MAX_IMAGES_PER_STUDY, ROI_EXTENSION_PIXELS, ROI_REFERENCE_HEIGHT
from .errors import RoiError, ShapeError
from .layers import check_view

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class UsImage:
    """Grayscale scan with pixels in [0, 1] (stored as 8-bit on disk)."""

    pixels: np.ndarray

    @classmethod
    def from_uint8(cls, raw: np.ndarray) -> UsImage:
        return cls(raw.astype(np.float64) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class LiverMask:
    grid: np.ndarray  # bool H×W

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class ClinicalRoi:
    """Filled axis-aligned rectangle; bounds are inclusive."""

    grid: np.ndarray
    row_top: int
    row_bottom: int
    col_left: int
    col_right: int


def roi_extension(height: int) -> int:
    """The 10-pixel margin is defined at 128 rows; scale it to the stored height, halves rounding up."""
    return max(1, math.floor(ROI_EXTENSION_PIXELS * height / ROI_REFERENCE_HEIGHT + 0.5))


def roi_from_liver_mask(mask: LiverMask, extension: int | None = None) -> ClinicalRoi:
    """
    Rows [max(0, r_min − ext), r_min + ⌊(r_max − r_min)/2⌋], cols [c_min, c_max]
    of the liver mask's bounding box, filled with ones.
    """
    grid = np.asarray(mask.grid, dtype=bool)
    if grid.ndim != 2:
        raise ShapeError("roi_from_liver_mask", "mask.ndim", 2, grid.ndim)
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    if rows.size == 0:
        raise RoiError("liver mask is empty; cannot build a clinical ROI")
    ext = roi_extension(grid.shape[0]) if extension is None else extension
    r_min, r_max = int(rows[0]), int(rows[-1])
    top = max(0, r_min - ext)
    bottom = r_min + (r_max - r_min) // 2
    left, right = int(cols[0]), int(cols[-1])
    roi = np.zeros_like(grid)
    roi[top:bottom + 1, left:right + 1] = True
    return ClinicalRoi(roi, top, bottom, left, right)


@dataclass(eq=False)
class StudyImage:
    image: UsImage
    view: int
    liver_mask: LiverMask

    def __post_init__(self) -> None:
        self.view = check_view(self.view)
        if self.image.shape != self.liver_mask.shape:
            raise ShapeError("study_image", "mask", self.image.shape, self.liver_mask.shape)

    @cached_property
    def roi(self) -> ClinicalRoi:
        return roi_from_liver_mask(self.liver_mask)


@dataclass(eq=False)
class Study:
    study_id: str
    patient_id: str
    label: int
    images: list[StudyImage] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"study {self.study_id}: label must be 0 or 1, got {self.label!r}")
        if not 1 <= len(self.images) <= MAX_IMAGES_PER_STUDY:
            raise ValueError(
                f"study {self.study_id}: image count must be in 1..{MAX_IMAGES_PER_STUDY}, got {len(self.images)}"
            )

    @property
    def k(self) -> int:
        return len(self.images)

    @property
    def views(self) -> list[int]:
        return [item.view for item in self.images]

    def with_images(self, images: list[StudyImage]) -> Study:
        return Study(self.study_id, self.patient_id, self.label, images)

    def same_as(self, other: Study) -> bool:
        """Pixel-exact comparison (8-bit storage resolution)."""
        if (self.study_id, self.patient_id, self.label, self.k) != (other.study_id, other.patient_id, other.label, other.k):
            return False
        for a, b in zip(self.images, other.images):
            if a.view != b.view:
                return False
            if not np.array_equal(a.image.to_uint8(), b.image.to_uint8()):
                return False
            if not np.array_equal(a.liver_mask.grid, b.liver_mask.grid):
                return False
        return True


def patients_of(studies: list[Study]) -> list[str]:
    """Distinct patient ids in first-seen order."""
    return list(dict.fromkeys(s.patient_id for s in studies))
