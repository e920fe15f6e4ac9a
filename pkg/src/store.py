"""
Disk persistence for studies: JSON Lines manifest plus 8-bit binary PGM files.

One manifest record per image, keys exactly
{"study_id", "patient_id", "label", "view", "image_path", "mask_path"}, with
paths relative to the manifest file. Records are grouped into studies by
study_id in first-seen order; image order within a study is file order.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from scipy.ndimage import zoom

from .config import MANIFEST_NAME, MAX_IMAGES_PER_STUDY, NUM_VIEWS
from .dataset import LiverMask, Study, StudyImage, UsImage
from .errors import (
    InconsistentLabelError,
    InvalidViewError,
    MalformedPgmError,
    ManifestError,
    MissingFileError,
)

logger = logging.getLogger(__name__)

MANIFEST_KEYS = ("study_id", "patient_id", "label", "view", "image_path", "mask_path")
MASK_THRESHOLD = 128


# ─── PGM ────────────────────────────────────────────────────────────────────

def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Binary P5, maxval 255."""
    raw = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = raw.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + raw.tobytes())


def read_pgm(path: Path, line: int | None = None) -> np.ndarray:
    """Parse a binary P5 file with maxval 255 (header comments allowed)."""
    if not path.exists():
        raise MissingFileError(f"file not found: {path}", line)
    blob = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedPgmError(f"{path}: truncated header", line)
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster

    magic, width, height, maxval = fields
    if magic != b"P5":
        raise MalformedPgmError(f"{path}: expected P5, got {magic!r}", line)
    try:
        w, h, m = int(width), int(height), int(maxval)
    except ValueError:
        raise MalformedPgmError(f"{path}: non-numeric header", line) from None
    if w <= 0 or h <= 0 or m != 255:
        raise MalformedPgmError(f"{path}: unsupported geometry {w}x{h} maxval {m}", line)
    raster = blob[pos:pos + w * h]
    if len(raster) != w * h:
        raise MalformedPgmError(f"{path}: raster has {len(raster)} bytes, expected {w * h}", line)
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


# ─── Manifest ───────────────────────────────────────────────────────────────

def _resize(array: np.ndarray, size: tuple[int, int], order: int) -> np.ndarray:
    if array.shape == size:
        return array
    factors = (size[0] / array.shape[0], size[1] / array.shape[1])
    return zoom(array, factors, order=order, mode="nearest", grid_mode=False)


def _parse_record(text: str, line: int) -> dict[str, Any]:
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"invalid JSON: {exc.msg}", line) from exc
    if not isinstance(record, dict) or set(record) != set(MANIFEST_KEYS):
        raise ManifestError(f"keys must be exactly {list(MANIFEST_KEYS)}", line)
    view = record["view"]
    if isinstance(view, bool) or not isinstance(view, int) or not 1 <= view <= NUM_VIEWS:
        raise InvalidViewError(f"view must be in 1..{NUM_VIEWS}, got {view!r}", line)
    if record["label"] not in (0, 1) or isinstance(record["label"], bool):
        raise ManifestError(f"label must be 0 or 1, got {record['label']!r}", line)
    return record


def load_manifest(path: Path, input_size: tuple[int, int] | None = None) -> list[Study]:
    """
    Read a manifest and its images into studies.

    Images are scaled to [0, 1]; masks are thresholded at 128. When
    ``input_size`` is given, images (bilinear) and masks (nearest) are resized
    to it.
    """
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    root = path.parent

    grouped: dict[str, list[tuple[int, dict[str, Any], StudyImage]]] = {}
    for line, text in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not text.strip():
            continue
        record = _parse_record(text, line)
        raw_image = read_pgm(root / record["image_path"], line)
        raw_mask = read_pgm(root / record["mask_path"], line)
        if raw_image.shape != raw_mask.shape:
            raise ManifestError(f"image {raw_image.shape} and mask {raw_mask.shape} differ in size", line)
        pixels = UsImage.from_uint8(raw_image).pixels
        mask = raw_mask >= MASK_THRESHOLD
        if input_size is not None:
            pixels = np.clip(_resize(pixels, input_size, order=1), 0.0, 1.0)
            mask = _resize(mask.astype(np.uint8), input_size, order=0).astype(bool)
        item = StudyImage(UsImage(pixels), record["view"], LiverMask(mask))
        grouped.setdefault(str(record["study_id"]), []).append((line, record, item))

    studies: list[Study] = []
    for study_id, entries in grouped.items():
        first_line, first, _ = entries[0]
        for line, record, _ in entries[1:]:
            if record["label"] != first["label"]:
                raise InconsistentLabelError(
                    f"study {study_id} has labels {first['label']} (line {first_line}) and {record['label']}", line
                )
            if record["patient_id"] != first["patient_id"]:
                raise ManifestError(f"study {study_id} spans patients {first['patient_id']} and {record['patient_id']}", line)
        if len(entries) > MAX_IMAGES_PER_STUDY:
            raise ManifestError(f"study {study_id} has {len(entries)} images (max {MAX_IMAGES_PER_STUDY})", first_line)
        studies.append(Study(study_id, str(first["patient_id"]), int(first["label"]), [e[2] for e in entries]))

    logger.info("Loaded %d studies (%d images) from %s", len(studies), sum(s.k for s in studies), path)
    return studies


def save_dataset(studies: list[Study], out_dir: Path, manifest_name: str = MANIFEST_NAME) -> Path:
    """Write images/, masks/ and the manifest; returns the manifest path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    for study in studies:
        for index, item in enumerate(study.images):
            stem = f"{study.study_id}_{index:02d}.pgm"
            image_rel = f"images/{stem}"
            mask_rel = f"masks/{stem}"
            write_pgm(out_dir / image_rel, item.image.to_uint8())
            write_pgm(out_dir / mask_rel, item.liver_mask.grid.astype(np.uint8) * 255)
            record = {
                "study_id": study.study_id,
                "patient_id": study.patient_id,
                "label": study.label,
                "view": item.view,
                "image_path": image_rel,
                "mask_path": mask_rel,
            }
            lines.append(json.dumps(record))
    manifest = out_dir / manifest_name
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Saved %d studies (%d images) to %s", len(studies), len(lines), out_dir)
    return manifest
