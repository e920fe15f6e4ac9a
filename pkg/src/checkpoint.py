"""
HFUS1 checkpoint codec.

Layout (bit-exact):
    b"HFUS1"
    uint32 little-endian manifest length
    manifest: UTF-8 JSON {"config": {...}, "tensors": [{"name", "shape", "offset"}, ...]}
    payload: little-endian float64, row-major, tensors in manifest order

Offsets are byte offsets into the payload. The config record carries the
backbone shape, model variant and the split provenance of the training run.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, FibrosisError
from .model import BackboneConfig, FibrosisModel

logger = logging.getLogger(__name__)

MAGIC = b"HFUS1"
_LENGTH = struct.Struct("<I")


def encode_checkpoint(model: FibrosisModel, extra: dict[str, Any] | None = None) -> bytes:
    cfg = model.config
    config: dict[str, Any] = {
        "variant": model.variant,
        "norm_kind": cfg.norm_kind,
        "vsp_enabled": cfg.vsp_enabled,
        "widths": list(cfg.widths),
        "strides": list(cfg.strides),
        "input_size": list(cfg.input_size),
    }
    config.update(extra or {})

    entries: list[dict[str, Any]] = []
    chunks: list[bytes] = []
    offset = 0
    for name, array in model.state_dict().items():
        raw = np.ascontiguousarray(array, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)

    manifest = json.dumps({"config": config, "tensors": entries}, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LENGTH.pack(len(manifest)) + manifest + b"".join(chunks)


def decode_checkpoint(blob: bytes) -> tuple[FibrosisModel, dict[str, Any]]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an HFUS1 checkpoint (bad magic)")
    head = len(MAGIC) + _LENGTH.size
    if len(blob) < head:
        raise CheckpointError("checkpoint truncated before manifest length")
    (length,) = _LENGTH.unpack_from(blob, len(MAGIC))
    try:
        manifest = json.loads(blob[head:head + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint manifest: {exc}") from exc
    payload = blob[head + length:]

    try:
        config = manifest["config"]
        entries = manifest["tensors"]
        backbone = BackboneConfig(
            input_size=tuple(config["input_size"]),
            widths=list(config["widths"]),
            strides=list(config["strides"]),
            norm_kind=config["norm_kind"],
            vsp_enabled=bool(config["vsp_enabled"]),
        )
        model = FibrosisModel(backbone, config["variant"])
    except (KeyError, TypeError, ValueError, FibrosisError) as exc:
        raise CheckpointError(f"invalid checkpoint config record: {exc}") from exc

    state: dict[str, np.ndarray] = {}
    for entry in entries:
        try:
            name, shape, start = str(entry["name"]), [int(d) for d in entry["shape"]], int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed tensor entry {entry!r}: {exc}") from exc
        end = start + 8 * int(np.prod(shape, dtype=np.int64))
        if start < 0 or end > len(payload):
            raise CheckpointError(f"payload truncated in tensor {name}")
        state[name] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).astype(np.float64)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError, FibrosisError) as exc:
        raise CheckpointError(f"checkpoint does not match its config record: {exc}") from exc
    return model, config


def save_checkpoint(model: FibrosisModel, path: Path, extra: dict[str, Any] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, extra))
    logger.info("Checkpoint saved: %s (%d parameters)", path, model.parameter_count())


def load_checkpoint(path: Path) -> tuple[FibrosisModel, dict[str, Any]]:
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    model, config = decode_checkpoint(path.read_bytes())
    logger.info("Loaded %s checkpoint (%s norm) from %s", model.variant, model.config.norm_kind, path)
    return model, config
