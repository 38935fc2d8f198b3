"""Tensor container files (``.vitm`` models, ``.vitt`` calibration tensors).

Layout::

    u64 little-endian   manifest length M
    M bytes             UTF-8 JSON manifest
    rest                blob: little-endian float32 tensors, concatenated
                        in manifest directory order

The manifest carries ``format``, ``version``, free-form ``meta`` (the model
config for ``.vitm``), the ordered ``tensors`` directory of
``{name, shape, offset, nbytes}`` entries and the total ``blob_bytes``.
"""
import json
import struct
from pathlib import Path

import numpy as np

from .model import ViTConfig, ViTModel
from .tensor_core import ShapeError

VERSION = 1
_LE_F32 = np.dtype("<f4")


class ContainerError(Exception):
    pass


class ManifestError(ContainerError):
    """Header or manifest JSON is missing, unreadable or incomplete."""


class BlobLengthError(ContainerError):
    """The blob is shorter or longer than the manifest declares."""


class ContainerShapeError(ContainerError, ShapeError):
    """Directory shapes disagree with byte counts or with the model config."""


def write_container(path, tensors, fmt, meta=None):
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F32)
        raw = arr.tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": fmt,
        "version": VERSION,
        "meta": meta or {},
        "tensors": directory,
        "blob_bytes": offset,
    }
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_container(path, fmt=None):
    """Return ``(meta, {name: float32 array})``."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ManifestError(f"{path}: file too short for a container header")
    (mlen,) = struct.unpack("<Q", data[:8])
    if 8 + mlen > len(data):
        raise ManifestError(f"{path}: manifest length {mlen} exceeds file size")
    try:
        manifest = json.loads(data[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON ({exc})") from None
    for key in ("format", "version", "tensors", "blob_bytes"):
        if not isinstance(manifest, dict) or key not in manifest:
            raise ManifestError(f"{path}: manifest lacks '{key}'")
    if fmt is not None and manifest["format"] != fmt:
        raise ManifestError(f"{path}: expected format '{fmt}', found '{manifest['format']}'")
    if manifest["version"] != VERSION:
        raise ManifestError(f"{path}: unsupported version {manifest['version']}")

    blob = data[8 + mlen:]
    if len(blob) != manifest["blob_bytes"]:
        raise BlobLengthError(
            f"{path}: blob holds {len(blob)} bytes, manifest declares {manifest['blob_bytes']}"
        )

    tensors = {}
    expected_offset = 0
    for entry in manifest["tensors"]:
        try:
            name, shape, offset, nbytes = entry["name"], entry["shape"], entry["offset"], entry["nbytes"]
        except (KeyError, TypeError):
            raise ManifestError(f"{path}: malformed directory entry {entry!r}") from None
        if any(int(s) < 0 for s in shape):
            raise ContainerShapeError(f"{path}: tensor '{name}' has a negative dimension")
        count = int(np.prod(shape, dtype=np.int64))
        if count * 4 != nbytes:
            raise ContainerShapeError(
                f"{path}: tensor '{name}' shape {shape} needs {count * 4} bytes, directory says {nbytes}"
            )
        if offset != expected_offset:
            raise ContainerShapeError(f"{path}: tensor '{name}' offset {offset}, expected {expected_offset}")
        expected_offset += nbytes
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=offset)
        tensors[name] = arr.astype(np.float32).reshape(shape)
    if expected_offset != len(blob):
        raise ContainerShapeError(f"{path}: directory covers {expected_offset} of {len(blob)} blob bytes")
    return manifest.get("meta", {}), tensors


def save_model(model: ViTModel, path):
    write_container(path, model.named_tensors(), "vitm", {"config": model.config.to_json()})


def load_model(path) -> ViTModel:
    meta, tensors = read_container(path, "vitm")
    if "config" not in meta:
        raise ManifestError(f"{path}: model manifest has no config")
    try:
        cfg = ViTConfig.from_json(meta["config"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: invalid config ({exc})") from None
    try:
        return ViTModel.from_tensors(cfg, tensors)
    except ShapeError as exc:
        raise ContainerShapeError(f"{path}: {exc}") from None


def save_calibration(path, images, labels=None):
    tensors = {"images": np.asarray(images, dtype=np.float32)}
    if labels is not None:
        tensors["labels"] = np.asarray(labels, dtype=np.float32)
    write_container(path, tensors, "vitt", {"count": int(tensors["images"].shape[0])})


def load_calibration(path):
    """Return ``(images, labels_or_None)``; images shaped (N, H, W, C)."""
    _, tensors = read_container(path, "vitt")
    if "images" not in tensors:
        raise ManifestError(f"{path}: calibration container has no 'images' tensor")
    images = tensors["images"]
    if images.ndim != 4:
        raise ContainerShapeError(f"{path}: images must be (N, H, W, C), got {images.shape}")
    labels = tensors.get("labels")
    if labels is not None:
        labels = labels.astype(np.int64)
    return images, labels
