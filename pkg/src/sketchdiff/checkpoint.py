"""DSK1 binary checkpoint format.

Layout: magic "DSK1" | u32 little-endian header length | UTF-8 JSON header |
payload of concatenated little-endian float32 arrays at the offsets declared
in the header's tensor_index.

Parameters live in float64 at runtime; writers round to float32. The content
digest is 64 bits of SHA-256 over the float32 payload bytes with tensors in
name-sorted order, which makes it bit-exact across platforms and lets the
"frozen backbone never changes" claim be asserted literally.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DigestMismatchError, ModelError

MAGIC = b"DSK1"
FORMAT_VERSION = 1


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def content_digest(tensors: Mapping[str, np.ndarray]) -> str:
    """16-hex-char (64-bit) digest over name-sorted float32 parameter bytes."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(_f32_bytes(tensors[name]))
    return h.hexdigest()[:16]


@dataclass
class Checkpoint:
    model_kind: str
    tensors: dict[str, np.ndarray]  # float64 in memory
    metadata: dict


def write_checkpoint(path, model_kind: str, tensors: Mapping[str, np.ndarray],
                     metadata: dict) -> str:
    """Write a DSK1 file; injects the content digest into metadata. Returns it."""
    digest = content_digest(tensors)
    names = sorted(tensors)
    index = []
    offset = 0
    blobs = []
    for name in names:
        blob = _f32_bytes(tensors[name])
        index.append({"name": name, "shape": list(tensors[name].shape),
                      "dtype": "f32", "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    metadata = dict(metadata)
    metadata["content_digest"] = digest
    header = {"format_version": FORMAT_VERSION, "model_kind": model_kind,
              "tensor_index": index, "metadata": metadata}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header_bytes).to_bytes(4, "little"))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    return digest


def read_checkpoint(path) -> Checkpoint:
    """Read and verify a DSK1 file; tensors come back as float64."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ModelError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ModelError(f"{path} is not a DSK1 checkpoint")
    header_len = int.from_bytes(raw[4:8], "little")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelError(f"{path}: corrupt checkpoint header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"{path}: unsupported format_version "
                         f"{header.get('format_version')}")
    payload = raw[8 + header_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensor_index"]:
        if entry["dtype"] != "f32":
            raise ModelError(f"{path}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        end = start + 4 * count
        if end > len(payload):
            raise ModelError(f"{path}: tensor {entry['name']} overruns payload")
        arr = np.frombuffer(payload[start:end], dtype="<f4").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(shape)
    metadata = header.get("metadata", {})
    stored = metadata.get("content_digest")
    actual = content_digest(tensors)
    if stored is not None and stored != actual:
        raise DigestMismatchError(
            f"{path}: stored digest {stored} != payload digest {actual}")
    return Checkpoint(model_kind=header["model_kind"], tensors=tensors,
                      metadata=metadata)


def digest_bytes(arr: np.ndarray) -> str:
    """64-bit digest of a single float64 array's raw bytes (reproducibility ids)."""
    h = hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()[:16]
