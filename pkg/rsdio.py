"""
Binary containers shared by the dataset (RSDS), feature (RSDF) and
checkpoint (RSDC) files.

Layout: 4 magic bytes, format version (u16, little-endian), header length
(u32, little-endian), a UTF-8 JSON header, then raw little-endian blobs in
the order the header's "blobs" index lists them.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from rsdcommon import CheckpointError, FormatError

FORMAT_VERSION = 1
DATASET_MAGIC = b"RSDS"
FEATURES_MAGIC = b"RSDF"
CHECKPOINT_MAGIC = b"RSDC"

_BLOB_DTYPES = {"f32": "<f4", "f64": "<f8"}
_PREAMBLE = struct.Struct("<4sHI")


def canonical_json(obj: Any) -> str:
    """Deterministic JSON used for headers and config hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _dtype_name(array: np.ndarray) -> str:
    if array.dtype == np.float64:
        return "f64"
    return "f32"


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write to a sibling temp file and rename, so readers never see partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)


def write_container(
    path: str,
    magic: bytes,
    header: Dict[str, Any],
    arrays: List[Tuple[str, np.ndarray]],
) -> None:
    """Serialize named arrays behind a JSON header; the blob index is added to the header."""
    index = []
    chunks = []
    offset = 0
    for name, array in arrays:
        dtype_name = _dtype_name(array)
        raw = np.ascontiguousarray(array, dtype=_BLOB_DTYPES[dtype_name]).tobytes()
        index.append(
            {
                "name": name,
                "shape": list(array.shape),
                "dtype": dtype_name,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["blobs"] = index
    header_bytes = canonical_json(full_header).encode("utf-8")
    payload = _PREAMBLE.pack(magic, FORMAT_VERSION, len(header_bytes)) + header_bytes
    atomic_write_bytes(path, payload + b"".join(chunks))
    logging.debug(f"Wrote {len(arrays)} blobs ({offset} bytes) to {path}")


def read_container(path: str, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Inverse of write_container; returns (header, {name: array})."""
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except FileNotFoundError:
        raise FormatError(f"File {path} not found")
    if len(payload) < _PREAMBLE.size:
        raise FormatError(f"{path} is too short to be a {magic.decode()} file")
    found_magic, version, header_len = _PREAMBLE.unpack_from(payload)
    if found_magic != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {found_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    start = _PREAMBLE.size
    try:
        header = json.loads(payload[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: invalid header: {e}")
    data_start = start + header_len
    arrays = {}
    for blob in header.get("blobs", []):
        begin = data_start + blob["offset"]
        raw = payload[begin : begin + blob["nbytes"]]
        if len(raw) != blob["nbytes"]:
            raise FormatError(f"{path}: truncated blob {blob['name']}")
        array = np.frombuffer(raw, dtype=_BLOB_DTYPES[blob["dtype"]]).reshape(blob["shape"])
        # copy: frombuffer views are read-only and keep the whole payload alive
        arrays[blob["name"]] = array.astype(array.dtype.newbyteorder("="), copy=True)
    return header, arrays


@dataclass
class ModelCheckpoint:
    """Named-tensor bundle for an encoder or LSTM-stage network."""

    kind: str
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)


def write_checkpoint(path: str, checkpoint: ModelCheckpoint) -> None:
    header = {"kind": checkpoint.kind, "metadata": checkpoint.metadata}
    write_container(path, CHECKPOINT_MAGIC, header, list(checkpoint.tensors.items()))
    logging.info(f"Saved {checkpoint.kind} checkpoint to {path}")


def read_checkpoint(path: str, expected_kind: Optional[str] = None) -> ModelCheckpoint:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    kind = header.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"{path} holds a {kind} checkpoint, expected {expected_kind}")
    ordered = {blob["name"]: arrays[blob["name"]] for blob in header["blobs"]}
    return ModelCheckpoint(kind=kind, tensors=ordered, metadata=header.get("metadata", {}))


def write_features(
    path: str, features: Dict[str, np.ndarray], metadata: Dict[str, Any]
) -> None:
    """Feature file: same container as RSDS with a feature-only payload per surgery."""
    header = {"kind": "features", "metadata": metadata, "surgery_ids": list(features)}
    write_container(path, FEATURES_MAGIC, header, list(features.items()))


def read_features(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    header, arrays = read_container(path, FEATURES_MAGIC)
    return {sid: arrays[sid] for sid in header["surgery_ids"]}, header.get("metadata", {})
