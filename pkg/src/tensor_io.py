"""
ProxyTokens: Named-tensor bundle format

One file = one UTF-8 JSON manifest line, then the raw payload. The manifest
lists every tensor's name, shape, byte offset into the payload and tag
("frozen", "trainable" or "data"); values are little-endian IEEE-754 float64.
Used for checkpoints and dataset files alike.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from src.errors import CheckpointError

logger = logging.getLogger("ProxyTokens.TensorIO")

BUNDLE_FORMAT = "cmpt-tensors/1"
_DTYPE = np.dtype("<f8")


def write_bundle(path, tensors: Dict[str, np.ndarray], meta: dict, tags: Optional[Dict[str, str]] = None):
    """
    Write tensors and metadata to ``path``

    Args:
        path (str | Path): destination file
        tensors (dict): name -> 2-D array, written in insertion order
        meta (dict): JSON-serializable metadata echoed into the manifest
        tags (dict, optional): name -> tag; defaults to "data"
    """
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype=_DTYPE)
        entries.append({
            "name": name,
            "shape": list(array.shape),
            "offset": offset,
            "tag": (tags or {}).get(name, "data"),
        })
        chunks.append(array.tobytes())
        offset += array.nbytes
    manifest = {"format": BUNDLE_FORMAT, "meta": meta, "entries": entries, "payload_bytes": offset}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    logger.debug(f"Wrote {len(entries)} tensors ({offset} bytes) to {path}")


def read_bundle(path):
    """
    Read a bundle written by ``write_bundle``

    Returns:
        tuple: (tensors: dict name -> array, tags: dict name -> tag, meta: dict)
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from e
    if manifest.get("format") != BUNDLE_FORMAT:
        raise CheckpointError(f"{path}: unsupported format {manifest.get('format')!r}, expected {BUNDLE_FORMAT!r}")

    payload = raw[newline + 1:]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest declares {manifest['payload_bytes']} (truncated or corrupt)"
        )
    tensors, tags = {}, {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + count * _DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the payload")
        array = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=entry["offset"])
        tensors[entry["name"]] = array.reshape(shape).astype(np.float64)
        tags[entry["name"]] = entry["tag"]
    return tensors, tags, manifest["meta"]
