"""
Weight Container I/O
Single-file tensor container:
    [8 bytes LE header length] [UTF-8 JSON header] [raw little-endian tensor bytes]

Header maps tensor name → {dtype, shape, offset, nbytes}; `__metadata__`
carries the format version and a SHA-256 of the data section.
"""
import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from schemas.model import ModelConfig
from .errors import ContainerError, InputError
from .model_core import Weights, load_config

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
HEADER_PREFIX = struct.Struct("<Q")
DTYPE = "<f4"


def weights_to_bytes(weights: Weights) -> bytes:
    header: dict = {}
    chunks = []
    offset = 0
    for name, arr in weights.items():
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        header[name] = {"dtype": "float32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header["__metadata__"] = {"format_version": FORMAT_VERSION, "sha256": hashlib.sha256(data).hexdigest()}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return HEADER_PREFIX.pack(len(header_bytes)) + header_bytes + data


def weights_from_bytes(blob: bytes, config: ModelConfig) -> Weights:
    if len(blob) < HEADER_PREFIX.size:
        raise ContainerError("container truncated before header length")
    (header_len,) = HEADER_PREFIX.unpack_from(blob, 0)
    start = HEADER_PREFIX.size + header_len
    if start > len(blob):
        raise ContainerError(f"container truncated: header claims {header_len} bytes")
    try:
        header = json.loads(blob[HEADER_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"container header is not valid JSON: {e}") from e

    meta = header.pop("__metadata__", None)
    if not isinstance(meta, dict) or meta.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported container format (expected version {FORMAT_VERSION})")
    data = blob[start:]
    if hashlib.sha256(data).hexdigest() != meta.get("sha256"):
        raise ContainerError("checksum mismatch: container data is corrupt")

    tensors = {}
    for name, entry in header.items():
        try:
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise ContainerError(f"bad header entry for {name}") from e
        if entry.get("dtype") != "float32" or offset < 0 or offset + nbytes > len(data):
            raise ContainerError(f"bad header entry for {name}")
        if any(s < 0 for s in shape) or int(np.prod(shape, dtype=np.int64)) * 4 != nbytes:
            raise ContainerError(f"bad header entry for {name}: shape {list(shape)} does not fit {nbytes} bytes")
        arr = np.frombuffer(data, dtype=DTYPE, count=nbytes // 4, offset=offset)
        tensors[name] = arr.reshape(shape)
    return Weights(config, tensors)


# ============================================================
# Files
# ============================================================

def save_model(weights: Weights, weights_path: Path, config_path: Path) -> None:
    """Write the container and its standalone ModelConfig JSON."""
    weights_path = Path(weights_path)
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    weights_path.write_bytes(weights_to_bytes(weights))
    Path(config_path).write_text(weights.config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"[model] saved {weights_path} ({weights_path.stat().st_size} bytes)")


def load_model(weights_path: Path, config_path: Path) -> Weights:
    weights_path, config_path = Path(weights_path), Path(config_path)
    for path in (weights_path, config_path):
        if not path.exists():
            raise InputError(f"file not found: {path}")
    config = load_config(config_path.read_text(encoding="utf-8"))
    return weights_from_bytes(weights_path.read_bytes(), config)
