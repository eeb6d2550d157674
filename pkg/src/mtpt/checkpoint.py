"""Binary checkpoint container: magic "MTPT", version, named float64 tensors.

Byte layout (all integers little-endian, documented in docs/formats.md):

    b"MTPT"
    u32  format version
    u32  metadata length      followed by that many bytes of UTF-8 JSON
    u32  tensor count
    per tensor:
        u16  name length      followed by UTF-8 name bytes
        u8   ndim
        u64 * ndim            dimensions
        f64 * prod(dims)      row-major little-endian payload

Round trips are bitwise exact; loading verifies magic and version.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import FrozenModel, ModelConfig, PromptState, weight_keys

MAGIC = b"MTPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    meta_blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    chunks.append(struct.pack("<I", len(meta_blob)))
    chunks.append(meta_blob)
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)  # tobytes() always emits C order
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    metadata = json.loads(blob[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        tensors[name] = arr.astype(np.float64).copy()
    return tensors, metadata


def save_model(path, frozen: FrozenModel, prompts: PromptState, metadata: dict) -> None:
    tensors = dict(frozen.named_tensors())
    tensors["theta_txt"] = prompts.theta_txt
    tensors["theta_vis"] = prompts.theta_vis
    save_tensors(path, tensors, metadata)


def load_model(path) -> tuple[FrozenModel, PromptState, dict]:
    tensors, metadata = load_tensors(path)
    try:
        cfg = ModelConfig(**metadata["config"])
    except KeyError as err:
        raise CheckpointError(f"{path}: metadata missing model config") from err
    missing = (set(weight_keys(cfg)) | {"theta_txt", "theta_vis"}) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    frozen = FrozenModel(cfg, {k: tensors[k] for k in weight_keys(cfg)})
    prompts = PromptState(tensors["theta_txt"], tensors["theta_vis"])
    return frozen, prompts, metadata


def save_affine(path, batches: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    """Persist phi batches (e.g. {"phi_K": (N,2,3), "phi_V": ...}) for run manifests."""
    save_tensors(path, batches, metadata or {})


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
