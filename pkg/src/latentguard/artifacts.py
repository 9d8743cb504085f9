"""Artifact persistence: deterministic binary bundles, hashing, locks.

Every artifact is a single file so it can be content-hashed and replaced
atomically (write to a temp name, then rename). The bundle format is a
versioned binary with a fixed-order header per array (name, element type,
dims) followed by the little-endian payload; identical contents always
produce identical bytes, which makes rerun-equality checks meaningful.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LGAR"
FORMAT_VERSION = 1

_DTYPES = {1: "<f4", 2: "<i8", 3: "|u1", 4: "<f8", 5: "<i4"}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class ArtifactError(RuntimeError):
    pass


class MissingArtifactError(ArtifactError):
    pass


class StaleArtifactError(ArtifactError):
    pass


class LockHeldError(ArtifactError):
    pass


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def write_json(path: str | Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path: str | Path):
    with open(path) as f:
        return json.load(f)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_bundle(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays plus a JSON meta block as one deterministic file."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    meta_bytes = canonical_json(meta).encode()
    parts.append(struct.pack("<Q", len(meta_bytes)))
    parts.append(meta_bytes)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        dt = arr.dtype.newbyteorder("<").str
        if dt not in _DTYPE_CODES:
            raise ArtifactError(f"unsupported dtype {arr.dtype} for array {name!r}")
        arr = arr.astype(np.dtype(dt), copy=False)
        name_b = name.encode()
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = arr.tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    atomic_write_bytes(path, b"".join(parts))


def load_bundle(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ArtifactError(f"{path.name}: not an artifact bundle")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != FORMAT_VERSION:
        raise ArtifactError(f"{path.name}: unsupported bundle version {version}")
    off = 8
    meta_len = struct.unpack_from("<Q", data, off)[0]
    off += 8
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    n_arrays = struct.unpack_from("<I", data, off)[0]
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        name_len = struct.unpack_from("<H", data, off)[0]
        off += 2
        name = data[off:off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        nbytes = struct.unpack_from("<Q", data, off)[0]
        off += 8
        arr = np.frombuffer(data[off:off + nbytes], dtype=np.dtype(_DTYPES[code]))
        arrays[name] = arr.reshape(shape).copy()
        off += nbytes
    return arrays, meta


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(v) for k, v in arrays.items()}
    module.load_state_dict(state, strict=True)


def save_classifier(path: str | Path, model, provenance: dict | None = None) -> None:
    from .models import LayeredClassifier

    assert isinstance(model, LayeredClassifier)
    meta = {
        "kind": "classifier",
        "arch": {"family": model.arch.get("family"), "num_classes": model.num_classes},
        "provenance": provenance or {},
    }
    save_bundle(path, _state_arrays(model), meta)


def load_classifier(path: str | Path):
    from .models import build_classifier

    arrays, meta = load_bundle(path)
    if meta.get("kind") != "classifier":
        raise ArtifactError(f"{path}: expected a classifier checkpoint")
    arch = meta["arch"]
    model = build_classifier(arch["family"], arch["num_classes"])
    _load_state(model, arrays)
    return model.freeze(), meta


def save_encoder(path: str | Path, encdec, provenance: dict | None = None) -> None:
    meta = {
        "kind": "encoder",
        "arch": {
            "tap": encdec.tap,
            "activation_shape": list(encdec.activation_shape),
            "latent_dim": encdec.latent_dim,
            "hidden": encdec.hidden,
        },
        "provenance": provenance or {},
    }
    save_bundle(path, _state_arrays(encdec), meta)


def load_encoder(path: str | Path):
    from .models import EncoderDecoder

    arrays, meta = load_bundle(path)
    if meta.get("kind") != "encoder":
        raise ArtifactError(f"{path}: expected an encoder checkpoint")
    arch = meta["arch"]
    encdec = EncoderDecoder(arch["tap"], tuple(arch["activation_shape"]),
                            arch["latent_dim"], hidden=arch["hidden"])
    _load_state(encdec, arrays)
    return encdec.freeze(), meta


def save_index(path: str | Path, index, provenance: dict | None = None) -> None:
    arrays = {}
    entries = []
    for enc_id in index.encoder_ids:
        e = index.entries[enc_id]
        arrays[f"emb_{enc_id}"] = e.embeddings.astype(np.float32, copy=False)
        arrays[f"lab_{enc_id}"] = e.labels.astype(np.int64, copy=False)
        entries.append({
            "encoder_id": enc_id, "latent_dim": e.latent_dim,
            "retained": e.retained, "total": e.total_points,
        })
    save_bundle(path, arrays, {"kind": "index", "entries": entries,
                               "provenance": provenance or {}})


def load_index(path: str | Path):
    from .detection import IndexEntry, LatentIndex

    arrays, meta = load_bundle(path)
    if meta.get("kind") != "index":
        raise ArtifactError(f"{path}: expected a latent index")
    index = LatentIndex()
    for ent in meta["entries"]:
        eid = ent["encoder_id"]
        index.entries[eid] = IndexEntry(
            encoder_id=eid, latent_dim=ent["latent_dim"],
            embeddings=arrays[f"emb_{eid}"], labels=arrays[f"lab_{eid}"],
            total_points=ent["total"],
        )
    return index, meta


def save_attack_result(path: str | Path, result, meta: dict) -> None:
    arrays = {
        "pixels": result.adversarial.pixels.numpy().astype(np.float32, copy=False),
        "labels": result.adversarial.labels.numpy().astype(np.int64, copy=False),
        "success": result.success_mask.numpy().astype(np.uint8),
        "linf": result.linf.numpy().astype(np.float32, copy=False),
        "l2": result.l2.numpy().astype(np.float32, copy=False),
    }
    save_bundle(path, arrays, {"kind": "attack", **meta})


def load_attack_result(path: str | Path):
    from .attacks import AttackResult
    from .data import ImageBatch

    arrays, meta = load_bundle(path)
    if meta.get("kind") != "attack":
        raise ArtifactError(f"{path}: expected an attack result")
    result = AttackResult(
        ImageBatch(torch.from_numpy(arrays["pixels"]), torch.from_numpy(arrays["labels"])),
        torch.from_numpy(arrays["success"].astype(bool)),
        torch.from_numpy(arrays["linf"]),
        torch.from_numpy(arrays["l2"]),
    )
    return result, meta


class StageLock:
    """One-writer lock on an artifact directory."""

    def __init__(self, stage_dir: str | Path):
        self.path = Path(stage_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockHeldError(
                f"stage directory is locked by another run: {self.path}"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False
