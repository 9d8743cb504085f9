"""Dataset ingestion and canonical on-disk tensors.

Raw sources (MNIST-style IDX files or SVHN cropped-digit ``.mat`` files) are
converted once into a canonical directory of little-endian ``.npy`` tensors:
float32 pixels scaled into [0, 1] plus int64 labels, split into ``train``,
``test`` and a held-out ``calibration`` set carved out of the test data by a
seeded shuffle. Everything downstream consumes only the canonical form.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

CANONICAL_FORMAT_VERSION = 1

SPLITS = ("train", "test", "calibration")


class IngestError(ValueError):
    """Raised when a raw dataset file fails validation; names the bad field."""


@dataclass
class ImageBatch:
    """A batch of images with integer class labels.

    ``pixels`` is float32 of shape (batch, channels, height, width) with every
    value in [0, 1]; ``labels`` is int64 of shape (batch,).
    """

    pixels: torch.Tensor
    labels: torch.Tensor

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    def validate(self, num_classes: int | None = None) -> "ImageBatch":
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be 4-d (b, c, h, w), got {tuple(self.pixels.shape)}")
        if self.labels.dim() != 1:
            raise ValueError(f"labels must be 1-d, got {tuple(self.labels.shape)}")
        if self.pixels.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"batch mismatch: {self.pixels.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if not self.pixels.dtype.is_floating_point:
            raise ValueError(f"pixels must be floating point, got {self.pixels.dtype}")
        if len(self) > 0:
            lo, hi = float(self.pixels.min()), float(self.pixels.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"pixel values outside [0, 1]: min={lo}, max={hi}")
            if int(self.labels.min()) < 0:
                raise ValueError("negative class label")
            if num_classes is not None and int(self.labels.max()) >= num_classes:
                raise ValueError(
                    f"label {int(self.labels.max())} outside [0, {num_classes})"
                )
        return self

    def subset(self, indices) -> "ImageBatch":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageBatch(self.pixels[idx], self.labels[idx])

    def clone(self) -> "ImageBatch":
        return ImageBatch(self.pixels.clone(), self.labels.clone())


@dataclass
class PairBatch:
    """Paired samples for contrastive training.

    ``y[i] == 0`` means ``xa[i]`` and ``xb[i]`` share a class, ``y[i] == 1``
    means they differ. Each batch carries equally many of both kinds.
    """

    xa: ImageBatch
    xb: ImageBatch
    y: torch.Tensor

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def validate(self) -> "PairBatch":
        if not (len(self.xa) == len(self.xb) == len(self)):
            raise ValueError("pair batch members have mismatched lengths")
        same = self.y == 0
        if not torch.equal(self.xa.labels[same], self.xb.labels[same]):
            raise ValueError("a y=0 pair has differing labels")
        if torch.any(self.xa.labels[~same] == self.xb.labels[~same]):
            raise ValueError("a y=1 pair has equal labels")
        n_same, n_diff = int(same.sum()), int((~same).sum())
        if n_same != n_diff:
            raise ValueError(f"unbalanced pair batch: {n_same} same vs {n_diff} different")
        return self


@dataclass
class CanonicalDataset:
    """One canonical split held in memory."""

    dataset_id: str
    split: str
    pixels: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", int(self.labels.max()) + 1))

    def batch(self, indices=None) -> ImageBatch:
        px, lb = self.pixels, self.labels
        if indices is not None:
            idx = np.asarray(indices)
            px, lb = px[idx], lb[idx]
        return ImageBatch(torch.from_numpy(np.ascontiguousarray(px)),
                          torch.from_numpy(np.ascontiguousarray(lb)))

    def head(self, n: int) -> ImageBatch:
        return self.batch(np.arange(min(n, len(self))))


def _open_maybe_gz(path: Path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx_images(path: str | Path) -> np.ndarray:
    """Parse an IDX image file (big-endian, magic 2051) into uint8 (n, h, w)."""
    path = Path(path)
    with _open_maybe_gz(path) as f:
        header = f.read(16)
        if len(header) < 16:
            raise IngestError(f"{path.name}: truncated header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise IngestError(f"{path.name}: bad magic {magic}, expected {IDX_IMAGE_MAGIC}")
        payload = f.read(count * rows * cols)
    if len(payload) != count * rows * cols:
        raise IngestError(f"{path.name}: payload holds {len(payload)} bytes, "
                          f"expected {count * rows * cols}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path: str | Path) -> np.ndarray:
    """Parse an IDX label file (big-endian, magic 2049) into uint8 (n,)."""
    path = Path(path)
    with _open_maybe_gz(path) as f:
        header = f.read(8)
        if len(header) < 8:
            raise IngestError(f"{path.name}: truncated header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise IngestError(f"{path.name}: bad magic {magic}, expected {IDX_LABEL_MAGIC}")
        payload = f.read(count)
    if len(payload) != count:
        raise IngestError(f"{path.name}: payload holds {len(payload)} labels, expected {count}")
    return np.frombuffer(payload, dtype=np.uint8)


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(images.tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _find_one(source: Path, patterns: list[str], what: str) -> Path:
    for pat in patterns:
        hits = sorted(source.glob(pat))
        if hits:
            return hits[0]
    raise IngestError(f"{what}: no file matching {patterns} under {source}")


def _load_idx_source(source: Path) -> dict[str, tuple[np.ndarray, np.ndarray, list[Path]]]:
    out = {}
    for split, img_pats, lbl_pats in (
        ("train", ["train-images*ubyte*"], ["train-labels*ubyte*"]),
        ("test", ["t10k-images*ubyte*", "test-images*ubyte*"], ["t10k-labels*ubyte*", "test-labels*ubyte*"]),
    ):
        img_path = _find_one(source, img_pats, f"{split} images")
        lbl_path = _find_one(source, lbl_pats, f"{split} labels")
        images = read_idx_images(img_path)
        labels = read_idx_labels(lbl_path)
        if images.shape[0] != labels.shape[0]:
            raise IngestError(
                f"{split} count: {images.shape[0]} images vs {labels.shape[0]} labels"
            )
        pixels = (images.astype(np.float32) / 255.0)[:, None, :, :]
        out[split] = (pixels, labels.astype(np.int64), [img_path, lbl_path])
    return out


def _load_svhn_source(source: Path) -> dict[str, tuple[np.ndarray, np.ndarray, list[Path]]]:
    from scipy.io import loadmat

    out = {}
    for split, pats in (("train", ["train_32x32.mat"]), ("test", ["test_32x32.mat"])):
        path = _find_one(source, pats, f"{split} matrix")
        mat = loadmat(path)
        if "X" not in mat or "y" not in mat:
            raise IngestError(f"{path.name}: missing X/y variables")
        x = mat["X"]  # (32, 32, 3, n) uint8
        y = mat["y"].reshape(-1).astype(np.int64)
        if x.ndim != 4 or x.shape[:3] != (32, 32, 3):
            raise IngestError(f"{path.name}: X shape {x.shape}, expected (32, 32, 3, n)")
        pixels = np.transpose(x, (3, 2, 0, 1)).astype(np.float32) / 255.0
        y[y == 10] = 0  # SVHN stores digit 0 as class 10
        out[split] = (pixels, y, [path])
    return out


def ingest(source_path: str | Path, dataset_id: str, out_dir: str | Path, *,
           seed: int = 0, calibration_size: int = 750,
           source_format: str = "idx") -> dict:
    """Convert a raw dataset into the canonical directory layout.

    Writes ``<out_dir>/{split}_pixels.npy`` / ``{split}_labels.npy`` for the
    train, test and calibration splits plus a ``meta.json`` recording source
    checksums, the normalization applied and the calibration membership. The
    calibration split is removed from the test split, so the two are disjoint.
    Ingestion is atomic: nothing is left behind on a validation failure, and
    re-ingesting identical sources yields byte-identical files.
    """
    source = Path(source_path)
    out_dir = Path(out_dir)
    if source_format == "idx":
        loaded = _load_idx_source(source)
    elif source_format == "svhn":
        loaded = _load_svhn_source(source)
    else:
        raise IngestError(f"source_format: unknown format {source_format!r}")

    n_test = loaded["test"][0].shape[0]
    if calibration_size >= n_test:
        raise IngestError(
            f"calibration_size: {calibration_size} >= test set size {n_test}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_test)
    cal_idx = np.sort(perm[:calibration_size])
    eval_idx = np.sort(perm[calibration_size:])

    test_pixels, test_labels, _ = loaded["test"]
    splits = {
        "train": (loaded["train"][0], loaded["train"][1]),
        "test": (test_pixels[eval_idx], test_labels[eval_idx]),
        "calibration": (test_pixels[cal_idx], test_labels[cal_idx]),
    }

    sources = {}
    for split in ("train", "test"):
        for p in loaded[split][2]:
            sources[p.name] = _sha256_file(p)

    num_classes = int(max(int(splits[s][1].max()) for s in splits)) + 1
    meta = {
        "format_version": CANONICAL_FORMAT_VERSION,
        "dataset_id": dataset_id,
        "source_format": source_format,
        "source_checksums": sources,
        "normalization": {"raw_min": 0, "raw_max": 255, "scale": "1/255"},
        "seed": seed,
        "num_classes": num_classes,
        "calibration_indices": cal_idx.tolist(),
        "counts": {s: int(splits[s][0].shape[0]) for s in splits},
        "image_shape": list(splits["train"][0].shape[1:]),
    }

    tmp = out_dir.with_name(out_dir.name + ".ingest-tmp")
    if tmp.exists():
        import shutil

        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for split, (px, lb) in splits.items():
        np.save(tmp / f"{split}_pixels.npy", np.ascontiguousarray(px, dtype=np.float32))
        np.save(tmp / f"{split}_labels.npy", np.ascontiguousarray(lb, dtype=np.int64))
    with open(tmp / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    if out_dir.exists():
        import shutil

        shutil.rmtree(out_dir)
    tmp.rename(out_dir)
    return meta


def load_meta(data_dir: str | Path) -> dict:
    with open(Path(data_dir) / "meta.json") as f:
        return json.load(f)


def load_split(data_dir: str | Path, split: str) -> CanonicalDataset:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
    data_dir = Path(data_dir)
    meta = load_meta(data_dir)
    pixels = np.load(data_dir / f"{split}_pixels.npy")
    labels = np.load(data_dir / f"{split}_labels.npy")
    return CanonicalDataset(meta["dataset_id"], split, pixels, labels, meta)
