"""Latent-space k-NN non-conformity detection.

Training data is embedded once per encoder into its latent space, pruned to
the points the classifier (with that encoder-decoder inserted) still predicts
correctly, and stored with true labels. A test input is scored per encoder by
how many of its k nearest stored embeddings carry a label different from the
network's prediction; scores are thresholded against levels calibrated on
held-out clean data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import ImageBatch
from .models import DefendedPath, _pixels_of, forward_with_taps

DEFAULT_K = 10
MODES = ("aggregate", "per-encoder")


@dataclass
class IndexEntry:
    """Retained training embeddings for one encoder."""

    encoder_id: int
    latent_dim: int
    embeddings: np.ndarray  # float32 (rows, latent_dim)
    labels: np.ndarray      # int64 (rows,)
    total_points: int

    @property
    def retained(self) -> int:
        return int(self.embeddings.shape[0])


@dataclass
class LatentIndex:
    """Per-encoder pruned stores of training-data embeddings."""

    entries: dict[int, IndexEntry] = field(default_factory=dict)

    @property
    def encoder_ids(self) -> list[int]:
        return sorted(self.entries)

    def entry(self, encoder_id: int) -> IndexEntry:
        if encoder_id not in self.entries:
            raise KeyError(f"no index entry for encoder {encoder_id}")
        return self.entries[encoder_id]

    def class_centroid(self, encoder_id: int, cls: int) -> torch.Tensor:
        """Mean of all stored embeddings of one class."""
        e = self.entry(encoder_id)
        rows = e.embeddings[e.labels == cls]
        if rows.shape[0] == 0:
            raise ValueError(f"encoder {encoder_id} index holds no points of class {cls}")
        return torch.from_numpy(rows.mean(axis=0))


def build_index(model, encoders: Sequence, train: ImageBatch, *,
                batch_size: int = 256, log=None) -> LatentIndex:
    """Embed the training set per encoder, keeping only points the classifier
    with that encoder-decoder inserted predicts correctly."""
    index = LatentIndex()
    n = len(train)
    if n == 0:
        raise ValueError("cannot build an index from an empty training set")
    num_classes = None
    for enc in encoders:
        path = DefendedPath(model, enc)
        embs, labs = [], []
        with torch.no_grad():
            for lo in range(0, n, batch_size):
                px = train.pixels[lo:lo + batch_size]
                lb = train.labels[lo:lo + batch_size]
                logits, latent = path.forward_with_latent(px)
                keep = logits.argmax(dim=1) == lb
                embs.append(latent[keep].numpy().astype(np.float32, copy=False))
                labs.append(lb[keep].numpy().astype(np.int64, copy=False))
                num_classes = logits.shape[1]
        embeddings = np.concatenate(embs, axis=0)
        labels = np.concatenate(labs, axis=0)
        if embeddings.shape[0] == 0:
            raise ValueError(f"encoder {enc.tap}: index would be empty after pruning")
        missing = sorted(set(range(num_classes)) - set(np.unique(labels).tolist()))
        if missing and log is not None:
            log(f"encoder {enc.tap}: no retained points for classes {missing}")
        if log is not None:
            log(f"encoder {enc.tap}: retained {embeddings.shape[0]}/{n} training points")
        index.entries[enc.tap] = IndexEntry(enc.tap, embeddings.shape[1],
                                            embeddings, labels, n)
    return index


def _knn_labels_batch(entry: IndexEntry, z: np.ndarray, k: int) -> np.ndarray:
    """Labels of the k nearest rows per query, L2, ties kept in row order."""
    if entry.retained < k:
        raise ValueError(
            f"encoder {entry.encoder_id}: index has {entry.retained} rows, need k={k}"
        )
    out = np.empty((z.shape[0], k), dtype=np.int64)
    chunk = max(1, (1 << 22) // max(1, entry.retained))
    for lo in range(0, z.shape[0], chunk):
        q = z[lo:lo + chunk]
        d = ((q[:, None, :] - entry.embeddings[None, :, :]) ** 2).sum(axis=2)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[lo:lo + chunk] = entry.labels[order]
    return out


def knn(index: LatentIndex, encoder_id: int, z, k: int = DEFAULT_K) -> np.ndarray:
    """Multiset of labels of the k nearest stored embeddings to ``z``."""
    entry = index.entry(encoder_id)
    z = np.asarray(z, dtype=np.float32)
    single = z.ndim == 1
    labels = _knn_labels_batch(entry, z[None, :] if single else z, k)
    return labels[0] if single else labels


def nonconformity(neighbor_labels, predicted_class: int) -> int:
    """Count of nearby training labels that differ from the predicted class."""
    arr = np.asarray(neighbor_labels)
    return int((arr != predicted_class).sum())


@dataclass
class NonconformityProfile:
    """Per-encoder mismatch counts for one input."""

    predicted_class: int
    betas: dict[int, int]

    @property
    def aggregate(self) -> int:
        return int(sum(self.betas.values()))


@dataclass
class DetectionPolicy:
    """Calibrated thresholds; a score strictly above its threshold flags."""

    k: int = DEFAULT_K
    mode: str = "aggregate"
    percentile: float = 0.98
    aggregate_threshold: int = 0
    encoder_thresholds: dict[int, int] = field(default_factory=dict)
    calibration_size: int = 0

    def validate(self) -> "DetectionPolicy":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.aggregate_threshold < 0 or any(t < 0 for t in self.encoder_thresholds.values()):
            raise ValueError("thresholds must be >= 0")
        return self


@dataclass
class Verdict:
    predicted_class: int
    profile: NonconformityProfile
    flagged: bool


def embed_batch(model, encoders: Sequence, pixels: torch.Tensor) -> dict[int, torch.Tensor]:
    """Latent embeddings per encoder from the plain classifier's taps."""
    _, acts = forward_with_taps(model, pixels, {e.tap for e in encoders})
    return {e.tap: e.encode(acts[e.tap]) for e in encoders}


def score_batch(model, encoders: Sequence, index: LatentIndex, pixels: torch.Tensor,
                *, k: int = DEFAULT_K, batch_size: int = 512
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Predictions, per-encoder betas (n, m) and aggregate scores (n,).

    The prediction comes from the plain classifier; embeddings tap the same
    forward pass, with only the encoder applied (no decoder).
    """
    ids = [e.tap for e in encoders]
    preds, betas = [], []
    with torch.no_grad():
        for lo in range(0, pixels.shape[0], batch_size):
            px = pixels[lo:lo + batch_size]
            logits, acts = forward_with_taps(model, px, set(ids))
            pred = logits.argmax(dim=1).numpy()
            cols = []
            for enc in encoders:
                z = enc.encode(acts[enc.tap]).numpy().astype(np.float32, copy=False)
                neigh = _knn_labels_batch(index.entry(enc.tap), z, k)
                cols.append((neigh != pred[:, None]).sum(axis=1))
            preds.append(pred)
            betas.append(np.stack(cols, axis=1) if cols else np.zeros((len(px), 0), dtype=np.int64))
    pred = np.concatenate(preds)
    beta = np.concatenate(betas).astype(np.int64)
    return pred, beta, beta.sum(axis=1)


def score(model, encoders: Sequence, index: LatentIndex, x: ImageBatch | torch.Tensor,
          *, k: int = DEFAULT_K) -> list[NonconformityProfile]:
    """Non-conformity profiles for a batch of inputs."""
    pixels = _pixels_of(x)
    pred, beta, _ = score_batch(model, encoders, index, pixels, k=k)
    ids = [e.tap for e in encoders]
    return [
        NonconformityProfile(int(p), {i: int(b) for i, b in zip(ids, row)})
        for p, row in zip(pred, beta)
    ]


def percentile_threshold(scores, p: float) -> int:
    """Smallest t such that the fraction of scores <= t is at least p."""
    arr = np.sort(np.asarray(scores))
    if arr.size == 0:
        raise ValueError("cannot calibrate on an empty score set")
    if not 0 < p <= 1:
        raise ValueError(f"percentile must lie in (0, 1], got {p}")
    idx = int(np.ceil(p * arr.size)) - 1
    return int(arr[max(idx, 0)])


def calibrate(model, encoders: Sequence, index: LatentIndex, calibration: ImageBatch,
              *, percentile: float = 0.98, k: int = DEFAULT_K,
              mode: str = "aggregate") -> DetectionPolicy:
    """Set thresholds from clean calibration scores at the given percentile.

    Both the aggregate threshold and the per-encoder thresholds are computed so
    either detection mode can be applied afterwards.
    """
    if len(calibration) == 0:
        raise ValueError("cannot calibrate on an empty calibration set")
    _, beta, agg = score_batch(model, encoders, index, calibration.pixels, k=k)
    ids = [e.tap for e in encoders]
    policy = DetectionPolicy(
        k=k, mode=mode, percentile=percentile,
        aggregate_threshold=percentile_threshold(agg, percentile),
        encoder_thresholds={i: percentile_threshold(beta[:, col], percentile)
                            for col, i in enumerate(ids)},
        calibration_size=len(calibration),
    )
    return policy.validate()


def flag_mask(beta: np.ndarray, aggregate: np.ndarray, policy: DetectionPolicy,
              encoder_ids: Sequence[int]) -> np.ndarray:
    """Vectorized flagging for scored batches under the policy's mode."""
    policy.validate()
    if policy.mode == "aggregate":
        return aggregate > policy.aggregate_threshold
    taus = np.array([policy.encoder_thresholds[i] for i in encoder_ids])
    if beta.shape[1] == 0:
        return np.zeros(beta.shape[0], dtype=bool)
    return (beta > taus[None, :]).any(axis=1)


def verdict(profile: NonconformityProfile, policy: DetectionPolicy) -> Verdict:
    """Flag when the profile's score exceeds the calibrated threshold."""
    policy.validate()
    if policy.mode == "aggregate":
        flagged = profile.aggregate > policy.aggregate_threshold
    else:
        flagged = any(
            b > policy.encoder_thresholds[i] for i, b in profile.betas.items()
        )
    return Verdict(profile.predicted_class, profile, bool(flagged))


@dataclass
class Detector:
    """Frozen classifier + encoders + index + policy, ready to score inputs."""

    model: object
    encoders: list
    index: LatentIndex
    policy: DetectionPolicy

    @property
    def encoder_ids(self) -> list[int]:
        return [e.tap for e in self.encoders]

    def score_batch(self, pixels: torch.Tensor) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return score_batch(self.model, self.encoders, self.index, pixels,
                           k=self.policy.k)

    def flags(self, pixels: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        """(predicted classes, flagged mask) for a batch."""
        pred, beta, agg = self.score_batch(pixels)
        return pred, flag_mask(beta, agg, self.policy, self.encoder_ids)
