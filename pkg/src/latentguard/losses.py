"""Loss functions and gradients with respect to inputs."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

from .data import ImageBatch
from .models import _pixels_of

_D_EPS = 1e-12  # keeps the L2 distance differentiable at zero


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -log softmax probability of the true class."""
    if logits.dim() != 2:
        raise ValueError(f"logits must be (batch, classes), got {tuple(logits.shape)}")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("logits / labels batch mismatch")
    return F.cross_entropy(logits, labels)


def pairwise_l2(x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    """Row-wise L2 distance between two batches of vectors."""
    return torch.sqrt(((x1 - x2) ** 2).sum(dim=1) + _D_EPS)


def contrastive_loss(x1: torch.Tensor, x2: torch.Tensor, y: torch.Tensor,
                     margin: float = 1.0) -> torch.Tensor:
    """Pull same-class embeddings together, push different ones past the margin.

    Mean over the batch of (1-y) * D^2 / 2 + y * max(0, margin - D)^2 / 2 where
    D is the row-wise L2 distance. y=0 marks same-class pairs.
    """
    if x1.shape != x2.shape:
        raise ValueError(f"embedding shapes differ: {tuple(x1.shape)} vs {tuple(x2.shape)}")
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    y = y.to(x1.dtype)
    sq = ((x1 - x2) ** 2).sum(dim=1)
    same_term = 0.5 * (1.0 - y) * sq
    dist = torch.sqrt(sq + _D_EPS)
    diff_term = 0.5 * y * F.relu(margin - dist) ** 2
    return (same_term + diff_term).mean()


def class_margin(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample true-class logit minus the best other logit.

    Non-positive exactly when the sample is not classified to its label
    (modulo argmax tie-breaking at zero).
    """
    true = logits.gather(1, labels.view(-1, 1)).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, labels.view(-1, 1), float("-inf"))
    other = masked.max(dim=1).values
    return true - other


def centroid_distance(latents: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    """Per-sample L2 distance between embeddings and matched centroids."""
    if latents.shape != centroids.shape:
        raise ValueError("latents / centroids shape mismatch")
    return pairwise_l2(latents, centroids)


LOSS_KINDS = ("cross-entropy", "class-margin", "centroid-distance")


def input_gradient(path, x: ImageBatch | torch.Tensor, y: torch.Tensor | None = None,
                   loss_kind: str = "cross-entropy", *,
                   encoders: Sequence | None = None,
                   centroids: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
    """Exact gradient of a scalar loss with respect to the input pixels.

    ``path`` is any callable mapping pixels to logits (a plain classifier, one
    with an encoder-decoder inserted, or an ensemble). For
    ``centroid-distance`` the loss is instead the summed L2 latent distance to
    per-sample centroids over the given encoders; ``path`` must then be the
    underlying classifier whose taps feed the encoders.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    if isinstance(x, ImageBatch) and y is None:
        y = x.labels
    pixels = _pixels_of(x).detach().requires_grad_(True)

    if loss_kind == "centroid-distance":
        if not encoders or centroids is None:
            raise ValueError("centroid-distance needs encoders and centroids")
        from .models import forward_with_taps

        _, acts = forward_with_taps(path, pixels, {e.tap for e in encoders})
        loss = sum(
            centroid_distance(enc.encode(acts[enc.tap]), c).sum()
            for enc, c in zip(encoders, centroids)
        )
    else:
        logits = path(pixels)
        if y is None:
            raise ValueError("labels required")
        if loss_kind == "cross-entropy":
            loss = cross_entropy(logits, y)
        else:
            loss = F.relu(class_margin(logits, y)).mean()

    grad = torch.autograd.grad(loss, pixels, allow_unused=True)[0]
    if grad is None:
        raise ValueError("loss is not differentiable with respect to the input")
    return grad.detach()
