"""Adversarial sample crafting.

Covers the single-step signed-gradient attack, iterative projected
signed-gradient descent with Gaussian-noise restarts, an L2
optimization attack, and the adaptive two-phase attack that first fools an
ensemble of defended forward paths and then pushes latent embeddings toward
the centroid of the class each sample is being misclassified to.

Attacks are pure per sample: noise is derived from (seed, sample index,
restart), so results do not depend on how a batch is chunked.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .data import ImageBatch
from .losses import centroid_distance, class_margin
from .models import DefendedPath, _pixels_of, forward_with_taps

LINF_METHODS = ("fgsm", "pgd", "adaptive")
METHODS = LINF_METHODS + ("cw",)


@dataclass
class AttackConfig:
    """Parameters for one attack run; every field maps to a config key."""

    method: str = "pgd"
    epsilon: float = 0.3
    step_size: float = 0.01
    iterations: int = 1
    restarts: int = 1
    cw_weight: float = 1.0
    alpha1: float = 0.01
    alpha2: float = 0.0
    init_noise_sigma: float = 0.0

    def validate(self) -> "AttackConfig":
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if self.cw_weight < 0 or self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("cw_weight, alpha1, alpha2 must be >= 0")
        if self.init_noise_sigma < 0:
            raise ValueError("init_noise_sigma must be >= 0")
        return self


@dataclass
class AttackResult:
    """Adversarial pixels (labels preserved from the source) plus bookkeeping."""

    adversarial: ImageBatch
    success_mask: torch.Tensor
    linf: torch.Tensor
    l2: torch.Tensor
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.adversarial)


def distortions(adv_pixels: torch.Tensor, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    diff = (adv_pixels - pixels).flatten(1)
    return diff.abs().max(dim=1).values, diff.norm(dim=1)


def _labels_of(x, y):
    if y is None:
        if not isinstance(x, ImageBatch):
            raise ValueError("labels required when x is a raw tensor")
        return x.labels
    return y


def _result(model, pixels, adv, labels, extras=None) -> AttackResult:
    with torch.no_grad():
        pred = model(adv).argmax(dim=1)
    linf, l2 = distortions(adv, pixels)
    return AttackResult(ImageBatch(adv, labels.clone()), pred != labels, linf, l2,
                        extras or {})


def fgsm(model, x, y=None, epsilon: float = 0.3) -> AttackResult:
    """Single signed-gradient step of size epsilon, clipped to [0, 1]."""
    from .losses import input_gradient

    labels = _labels_of(x, y)
    pixels = _pixels_of(x).detach()
    grad = input_gradient(model, pixels, labels, "cross-entropy")
    adv = torch.clamp(pixels + epsilon * grad.sign(), 0.0, 1.0)
    return _result(model, pixels, adv, labels)


def _mix_seed(seed: int, sample_index: int, restart: int) -> int:
    h = (seed & 0xFFFFFFFFFFFF) * 1_000_003 + sample_index
    h = (h * 1_000_003 + restart) & 0x7FFFFFFFFFFFFFFF
    return h


def _init_delta(pixels: torch.Tensor, cfg: AttackConfig, seed: int,
                sample_indices: Sequence[int], restart: int) -> torch.Tensor:
    if cfg.init_noise_sigma == 0.0:
        return torch.zeros_like(pixels)
    noise = torch.empty_like(pixels)
    gen = torch.Generator()
    for row, idx in enumerate(sample_indices):
        gen.manual_seed(_mix_seed(seed, int(idx), restart))
        noise[row] = torch.randn(pixels.shape[1:], generator=gen) * cfg.init_noise_sigma
    return torch.clamp(noise, -cfg.epsilon, cfg.epsilon)


def _signed_ascent(eval_fn: Callable, pixels: torch.Tensor, y: torch.Tensor,
                   cfg: AttackConfig, delta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Iterate x <- clip(x + a*sign(grad)) within the epsilon ball and [0, 1].

    ``eval_fn(x)`` returns (per-sample loss, predicted labels). Returns the
    final adversarial pixels with their per-sample loss and predictions.
    """
    for _ in range(cfg.iterations):
        xt = torch.clamp(pixels + delta, 0.0, 1.0).detach().requires_grad_(True)
        loss, _ = eval_fn(xt)
        grad = torch.autograd.grad(loss.sum(), xt)[0]
        delta = torch.clamp(delta + cfg.step_size * grad.sign(), -cfg.epsilon, cfg.epsilon).detach()
    adv = torch.clamp(pixels + delta, 0.0, 1.0)
    with torch.no_grad():
        loss, pred = eval_fn(adv)
    return adv, loss.detach(), pred


def _restarted_attack(eval_fn: Callable, x, y, cfg: AttackConfig, seed: int,
                      sample_indices) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run all restarts, keeping per sample the worst case: any misclassifying
    restart beats any non-misclassifying one, ties resolved by higher loss."""
    labels = _labels_of(x, y)
    pixels = _pixels_of(x).detach()
    if sample_indices is None:
        sample_indices = range(len(labels))
    best_adv = best_loss = best_mis = None
    for restart in range(cfg.restarts):
        delta = _init_delta(pixels, cfg, seed, sample_indices, restart)
        adv, loss, pred = _signed_ascent(eval_fn, pixels, labels, cfg, delta)
        mis = pred != labels
        if best_adv is None:
            best_adv, best_loss, best_mis = adv, loss, mis
            continue
        better = (mis & ~best_mis) | ((mis == best_mis) & (loss > best_loss))
        best_adv = torch.where(better.view(-1, *([1] * (adv.dim() - 1))), adv, best_adv)
        best_loss = torch.where(better, loss, best_loss)
        best_mis = best_mis | mis
    return best_adv, best_loss, best_mis


def _model_eval_fn(model, labels):
    def eval_fn(xt):
        logits = model(xt)
        return F.cross_entropy(logits, labels, reduction="none"), logits.argmax(dim=1)

    return eval_fn


def pgd(model, x, y=None, cfg: AttackConfig | None = None, *, seed: int = 0,
        sample_indices=None) -> AttackResult:
    """Iterative signed-gradient attack with noisy starts and random restarts."""
    cfg = (cfg or AttackConfig(method="pgd")).validate()
    labels = _labels_of(x, y)
    pixels = _pixels_of(x).detach()
    adv, loss, _ = _restarted_attack(_model_eval_fn(model, labels), pixels, labels,
                                     cfg, seed, sample_indices)
    res = _result(model, pixels, adv, labels)
    res.extras["loss"] = loss
    return res


def cw_l2(model, x, y=None, cfg: AttackConfig | None = None) -> AttackResult:
    """L2-minimizing attack: gradient descent on ||delta||^2 + c * hinge(margin).

    The class margin term vanishes once a sample is misclassified, so the
    optimizer then only shrinks the perturbation. Tracks the lowest-distortion
    misclassifying iterate (the start point included) and returns it, falling
    back to the final iterate for samples that never misclassify.
    """
    cfg = (cfg or AttackConfig(method="cw")).validate()
    labels = _labels_of(x, y)
    pixels = _pixels_of(x).detach()
    adv = pixels.clone()
    best = pixels.clone()
    best_l2 = torch.full((len(labels),), float("inf"))
    success = torch.zeros(len(labels), dtype=torch.bool)

    def track(curr: torch.Tensor, pred: torch.Tensor) -> None:
        nonlocal best, best_l2, success
        with torch.no_grad():
            mis = pred != labels
            l2 = (curr - pixels).flatten(1).norm(dim=1)
            upd = mis & (l2 < best_l2)
            best = torch.where(upd.view(-1, *([1] * (curr.dim() - 1))), curr, best)
            best_l2 = torch.where(upd, l2, best_l2)
            success |= mis

    for _ in range(cfg.iterations):
        xt = adv.detach().requires_grad_(True)
        logits = model(xt)
        track(xt.detach(), logits.argmax(dim=1))
        l2sq = ((xt - pixels) ** 2).flatten(1).sum(dim=1)
        obj = l2sq + cfg.cw_weight * F.relu(class_margin(logits, labels))
        grad = torch.autograd.grad(obj.sum(), xt)[0]
        adv = torch.clamp(adv - cfg.step_size * grad, 0.0, 1.0).detach()
    with torch.no_grad():
        track(adv, model(adv).argmax(dim=1))

    out = torch.where(success.view(-1, *([1] * (adv.dim() - 1))), best, adv)
    linf, l2 = distortions(out, pixels)
    return AttackResult(ImageBatch(out, labels.clone()), success, linf, l2)


def defended_paths(model, encoders: Sequence) -> list[DefendedPath]:
    """Ensemble members: the plain classifier plus one insertion per encoder."""
    return [DefendedPath(model)] + [DefendedPath(model, e) for e in encoders]


def ensemble_prediction(paths: Sequence, x) -> torch.Tensor:
    """Elementwise sum of the member softmax outputs."""
    pixels = _pixels_of(x)
    total = None
    for path in paths:
        probs = F.softmax(path(pixels), dim=1)
        if total is None:
            total = probs
        elif probs.shape != total.shape:
            raise ValueError(
                f"ensemble member class count {probs.shape[1]} != {total.shape[1]}"
            )
        else:
            total = total + probs
    if total is None:
        raise ValueError("ensemble needs at least one member")
    return total


def _ensemble_eval_fn(model, encoders, labels):
    members = [e for e in encoders]

    def eval_fn(xt):
        logits = model(xt)
        total = F.softmax(logits, dim=1)
        for enc in members:
            total = total + F.softmax(DefendedPath(model, enc)(xt), dim=1)
        p_true = total.gather(1, labels.view(-1, 1)).squeeze(1)
        loss = -torch.log(p_true.clamp_min(1e-12) / total.sum(dim=1))
        return loss, logits.argmax(dim=1)

    return eval_fn


def ensemble_pgd(model, encoders: Sequence, x, y=None, cfg: AttackConfig | None = None,
                 *, seed: int = 0, sample_indices=None) -> AttackResult:
    """PGD against the summed-softmax ensemble of all defended forward paths.

    Success and restart preference are judged by the plain classifier's
    prediction, which is what the detector's non-conformity uses.
    """
    cfg = (cfg or AttackConfig(method="pgd")).validate()
    labels = _labels_of(x, y)
    pixels = _pixels_of(x).detach()
    adv, loss, _ = _restarted_attack(_ensemble_eval_fn(model, encoders, labels),
                                     pixels, labels, cfg, seed, sample_indices)
    res = _result(model, pixels, adv, labels)
    res.extras["loss"] = loss
    return res


def _centroid_phase(model, encoders, index, pixels, labels, phase1: AttackResult,
                    cfg: AttackConfig) -> AttackResult:
    """Push already-misclassified samples toward their target-class centroids.

    Update: x <- project(x + a1 * grad(CE) - a2 * sum_i grad(latent distance to
    centroid of the misclassified-to class on encoder i)), keeping the last
    misclassifying iterate for samples that fall back to the true class.
    """
    sub = phase1.success_mask.nonzero(as_tuple=True)[0]
    out = phase1.adversarial.pixels.clone()
    if len(sub) == 0:
        return phase1
    x0 = pixels[sub]
    y_true = labels[sub]
    start = phase1.adversarial.pixels[sub]
    with torch.no_grad():
        y_t = model(start).argmax(dim=1)
    cents = [
        torch.stack([index.class_centroid(enc.tap, int(c)) for c in y_t])
        for enc in encoders
    ]
    taps = {enc.tap for enc in encoders}

    best = start.clone()
    delta = (start - x0).clamp(-cfg.epsilon, cfg.epsilon)
    for _ in range(cfg.iterations):
        xt = torch.clamp(x0 + delta, 0.0, 1.0).detach().requires_grad_(True)
        logits, acts = forward_with_taps(model, xt, taps)
        with torch.no_grad():
            mis = logits.argmax(dim=1) != y_true
            best[mis] = xt.detach()[mis]
        ce = F.cross_entropy(logits, y_true, reduction="none")
        dist = sum(
            centroid_distance(enc.encode(acts[enc.tap]), c)
            for enc, c in zip(encoders, cents)
        )
        loss = (cfg.alpha1 * ce - cfg.alpha2 * dist).sum()
        grad = torch.autograd.grad(loss, xt)[0]
        delta = torch.clamp(delta + grad, -cfg.epsilon, cfg.epsilon).detach()
    final = torch.clamp(x0 + delta, 0.0, 1.0)
    with torch.no_grad():
        mis = model(final).argmax(dim=1) != y_true
        best[mis] = final[mis]

    out[sub] = best
    linf, l2 = distortions(out, pixels)
    return AttackResult(ImageBatch(out, labels.clone()), phase1.success_mask.clone(),
                        linf, l2)


def adaptive_attack(model, encoders: Sequence, index, x, y=None,
                    cfg: AttackConfig | None = None, *, seed: int = 0,
                    sample_indices=None) -> AttackResult:
    """Two-phase adaptive attack on the detector.

    Phase 1 is ensemble PGD; samples it fails to misclassify are returned as
    phase 1 left them. With ``alpha2 == 0`` the centroid term vanishes and the
    result is exactly the ensemble PGD output. Otherwise successful samples are
    optimized toward the latent centroids of the class they are being
    misclassified to.
    """
    cfg = (cfg or AttackConfig(method="adaptive")).validate()
    labels = _labels_of(x, y)
    pixels = _pixels_of(x).detach()
    phase1 = ensemble_pgd(model, encoders, pixels, labels, cfg, seed=seed,
                          sample_indices=sample_indices)
    if cfg.alpha2 == 0.0:
        return phase1
    return _centroid_phase(model, encoders, index, pixels, labels, phase1, cfg)


def adaptive_sweep(model, encoders: Sequence, index, x, y=None,
                   cfg: AttackConfig | None = None, alpha2_values: Sequence[float] = (0.0,),
                   *, seed: int = 0, sample_indices=None) -> dict[float, AttackResult]:
    """Run the adaptive attack for several centroid weights, reusing phase 1.

    Equivalent to calling :func:`adaptive_attack` once per weight with the same
    seed; phase 1 is shared because it does not depend on the weight.
    """
    cfg = (cfg or AttackConfig(method="adaptive")).validate()
    labels = _labels_of(x, y)
    pixels = _pixels_of(x).detach()
    phase1 = ensemble_pgd(model, encoders, pixels, labels, cfg, seed=seed,
                          sample_indices=sample_indices)
    out: dict[float, AttackResult] = {}
    for a2 in alpha2_values:
        if a2 == 0.0:
            out[a2] = phase1
        else:
            out[a2] = _centroid_phase(model, encoders, index, pixels, labels, phase1,
                                      replace(cfg, alpha2=a2))
    return out
