"""Two-phase training.

Phase 1 hardens the classifier by replacing every minibatch with its PGD
perturbation (noisy starts) before the optimizer step. Phase 2 freezes the
classifier and trains, per tapped layer, an encoder-decoder plus an auxiliary
encoder on adversarially perturbed sample pairs: the contrastive loss shapes
the latent space while the cross-entropy of the decoded path keeps it
class-informative. The auxiliary encoder shares the architecture but never the
weights, and is discarded once training ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import torch
import torch.nn.functional as F

from .attacks import AttackConfig, fgsm, pgd
from .data import ImageBatch, PairBatch
from .losses import contrastive_loss, cross_entropy
from .models import (EncoderDecoder, LayeredClassifier, encoder_for,
                     make_latent_encoder, parameter_fingerprint)


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    """Hyperparameters shared by both training phases."""

    epochs: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    adv: AttackConfig | None = None
    adv_mode: str = "pgd"  # pgd | fgsm_mix | none
    fgsm_mix_weight: float = 0.5
    margin: float = 1.0
    pairs_per_epoch: int | None = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.adv_mode not in ("pgd", "fgsm_mix", "none"):
            raise ValueError(f"unknown adv_mode {self.adv_mode!r}")
        if self.adv_mode != "none" and self.adv is None:
            raise ValueError(f"adv_mode {self.adv_mode!r} needs an attack config")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        return self


@dataclass
class EncoderTrainArtifacts:
    """Outcome of phase 2 for one tapped layer.

    Only the encoder-decoder is kept for deployment; the auxiliary encoder is
    retained here so its independence from the encoder can be inspected, but it
    is never persisted.
    """

    encoder_decoder: EncoderDecoder
    auxiliary_encoder: torch.nn.Module
    history: list[dict] = field(default_factory=list)


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{where}: loss became {loss.item()}")


def adversarial_train(model: LayeredClassifier, train: ImageBatch, cfg: TrainConfig,
                      *, seed: int = 0, log=None) -> LayeredClassifier:
    """Train the classifier on attack-perturbed minibatches; returns it frozen."""
    cfg.validate()
    train.validate(model.num_classes)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n = len(train)
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        epoch_loss, batches = 0.0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            xb, yb = train.pixels[idx], train.labels[idx]
            if cfg.adv_mode == "pgd":
                adv = pgd(model, xb, yb, cfg.adv, seed=seed * 1009 + epoch + 1,
                          sample_indices=idx.tolist())
                loss = cross_entropy(model(adv.adversarial.pixels), yb)
            elif cfg.adv_mode == "fgsm_mix":
                adv = fgsm(model, xb, yb, cfg.adv.epsilon)
                w = cfg.fgsm_mix_weight
                loss = w * cross_entropy(model(xb), yb) \
                    + (1.0 - w) * cross_entropy(model(adv.adversarial.pixels), yb)
            else:
                loss = cross_entropy(model(xb), yb)
            _check_finite(loss, f"epoch {epoch} batch {lo // cfg.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            batches += 1
        if log is not None:
            log(f"epoch {epoch}: mean train loss {epoch_loss / max(batches, 1):.4f}")
    return model.freeze()


def make_pairs(pixels: torch.Tensor, labels: torch.Tensor, *, batch_size: int,
               n_pairs: int, generator: torch.Generator,
               with_indices: bool = False) -> Iterator[PairBatch]:
    """Stream pair batches, half same-class (y=0) and half different (y=1).

    Classes are drawn uniformly; a class without two distinct members is never
    asked for a same-class pair. Deterministic given the generator state.
    """
    if batch_size % 2:
        raise ValueError("pair batch size must be even")
    labels_np = labels.numpy()
    classes = sorted(set(labels_np.tolist()))
    by_class = {c: torch.as_tensor((labels_np == c).nonzero()[0]) for c in classes}
    same_ok = [c for c in classes if len(by_class[c]) >= 2]
    if len(same_ok) < 1 or len(classes) < 2:
        raise ValueError("need at least 2 classes and one class with >= 2 samples")

    def draw(limit: int) -> int:
        return int(torch.randint(limit, (1,), generator=generator))

    produced = 0
    while produced < n_pairs:
        b = min(batch_size, n_pairs - produced)
        half = max(b // 2, 1)
        ia, ib, y = [], [], []
        for _ in range(half):  # same-class pairs
            c = same_ok[draw(len(same_ok))]
            members = by_class[c]
            i = draw(len(members))
            j = draw(len(members) - 1)
            j = j + 1 if j >= i else j
            ia.append(int(members[i]))
            ib.append(int(members[j]))
            y.append(0)
        for _ in range(half):  # different-class pairs
            i1 = draw(len(classes))
            i2 = draw(len(classes) - 1)
            if i2 >= i1:
                i2 += 1
            c1, c2 = classes[i1], classes[i2]
            ia.append(int(by_class[c1][draw(len(by_class[c1]))]))
            ib.append(int(by_class[c2][draw(len(by_class[c2]))]))
            y.append(1)
        idx_a = torch.as_tensor(ia, dtype=torch.long)
        idx_b = torch.as_tensor(ib, dtype=torch.long)
        batch = PairBatch(
            ImageBatch(pixels[idx_a], labels[idx_a]),
            ImageBatch(pixels[idx_b], labels[idx_b]),
            torch.as_tensor(y, dtype=torch.float32),
        )
        if with_indices:
            batch.indices = (ia, ib)  # type: ignore[attr-defined]
        yield batch
        produced += 2 * half


def train_encoder(model: LayeredClassifier, tap: int, train: ImageBatch,
                  cfg: TrainConfig, *, latent_dim: int = 10, hidden: int = 128,
                  seed: int = 0, log=None) -> EncoderTrainArtifacts:
    """Train the encoder-decoder (and auxiliary encoder) tapping one layer.

    Every pair member is PGD-perturbed against the frozen classifier, passed
    through layers 1..tap, and split: member A through the encoder, member B
    through the auxiliary encoder. The total loss is the cross-entropy of the
    decoded member-A path plus the contrastive loss between the two latents.
    Classifier parameters are verified bitwise-unchanged.
    """
    cfg.validate()
    train.validate(model.num_classes)
    torch.manual_seed(seed)
    encdec = encoder_for(model, tap, latent_dim, hidden=hidden)
    aux = make_latent_encoder(encdec.activation_shape, latent_dim, hidden)
    frozen_before = parameter_fingerprint(model)

    opt = torch.optim.Adam(list(encdec.parameters()) + list(aux.parameters()), lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    n_pairs = cfg.pairs_per_epoch or max(len(train) // 2, 1)
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        attack_seed = seed * 1009 + epoch + 1
        for batch in make_pairs(train.pixels, train.labels, batch_size=cfg.batch_size,
                                n_pairs=n_pairs, generator=gen, with_indices=True):
            ia, ib = batch.indices  # type: ignore[attr-defined]
            xa, ya = batch.xa.pixels, batch.xa.labels
            xb, yb = batch.xb.pixels, batch.xb.labels
            if cfg.adv_mode != "none" and cfg.adv is not None:
                xa = pgd(model, xa, ya, cfg.adv, seed=attack_seed,
                         sample_indices=ia).adversarial.pixels
                xb = pgd(model, xb, yb, cfg.adv, seed=attack_seed + 1,
                         sample_indices=ib).adversarial.pixels
            act_a = model.run_to(xa, tap)
            act_b = model.run_to(xb, tap)
            za = encdec.encode(act_a)
            zb = aux(act_b)
            j_c = contrastive_loss(za, zb, batch.y, cfg.margin)
            logits = model.run_from(encdec.decode(za), tap)
            j_ce = cross_entropy(logits, ya)
            j_t = j_ce + j_c
            _check_finite(j_t, f"encoder {tap} epoch {epoch}")
            opt.zero_grad()
            j_t.backward()
            opt.step()
            history.append({"j_ce": j_ce.item(), "j_c": j_c.item(), "j_t": j_t.item()})
        if log is not None:
            last = history[-1]
            log(f"encoder {tap} epoch {epoch}: j_ce {last['j_ce']:.4f} "
                f"j_c {last['j_c']:.4f}")

    if parameter_fingerprint(model) != frozen_before:
        raise RuntimeError("classifier parameters changed during encoder training")
    encdec.freeze()
    return EncoderTrainArtifacts(encoder_decoder=encdec, auxiliary_encoder=aux,
                                 history=history)
