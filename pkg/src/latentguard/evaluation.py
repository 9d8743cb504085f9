"""Metrics: robustness, true/false positive accounting, ROC AUC, per-layer rows.

All functions are pure over completed attack results and frozen detector
artifacts. An adversarial sample counts as robustly handled when it is either
still classified to its true label or flagged; a false positive is a clean
evaluation sample that gets flagged. Adversarial samples that are correctly
classified yet flagged count toward neither — they are reported separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .attacks import AttackResult
from .data import ImageBatch
from .detection import Detector, flag_mask


@dataclass
class PerLayerRow:
    layer: int
    tp_increase: float
    fp_rate: float


@dataclass
class EvalReport:
    dataset_id: str
    attack_id: str
    attack_params: dict
    base_accuracy: float
    robustness: float
    roc_auc: float
    fp_rate: float
    fp_rate_correct_only: float
    flagged_correct_adversarial: float
    per_layer: list[PerLayerRow] = field(default_factory=list)
    counts: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "dataset_id": self.dataset_id,
            "attack_id": self.attack_id,
            "attack_params": self.attack_params,
            "base_accuracy": self.base_accuracy,
            "robustness": self.robustness,
            "roc_auc": self.roc_auc,
            "fp_rate": self.fp_rate,
            "fp_rate_correct_only": self.fp_rate_correct_only,
            "flagged_correct_adversarial": self.flagged_correct_adversarial,
            "per_layer": [
                {"layer": r.layer, "tp_increase": r.tp_increase, "fp_rate": r.fp_rate}
                for r in self.per_layer
            ],
            "counts": self.counts,
            "metadata": self.metadata,
        }
        return d


def roc_auc(clean_scores, adversarial_scores) -> float:
    """Probability a random positive outscores a random negative, ties at 1/2.

    Computed as the Mann-Whitney rank statistic over the pooled scores.
    """
    neg = np.asarray(clean_scores, dtype=np.float64)
    pos = np.asarray(adversarial_scores, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = rankdata(np.concatenate([pos, neg]))
    r_pos = ranks[: pos.size].sum()
    return float((r_pos - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


def roc_points(clean_scores, adversarial_scores) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) pairs from sweeping the flag threshold over all score values.

    A sample is flagged when its score is strictly above the threshold; the
    sweep runs from +inf (nothing flagged) down through every distinct score.
    """
    neg = np.asarray(clean_scores, dtype=np.float64)
    pos = np.asarray(adversarial_scores, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise ValueError("both score sets must be non-empty")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    fpr = [0.0]
    tpr = [0.0]
    for t in thresholds:
        fpr.append(float((neg >= t).mean()))
        tpr.append(float((pos >= t).mean()))
    return np.asarray(fpr), np.asarray(tpr)


def roc_auc_trapezoid(clean_scores, adversarial_scores) -> float:
    """AUC by trapezoidal integration of the threshold-sweep curve."""
    fpr, tpr = roc_points(clean_scores, adversarial_scores)
    return float(np.trapezoid(tpr, fpr))


def evaluate_robustness(detector: Detector, attack: AttackResult,
                        clean_eval: ImageBatch, *, dataset_id: str = "",
                        attack_id: str = "", attack_params: dict | None = None,
                        with_per_layer: bool = True, precomputed=None) -> EvalReport:
    """Score an attack result and clean evaluation data into one report.

    Per adversarial sample: robust iff classified to the true label or
    flagged. The false-positive rate is measured on the clean evaluation set
    only; ``fp_rate_correct_only`` restricts both numerator and denominator to
    clean samples the classifier predicts correctly. ``precomputed`` may carry
    ((pred, beta, agg) for the adversarial batch, same for the clean batch) to
    avoid re-scoring.
    """
    if len(attack.adversarial) == 0 or len(clean_eval) == 0:
        raise ValueError("attack result and clean evaluation set must be non-empty")

    if precomputed is None:
        precomputed = (detector.score_batch(attack.adversarial.pixels),
                       detector.score_batch(clean_eval.pixels))
    (adv_pred, adv_beta, adv_agg), (clean_pred, clean_beta, clean_agg) = precomputed
    adv_true = attack.adversarial.labels.numpy()
    adv_flag = flag_mask(adv_beta, adv_agg, detector.policy, detector.encoder_ids)

    clean_true = clean_eval.labels.numpy()
    clean_flag = flag_mask(clean_beta, clean_agg, detector.policy, detector.encoder_ids)

    adv_correct = adv_pred == adv_true
    robust = adv_correct | adv_flag
    tp = (~adv_correct) & adv_flag

    clean_correct = clean_pred == clean_true
    n_correct = int(clean_correct.sum())
    fp_rate = float(clean_flag.mean())
    fp_correct_only = (
        float((clean_flag & clean_correct).sum() / n_correct) if n_correct else 0.0
    )

    misclassified = ~adv_correct
    if misclassified.any():
        auc = roc_auc(clean_agg, adv_agg[misclassified])
    else:
        auc = 1.0  # no positives to rank; detector had nothing to catch

    report = EvalReport(
        dataset_id=dataset_id,
        attack_id=attack_id,
        attack_params=attack_params or {},
        base_accuracy=float(adv_correct.mean()),
        robustness=float(robust.mean()),
        roc_auc=auc,
        fp_rate=fp_rate,
        fp_rate_correct_only=fp_correct_only,
        flagged_correct_adversarial=float((adv_correct & adv_flag).mean()),
        counts={
            "adversarial": int(len(attack.adversarial)),
            "clean": int(len(clean_eval)),
            "true_positives": int(tp.sum()),
            "false_positives": int(clean_flag.sum()),
            "clean_correct": n_correct,
            "attack_success": int(attack.success_mask.sum()),
        },
        metadata={
            "detection_mode": detector.policy.mode,
            "k": detector.policy.k,
            "percentile": detector.policy.percentile,
            "aggregate_threshold": int(detector.policy.aggregate_threshold),
            "encoder_thresholds": {str(i): int(t) for i, t in
                                   sorted(detector.policy.encoder_thresholds.items())},
            "roc_positives": "misclassified adversarial samples",
            "roc_negatives": "clean evaluation samples",
            "per_layer_mode": "union of per-encoder thresholds",
        },
    )
    if with_per_layer:
        report.per_layer = per_layer_cumulative(detector, attack, clean_eval,
                                                precomputed=((adv_pred, adv_beta),
                                                             (clean_pred, clean_beta)))
    return report


def per_layer_cumulative(detector: Detector, attack: AttackResult,
                         clean_eval: ImageBatch, *, precomputed=None) -> list[PerLayerRow]:
    """Cumulative detector contribution using only the first 1..m encoders.

    Row m flags with the union of the per-encoder thresholds of encoders
    1..m, so both the true-positive increase over base accuracy and the
    false-positive rate grow monotonically with depth.
    """
    ids = detector.encoder_ids
    if precomputed is None:
        adv_pred, adv_beta, _ = detector.score_batch(attack.adversarial.pixels)
        clean_pred, clean_beta, _ = detector.score_batch(clean_eval.pixels)
    else:
        (adv_pred, adv_beta), (clean_pred, clean_beta) = precomputed
    adv_true = attack.adversarial.labels.numpy()
    misclassified = adv_pred != adv_true
    taus = np.array([detector.policy.encoder_thresholds[i] for i in ids])

    rows = []
    for m in range(1, len(ids) + 1):
        adv_flag = (adv_beta[:, :m] > taus[None, :m]).any(axis=1)
        clean_flag = (clean_beta[:, :m] > taus[None, :m]).any(axis=1)
        rows.append(PerLayerRow(
            layer=ids[m - 1],
            tp_increase=float((misclassified & adv_flag).mean()),
            fp_rate=float(clean_flag.mean()),
        ))
    return rows
