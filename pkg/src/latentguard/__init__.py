"""Adversarially trained classifier wrapped with latent-space k-NN detection.

The pieces compose into a pipeline: ingest a dataset, adversarially train the
classifier, train per-layer latent encoders, build pruned k-NN indices of
training embeddings, calibrate non-conformity thresholds on held-out clean
data, attack the result, and report robustness metrics.
"""

from .attacks import (AttackConfig, AttackResult, adaptive_attack, adaptive_sweep,
                      cw_l2, defended_paths, ensemble_pgd, ensemble_prediction,
                      fgsm, pgd)
from .data import CanonicalDataset, ImageBatch, IngestError, PairBatch, ingest, load_split
from .detection import (DetectionPolicy, Detector, LatentIndex, NonconformityProfile,
                        Verdict, build_index, calibrate, knn, nonconformity, score,
                        score_batch, verdict)
from .evaluation import (EvalReport, PerLayerRow, evaluate_robustness,
                         per_layer_cumulative, roc_auc, roc_points)
from .losses import contrastive_loss, cross_entropy, input_gradient
from .models import (DefendedPath, EncoderDecoder, LayeredClassifier, encoder_for,
                     forward, forward_through, forward_with_taps, mnist_classifier,
                     predict, svhn_classifier)
from .training import (EncoderTrainArtifacts, TrainConfig, TrainingDivergedError,
                       adversarial_train, make_pairs, train_encoder)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
