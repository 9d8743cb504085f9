import numpy as np
import pytest
import torch
import torch.nn as nn

from latentguard.models import LayeredClassifier


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


class IdentityEncDec(nn.Module):
    """Encoder-decoder stub whose decode(encode(.)) is the identity."""

    def __init__(self, tap: int, activation_shape: tuple[int, ...]):
        super().__init__()
        self.tap = tap
        self.activation_shape = tuple(activation_shape)
        self.latent_dim = int(np.prod(activation_shape))

    def encode(self, activation):
        return activation.flatten(1)

    def decode(self, latent):
        return latent.reshape(-1, *self.activation_shape)

    def forward(self, activation):
        return self.decode(self.encode(activation))


def tiny_conv_model(num_classes: int = 3, side: int = 8, channels: int = 1,
                    width: int = 2) -> LayeredClassifier:
    """Small differentiable stage stack for gradient and attack tests."""
    stages = [
        nn.Sequential(nn.Conv2d(channels, width, 3, padding=1), nn.Tanh()),
        nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.Tanh(), nn.MaxPool2d(2)),
        nn.Sequential(nn.Flatten(), nn.Linear(width * (side // 2) ** 2, num_classes)),
    ]
    return LayeredClassifier(stages, num_classes, (channels, side, side))


def mean_pixel_model(thresholds: list[float]) -> LayeredClassifier:
    """Classifier whose prediction is the bucket of the mean pixel value.

    Stage 1 averages the image to a single value; the head turns it into
    logits whose argmax is the number of thresholds the mean exceeds. Useful
    for tests that need full control over predictions.
    """
    num_classes = len(thresholds) + 1
    head_in = 1
    head = nn.Sequential(nn.Flatten(), nn.Linear(head_in, num_classes))
    with torch.no_grad():
        # logit_c = scale * (m - t_c) accumulates so argmax counts thresholds
        w = torch.zeros(num_classes, 1)
        b = torch.zeros(num_classes)
        for c in range(num_classes):
            passed = [t for t in thresholds[:c]]
            w[c, 0] = 100.0 * c
            b[c] = -100.0 * sum(passed)
        head[1].weight.copy_(w)
        head[1].bias.copy_(b)
    stages = [nn.AdaptiveAvgPool2d(1), head]
    return LayeredClassifier(stages, num_classes, (1, 4, 4))


def rand_batch(n: int, shape=(1, 8, 8), num_classes: int = 3, seed: int = 0):
    from latentguard.data import ImageBatch

    gen = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand((n, *shape), generator=gen),
                      torch.randint(0, num_classes, (n,), generator=gen))
