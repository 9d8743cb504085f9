import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from latentguard.losses import (centroid_distance, class_margin, contrastive_loss,
                                cross_entropy, input_gradient)

from conftest import IdentityEncDec, rand_batch, tiny_conv_model


class ConstantLogits(nn.Module):
    """Logits that carry an input dependency of exactly zero."""

    def __init__(self, values):
        super().__init__()
        self.values = torch.as_tensor(values, dtype=torch.float32)

    def forward(self, x):
        return self.values.expand(x.shape[0], -1) + 0.0 * x.sum()


def test_cross_entropy_uniform_logits_is_log_num_classes():
    logits = torch.zeros(4, 10)
    labels = torch.tensor([0, 3, 7, 9])
    assert cross_entropy(logits, labels).item() == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_perfect_prediction_is_zero():
    logits = torch.full((2, 5), -100.0)
    logits[0, 2] = 100.0
    logits[1, 4] = 100.0
    assert cross_entropy(logits, torch.tensor([2, 4])).item() == pytest.approx(0.0, abs=1e-7)


def test_cross_entropy_is_mean_of_per_sample_losses():
    gen = torch.Generator().manual_seed(5)
    logits = torch.randn(2, 6, generator=gen)
    labels = torch.tensor([1, 4])
    a = cross_entropy(logits[:1], labels[:1]).item()
    b = cross_entropy(logits[1:], labels[1:]).item()
    assert cross_entropy(logits, labels).item() == pytest.approx((a + b) / 2, abs=1e-6)


def test_cross_entropy_decreases_when_true_logit_grows():
    logits = torch.tensor([[0.5, 1.0, -0.3]])
    labels = torch.tensor([0])
    bumped = logits.clone()
    bumped[0, 0] += 0.1
    assert cross_entropy(bumped, labels) < cross_entropy(logits, labels)


@pytest.mark.parametrize("x1,x2,y,expected", [
    ([[1.0, 2.0]], [[1.0, 2.0]], [0.0], 0.0),            # same class, zero distance
    ([[0.0, 0.0]], [[2.0, 0.0]], [1.0], 0.0),            # diff class, D=2 >= m=1
    ([[0.0, 0.0]], [[0.5, 0.0]], [1.0], 0.125),          # diff class, D=0.5, m=1
])
def test_contrastive_hand_values(x1, x2, y, expected):
    loss = contrastive_loss(torch.tensor(x1), torch.tensor(x2), torch.tensor(y))
    assert loss.item() == pytest.approx(expected, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.booleans(),
    st.floats(0.1, 3.0),
)
def test_contrastive_nonnegative_and_zero_conditions(v1, v2, diff, margin):
    x1 = torch.tensor([v1])
    x2 = torch.tensor([v2])
    y = torch.tensor([1.0 if diff else 0.0])
    loss = contrastive_loss(x1, x2, y, margin).item()
    dist = float(torch.dist(x1, x2))
    assert loss >= 0.0
    zero_expected = (not diff and dist == 0.0) or (diff and dist >= margin)
    if zero_expected:
        assert loss == pytest.approx(0.0, abs=1e-9)
    elif not diff:
        assert loss > 0.0
    else:  # diff-class pair strictly inside the margin
        assert loss > 0.0 or dist >= margin - 1e-6


def test_contrastive_requires_positive_margin():
    with pytest.raises(ValueError, match="margin"):
        contrastive_loss(torch.zeros(1, 2), torch.zeros(1, 2), torch.zeros(1), 0.0)


def test_constant_loss_has_zero_input_gradient():
    model = ConstantLogits([[0.3, -0.2, 1.0]])
    x = torch.rand(4, 1, 2, 2)
    grad = input_gradient(model, x, torch.tensor([0, 1, 2, 0]))
    assert torch.equal(grad, torch.zeros_like(x))


def test_input_gradient_matches_closed_form_logistic():
    # single linear layer, 2 classes: dL/dx = W^T (softmax - onehot) / batch
    torch.manual_seed(0)
    lin = nn.Sequential(nn.Flatten(), nn.Linear(4, 2))
    x = torch.rand(3, 1, 2, 2)
    y = torch.tensor([0, 1, 0])
    grad = input_gradient(lin, x, y)
    with torch.no_grad():
        p = torch.softmax(lin(x), dim=1)
        onehot = torch.zeros_like(p).scatter_(1, y.view(-1, 1), 1.0)
        expected = ((p - onehot) @ lin[1].weight / x.shape[0]).reshape(x.shape)
    assert torch.allclose(grad, expected, atol=1e-7)


def _finite_difference(loss_fn, x, h=1e-4):
    grad = torch.zeros_like(x)
    flat = x.flatten()
    gflat = grad.flatten()
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        hi = loss_fn(x)
        flat[i] = orig - h
        lo = loss_fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


@pytest.mark.parametrize("loss_kind", ["cross-entropy", "class-margin"])
def test_input_gradient_matches_central_finite_differences(loss_kind):
    model = tiny_conv_model(side=6).double()
    assert sum(p.numel() for p in model.parameters()) <= 10_000
    batch = rand_batch(2, shape=(1, 6, 6), seed=3)
    x = batch.pixels.double()
    y = batch.labels
    grad = input_gradient(model, x, y, loss_kind)

    def loss_fn(xx):
        logits = model(xx)
        if loss_kind == "cross-entropy":
            return cross_entropy(logits, y).item()
        return torch.relu(class_margin(logits, y)).mean().item()

    fd = _finite_difference(loss_fn, x.clone())
    denom = grad.abs().max().item()
    assert denom > 0
    assert ((grad - fd).abs().max().item() / denom) < 1e-3


def test_input_gradient_centroid_distance_matches_finite_differences():
    model = tiny_conv_model(side=6).double()
    enc = IdentityEncDec(1, model.stage_output_shape(1))
    batch = rand_batch(2, shape=(1, 6, 6), seed=9)
    x = batch.pixels.double()
    cent = torch.zeros(2, enc.latent_dim, dtype=torch.float64)
    grad = input_gradient(model, x, None, "centroid-distance",
                          encoders=[enc], centroids=[cent])

    def loss_fn(xx):
        z = enc.encode(model.run_to(xx, 1))
        return centroid_distance(z, cent).sum().item()

    fd = _finite_difference(loss_fn, x.clone())
    assert ((grad - fd).abs().max().item() / grad.abs().max().item()) < 1e-3


def test_input_gradient_rejects_unknown_kind():
    with pytest.raises(ValueError, match="loss_kind"):
        input_gradient(tiny_conv_model(), torch.rand(1, 1, 8, 8),
                       torch.tensor([0]), "nonsense")


def test_class_margin_sign_tracks_correctness():
    logits = torch.tensor([[2.0, 1.0, 0.0], [0.0, 3.0, 1.0]])
    margins = class_margin(logits, torch.tensor([0, 0]))
    assert margins[0].item() == pytest.approx(1.0)
    assert margins[1].item() == pytest.approx(-3.0)
