import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from latentguard.attacks import (AttackConfig, _init_delta, _model_eval_fn,
                                 _signed_ascent, adaptive_attack, adaptive_sweep,
                                 cw_l2, defended_paths, ensemble_pgd,
                                 ensemble_prediction, fgsm, pgd)
from latentguard.data import ImageBatch
from latentguard.detection import IndexEntry, LatentIndex, build_index
from latentguard.losses import cross_entropy, input_gradient
from latentguard.models import LayeredClassifier

from conftest import IdentityEncDec, rand_batch, tiny_conv_model


def linear_model(in_side=2, num_classes=2, seed=0):
    torch.manual_seed(seed)
    m = nn.Sequential(nn.Flatten(), nn.Linear(in_side * in_side, num_classes))
    return m


def test_fgsm_zero_epsilon_returns_input_exactly():
    model = tiny_conv_model()
    batch = rand_batch(4)
    res = fgsm(model, batch, epsilon=0.0)
    assert torch.equal(res.adversarial.pixels, batch.pixels)
    assert torch.equal(res.adversarial.labels, batch.labels)


def test_fgsm_sign_matches_closed_form_logistic_gradient():
    # logits = [0, w . x]; for true class 0 the loss gradient w.r.t. x is
    # p1 * w, so the perturbation sign must equal sign(w) wherever w != 0
    class Logistic(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.tensor([[0.7, -1.3], [0.0, 2.1]])

        def forward(self, x):
            z = (x.flatten(1) * self.w.flatten()).sum(dim=1, keepdim=True)
            return torch.cat([torch.zeros_like(z), z], dim=1)

    model = Logistic()
    x = torch.full((1, 1, 2, 2), 0.5)
    res = fgsm(model, x, torch.tensor([0]), epsilon=0.1)
    delta = res.adversarial.pixels - x
    assert torch.equal(delta.sign().flatten(), model.w.sign().flatten())


def test_fgsm_moves_every_nonzero_gradient_coordinate_by_epsilon():
    model = tiny_conv_model()
    batch = rand_batch(6)
    x = batch.pixels * 0.2 + 0.4  # keep away from the box so nothing clips
    grad_sign = input_gradient(model, x, batch.labels).sign()
    res = fgsm(model, ImageBatch(x, batch.labels), epsilon=0.3)
    expected = torch.clamp(x + 0.3 * grad_sign, 0.0, 1.0)
    assert torch.equal(res.adversarial.pixels, expected)
    moved = (res.adversarial.pixels - x).abs()
    nonzero = grad_sign != 0
    assert torch.allclose(moved[nonzero], torch.full_like(moved[nonzero], 0.3),
                          atol=1e-6)


def test_fgsm_equals_single_step_pgd_exactly():
    model = tiny_conv_model()
    batch = rand_batch(8, seed=2)
    eps = 0.25
    a = fgsm(model, batch, epsilon=eps)
    cfg = AttackConfig(method="pgd", epsilon=eps, step_size=eps, iterations=1,
                       restarts=1, init_noise_sigma=0.0)
    b = pgd(model, batch, cfg=cfg)
    assert torch.equal(a.adversarial.pixels, b.adversarial.pixels)


@pytest.mark.parametrize("seed", [0, 7])
@pytest.mark.parametrize("cfg", [
    AttackConfig(method="pgd", epsilon=0.3, step_size=0.05, iterations=5,
                 restarts=2, init_noise_sigma=0.2),
    AttackConfig(method="pgd", epsilon=0.08, step_size=0.1, iterations=3,
                 restarts=1, init_noise_sigma=0.5),
])
def test_linf_attacks_respect_budget_and_box(cfg, seed):
    model = tiny_conv_model()
    batch = rand_batch(10, seed=seed)
    for attack in (
        pgd(model, batch, cfg=cfg, seed=seed),
        fgsm(model, batch, epsilon=cfg.epsilon),
    ):
        px = attack.adversarial.pixels
        assert float(attack.linf.max()) <= cfg.epsilon + 1e-6
        assert float((px - batch.pixels).abs().max()) <= cfg.epsilon + 1e-6
        assert float(px.min()) >= 0.0 and float(px.max()) <= 1.0


def test_pgd_restart_selection_matches_recomputed_oracle():
    model = tiny_conv_model()
    batch = rand_batch(12, seed=4)
    cfg = AttackConfig(method="pgd", epsilon=0.3, step_size=0.06, iterations=4,
                       restarts=5, init_noise_sigma=0.25)
    seed = 11
    res = pgd(model, batch, cfg=cfg, seed=seed)

    eval_fn = _model_eval_fn(model, batch.labels)
    per_restart = []
    for restart in range(cfg.restarts):
        delta = _init_delta(batch.pixels, cfg, seed, range(len(batch)), restart)
        adv, loss, pred = _signed_ascent(eval_fn, batch.pixels, batch.labels, cfg, delta)
        per_restart.append((adv, loss, pred != batch.labels))

    for i in range(len(batch)):
        candidates = [(bool(mis[i]), float(loss[i]), adv[i]) for adv, loss, mis in per_restart]
        best = max(candidates, key=lambda c: (c[0], c[1]))
        assert torch.equal(res.adversarial.pixels[i], best[2])
        # worse-case contract: at least as lossy as every restart of equal status
        for mis, loss_i, _ in candidates:
            if mis == best[0]:
                assert float(res.extras["loss"][i]) >= loss_i - 1e-6


def test_pgd_loss_monotone_when_nothing_clips():
    # convex loss on a linear model, interior start, no projection active
    model = linear_model(in_side=3, seed=1)
    x = torch.full((2, 1, 3, 3), 0.5)
    y = torch.tensor([0, 1])
    losses = []
    for iters in range(1, 6):
        cfg = AttackConfig(method="pgd", epsilon=0.4, step_size=0.01,
                           iterations=iters, restarts=1, init_noise_sigma=0.0)
        adv = pgd(model, ImageBatch(x, y), cfg=cfg).adversarial.pixels
        losses.append(F.cross_entropy(model(adv), y, reduction="none"))
    for prev, curr in zip(losses, losses[1:]):
        assert bool((curr >= prev - 1e-7).all())


def test_cw_zero_weight_keeps_input():
    model = tiny_conv_model()
    batch = rand_batch(4)
    cfg = AttackConfig(method="cw", iterations=50, step_size=0.05, cw_weight=0.0)
    res = cw_l2(model, batch, cfg=cfg)
    assert torch.equal(res.adversarial.pixels, batch.pixels)
    assert float(res.l2.max()) == 0.0


def test_cw_already_misclassified_returns_zero_distortion():
    model = tiny_conv_model()
    batch = rand_batch(10, seed=6)
    with torch.no_grad():
        pred = model(batch.pixels).argmax(1)
    wrong = ImageBatch(batch.pixels, (pred + 1) % model.num_classes)
    cfg = AttackConfig(method="cw", iterations=30, step_size=0.05, cw_weight=1.0)
    res = cw_l2(model, wrong, cfg=cfg)
    assert bool(res.success_mask.all())
    assert float(res.l2.max()) == 0.0


def test_cw_distortion_close_to_hyperplane_distance():
    model = linear_model(in_side=3, seed=3)
    with torch.no_grad():
        w = (model[1].weight[0] - model[1].weight[1])
        b = (model[1].bias[0] - model[1].bias[1])
    x = torch.full((1, 1, 3, 3), 0.5)
    margin = float(x.flatten() @ w + b)
    y = torch.tensor([0 if margin > 0 else 1])
    dist = abs(float(x.flatten() @ w + b)) / float(w.norm())
    cfg = AttackConfig(method="cw", iterations=3000, step_size=0.002, cw_weight=2.0)
    res = cw_l2(model, ImageBatch(x, y), cfg=cfg)
    assert bool(res.success_mask.all())
    assert float(res.l2[0]) <= dist * 1.05
    assert float(res.l2[0]) >= dist * 0.95


def test_cw_returns_lowest_distortion_misclassifying_iterate():
    # the recorded best distortion can never exceed the final iterate's
    model = tiny_conv_model()
    batch = rand_batch(8, seed=8)
    cfg = AttackConfig(method="cw", iterations=150, step_size=0.03, cw_weight=4.0)
    res = cw_l2(model, batch, cfg=cfg)
    with torch.no_grad():
        pred = model(res.adversarial.pixels).argmax(1)
    for i in range(len(batch)):
        if res.success_mask[i]:
            assert pred[i] != batch.labels[i]


def test_ensemble_single_member_matches_member():
    model = tiny_conv_model()
    batch = rand_batch(5)
    probs = ensemble_prediction([model], batch)
    assert torch.allclose(probs, F.softmax(model(batch.pixels), dim=1))
    assert torch.equal(probs.argmax(1), model(batch.pixels).argmax(1))


def test_ensemble_identical_members_scale_probabilities():
    model = tiny_conv_model()
    batch = rand_batch(5)
    one = ensemble_prediction([model], batch)
    three = ensemble_prediction([model, model, model], batch)
    assert torch.allclose(three, 3.0 * one, atol=1e-6)
    assert torch.equal(three.argmax(1), one.argmax(1))


def test_ensemble_rejects_class_count_mismatch():
    m3 = tiny_conv_model(num_classes=3)
    m4 = tiny_conv_model(num_classes=4)
    with pytest.raises(ValueError, match="class count"):
        ensemble_prediction([m3, m4], rand_batch(2))


def _random_index(encoders, num_classes=3, points=40, seed=0):
    rng = np.random.default_rng(seed)
    index = LatentIndex()
    for enc in encoders:
        emb = rng.normal(size=(points, enc.latent_dim)).astype(np.float32)
        labels = rng.integers(0, num_classes, size=points).astype(np.int64)
        index.entries[enc.tap] = IndexEntry(enc.tap, enc.latent_dim, emb, labels, points)
    return index


def test_class_centroid_single_point_and_midpoint():
    enc = IdentityEncDec(1, (2,))
    index = LatentIndex()
    emb = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 0.0]], dtype=np.float32)
    labels = np.array([0, 0, 1], dtype=np.int64)
    index.entries[1] = IndexEntry(1, 2, emb, labels, 3)
    assert torch.allclose(index.class_centroid(1, 1), torch.tensor([0.0, 0.0]))
    assert torch.allclose(index.class_centroid(1, 0), torch.tensor([2.0, 3.0]))
    with pytest.raises(ValueError, match="no points of class"):
        index.class_centroid(1, 2)


def test_class_centroid_matches_brute_force_mean():
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(100, 6)).astype(np.float32)
    labels = rng.integers(0, 4, size=100).astype(np.int64)
    index = LatentIndex()
    index.entries[2] = IndexEntry(2, 6, emb, labels, 100)
    for c in range(4):
        brute = emb[labels == c].mean(axis=0)
        got = index.class_centroid(2, c).numpy()
        assert np.abs(got - brute).max() < 1e-6


def _adaptive_setup(seed=0):
    torch.manual_seed(seed)
    model = tiny_conv_model()
    encoders = [IdentityEncDec(t, model.stage_output_shape(t)) for t in (1, 2)]
    train = rand_batch(60, seed=seed + 1)
    index = build_index(model, encoders, train)
    batch = rand_batch(16, seed=seed + 2)
    return model, encoders, index, batch


def test_adaptive_zero_alpha2_is_bitwise_ensemble_pgd():
    model, encoders, index, batch = _adaptive_setup()
    cfg = AttackConfig(method="adaptive", epsilon=0.3, step_size=0.05, iterations=4,
                       restarts=2, init_noise_sigma=0.2, alpha1=0.01, alpha2=0.0)
    a = adaptive_attack(model, encoders, index, batch, cfg=cfg, seed=5)
    b = ensemble_pgd(model, encoders, batch, cfg=cfg, seed=5)
    assert torch.equal(a.adversarial.pixels, b.adversarial.pixels)
    assert torch.equal(a.success_mask, b.success_mask)


def test_adaptive_phase1_failures_returned_unchanged():
    model, encoders, index, batch = _adaptive_setup(seed=3)
    cfg = AttackConfig(method="adaptive", epsilon=0.01, step_size=0.002,
                       iterations=2, restarts=1, init_noise_sigma=0.0,
                       alpha1=0.01, alpha2=5.0)
    phase1 = ensemble_pgd(model, encoders, batch, cfg=cfg, seed=9)
    res = adaptive_attack(model, encoders, index, batch, cfg=cfg, seed=9)
    unchanged = ~phase1.success_mask
    assert unchanged.any()  # a tiny budget leaves some samples still correct
    assert torch.equal(res.adversarial.pixels[unchanged],
                       phase1.adversarial.pixels[unchanged])


def test_adaptive_respects_linf_budget():
    model, encoders, index, batch = _adaptive_setup(seed=5)
    cfg = AttackConfig(method="adaptive", epsilon=0.3, step_size=0.08, iterations=5,
                       restarts=1, init_noise_sigma=0.2, alpha1=0.05, alpha2=3.0)
    res = adaptive_attack(model, encoders, index, batch, cfg=cfg, seed=2)
    assert float(res.linf.max()) <= cfg.epsilon + 1e-6
    px = res.adversarial.pixels
    assert float(px.min()) >= 0.0 and float(px.max()) <= 1.0


def test_adaptive_sweep_matches_individual_runs_bitwise():
    model, encoders, index, batch = _adaptive_setup(seed=7)
    cfg = AttackConfig(method="adaptive", epsilon=0.3, step_size=0.06, iterations=3,
                       restarts=1, init_noise_sigma=0.15, alpha1=0.02, alpha2=0.0)
    sweep = adaptive_sweep(model, encoders, index, batch, cfg=cfg,
                           alpha2_values=[0.0, 2.0], seed=4)
    for a2 in (0.0, 2.0):
        from dataclasses import replace

        single = adaptive_attack(model, encoders, index, batch,
                                 cfg=replace(cfg, alpha2=a2), seed=4)
        assert torch.equal(sweep[a2].adversarial.pixels, single.adversarial.pixels)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(method="bogus").validate()
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1).validate()
    with pytest.raises(ValueError):
        AttackConfig(iterations=0).validate()


def test_attack_results_keep_source_labels():
    model = tiny_conv_model()
    batch = rand_batch(5, seed=10)
    for res in (fgsm(model, batch, epsilon=0.1),
                pgd(model, batch, cfg=AttackConfig(epsilon=0.1, step_size=0.05,
                                                   iterations=2))):
        assert torch.equal(res.adversarial.labels, batch.labels)
