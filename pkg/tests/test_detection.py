import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentguard.data import ImageBatch
from latentguard.detection import (DetectionPolicy, Detector, IndexEntry, LatentIndex,
                                   NonconformityProfile, build_index, calibrate,
                                   flag_mask, knn, nonconformity,
                                   percentile_threshold, score, score_batch, verdict)

from conftest import IdentityEncDec, mean_pixel_model, rand_batch, tiny_conv_model


def batch_with_means(means, labels):
    """4x4 images whose mean pixel is exactly the requested value."""
    px = torch.stack([torch.full((1, 4, 4), m) for m in means])
    return ImageBatch(px, torch.as_tensor(labels, dtype=torch.long))


def test_build_index_prunes_exactly_the_misclassified_point():
    # model predicts 1 iff mean pixel > 0.5; one training point is mislabeled
    model = mean_pixel_model([0.5])
    enc = IdentityEncDec(1, model.stage_output_shape(1))
    means = [0.1, 0.2, 0.3, 0.8, 0.9, 0.7]
    labels = [0, 0, 1, 1, 1, 1]  # the 0.3-mean point carries the wrong label
    train = batch_with_means(means, labels)
    index = build_index(model, [enc], train)
    entry = index.entry(1)
    assert entry.retained == len(means) - 1
    assert entry.total_points == len(means)
    assert not np.any(np.isclose(entry.embeddings[:, 0], 0.3))


def test_build_index_keeps_everything_when_model_is_right():
    model = mean_pixel_model([0.5])
    enc = IdentityEncDec(1, model.stage_output_shape(1))
    train = batch_with_means([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    index = build_index(model, [enc], train)
    assert index.entry(1).retained == 4


def test_build_index_repredicts_retained_rows_correctly():
    # pruning property: every retained row re-predicts to its stored label
    torch.manual_seed(0)
    model = tiny_conv_model()
    enc = IdentityEncDec(1, model.stage_output_shape(1))
    train = rand_batch(50, seed=1)
    index = build_index(model, [enc], train)
    entry = index.entry(1)
    logits = model.run_from(enc.decode(torch.from_numpy(entry.embeddings)), 1)
    assert (logits.argmax(1).numpy() == entry.labels).all()


def test_build_index_rejects_empty_result():
    model = mean_pixel_model([0.5])
    enc = IdentityEncDec(1, model.stage_output_shape(1))
    train = batch_with_means([0.9, 0.8], [0, 0])  # all predicted as class 1
    with pytest.raises(ValueError, match="empty"):
        build_index(model, [enc], train)


def test_build_index_warns_on_missing_class():
    model = mean_pixel_model([0.5])
    enc = IdentityEncDec(1, model.stage_output_shape(1))
    train = batch_with_means([0.1, 0.2, 0.8, 0.9], [0, 0, 0, 0])
    messages = []
    build_index(model, [enc], train, log=messages.append)
    assert any("no retained points for classes [1]" in m for m in messages)


def brute_force_knn(embeddings, labels, z, k):
    d = np.linalg.norm(embeddings - z[None, :], axis=1)
    order = np.argsort(d, kind="stable")[:k]
    return labels[order]


def test_knn_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    emb = rng.normal(size=(100, 5)).astype(np.float32)
    labels = rng.integers(0, 7, size=100).astype(np.int64)
    index = LatentIndex()
    index.entries[1] = IndexEntry(1, 5, emb, labels, 100)
    for _ in range(20):
        z = rng.normal(size=5).astype(np.float32)
        assert np.array_equal(knn(index, 1, z, k=10),
                              brute_force_knn(emb, labels, z, 10))


def test_knn_stored_row_is_own_neighbor():
    rng = np.random.default_rng(1)
    emb = rng.normal(size=(30, 4)).astype(np.float32)
    labels = (np.arange(30) % 3).astype(np.int64)
    index = LatentIndex()
    index.entries[1] = IndexEntry(1, 4, emb, labels, 30)
    neigh = knn(index, 1, emb[17], k=5)
    assert labels[17] in neigh


def test_knn_with_exactly_k_rows_returns_all_labels():
    emb = np.eye(4, dtype=np.float32)
    labels = np.array([3, 1, 2, 0], dtype=np.int64)
    index = LatentIndex()
    index.entries[2] = IndexEntry(2, 4, emb, labels, 4)
    assert sorted(knn(index, 2, np.zeros(4, np.float32), k=4).tolist()) == [0, 1, 2, 3]


def test_knn_breaks_distance_ties_by_row_order():
    emb = np.array([[1.0, 0.0], [1.0, 0.0], [5.0, 5.0]], dtype=np.float32)
    labels = np.array([5, 7, 9], dtype=np.int64)
    index = LatentIndex()
    index.entries[1] = IndexEntry(1, 2, emb, labels, 3)
    assert knn(index, 1, np.array([1.0, 0.0], np.float32), k=1).tolist() == [5]
    assert knn(index, 1, np.array([1.0, 0.0], np.float32), k=2).tolist() == [5, 7]


def test_knn_requires_enough_rows():
    index = LatentIndex()
    index.entries[1] = IndexEntry(1, 2, np.zeros((3, 2), np.float32),
                                  np.zeros(3, np.int64), 3)
    with pytest.raises(ValueError, match="need k"):
        knn(index, 1, np.zeros(2, np.float32), k=4)


def test_nonconformity_counts_mismatches():
    assert nonconformity([4] * 10, 4) == 0
    assert nonconformity([4] * 7 + [2] * 3, 4) == 3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=10, max_size=10), st.integers(0, 9))
def test_nonconformity_matches_counting_oracle(labels, j):
    beta = nonconformity(labels, j)
    assert beta == sum(1 for v in labels if v != j)
    assert 0 <= beta <= 10


def _scoring_setup():
    """Mean-pixel model with two identity encoders and a hand-built index."""
    model = mean_pixel_model([0.5])
    encs = [IdentityEncDec(1, model.stage_output_shape(1))]
    # class 0 clusters near mean 0.2, class 1 near mean 0.8
    means = [0.15, 0.2, 0.25, 0.75, 0.8, 0.85]
    labels = [0, 0, 0, 1, 1, 1]
    index = build_index(model, encs, batch_with_means(means, labels))
    return model, encs, index


def test_score_self_points_have_zero_aggregate():
    model, encs, index = _scoring_setup()
    batch = batch_with_means([0.2, 0.8], [0, 1])
    pred, beta, agg = score_batch(model, encs, index, batch.pixels, k=3)
    assert np.array_equal(pred, [0, 1])
    assert np.array_equal(agg, [0, 0])


def test_score_aggregate_within_range_and_sums_betas():
    torch.manual_seed(2)
    model = tiny_conv_model()
    encs = [IdentityEncDec(t, model.stage_output_shape(t)) for t in (1, 2)]
    index = build_index(model, encs, rand_batch(60, seed=3))
    batch = rand_batch(15, seed=4)
    k = 5
    pred, beta, agg = score_batch(model, encs, index, batch.pixels, k=k)
    assert beta.shape == (15, 2)
    assert np.all(beta >= 0) and np.all(beta <= k)
    assert np.array_equal(agg, beta.sum(axis=1))
    assert np.all(agg <= k * len(encs))


def test_score_profiles_match_batch_scoring():
    model, encs, index = _scoring_setup()
    batch = batch_with_means([0.2, 0.5, 0.8], [0, 1, 1])
    profiles = score(model, encs, index, batch, k=3)
    pred, beta, agg = score_batch(model, encs, index, batch.pixels, k=3)
    for i, p in enumerate(profiles):
        assert isinstance(p, NonconformityProfile)
        assert p.predicted_class == pred[i]
        assert p.aggregate == agg[i]
        assert list(p.betas.values()) == beta[i].tolist()


def test_percentile_threshold_examples():
    assert percentile_threshold(np.zeros(100), 0.95) == 0
    assert percentile_threshold(np.arange(10), 0.9) == 8
    assert percentile_threshold(np.arange(10), 1.0) == 9
    with pytest.raises(ValueError):
        percentile_threshold(np.array([]), 0.9)
    with pytest.raises(ValueError):
        percentile_threshold(np.arange(3), 1.5)


def test_calibrate_sets_both_threshold_kinds():
    model, encs, index = _scoring_setup()
    cal = batch_with_means([0.2, 0.25, 0.8, 0.85], [0, 0, 1, 1])
    policy = calibrate(model, encs, index, cal, percentile=0.95, k=3)
    assert policy.aggregate_threshold == 0
    assert policy.encoder_thresholds == {1: 0}
    assert policy.calibration_size == 4
    empty = ImageBatch(torch.zeros(0, 1, 4, 4), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ValueError, match="empty"):
        calibrate(model, encs, index, empty, percentile=0.95, k=3)


def test_verdict_thresholding():
    prof = NonconformityProfile(predicted_class=2, betas={1: 0, 2: 0})
    policy = DetectionPolicy(k=10, mode="aggregate", aggregate_threshold=0)
    assert not verdict(prof, policy).flagged  # aggregate 0 with tau >= 0
    prof2 = NonconformityProfile(predicted_class=2, betas={1: 1, 2: 0})
    assert verdict(prof2, policy).flagged  # aggregate tau+1
    per = DetectionPolicy(k=10, mode="per-encoder",
                          encoder_thresholds={1: 2, 2: 0})
    assert not verdict(NonconformityProfile(0, {1: 2, 2: 0}), per).flagged
    assert verdict(NonconformityProfile(0, {1: 3, 2: 0}), per).flagged


def test_flag_rate_monotone_in_threshold():
    rng = np.random.default_rng(5)
    beta = rng.integers(0, 11, size=(200, 3))
    agg = beta.sum(axis=1)
    rates = []
    for tau in range(0, 31):
        policy = DetectionPolicy(mode="aggregate", aggregate_threshold=tau)
        rates.append(flag_mask(beta, agg, policy, [1, 2, 3]).mean())
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_flag_set_shrinks_pointwise_as_tau_rises():
    rng = np.random.default_rng(6)
    beta = rng.integers(0, 11, size=(100, 2))
    agg = beta.sum(axis=1)
    prev = None
    for tau in range(0, 21):
        policy = DetectionPolicy(mode="aggregate", aggregate_threshold=tau)
        flags = flag_mask(beta, agg, policy, [1, 2])
        if prev is not None:
            assert not np.any(flags & ~prev)  # no new flags appear
        prev = flags


def test_detector_flags_roundtrip():
    model, encs, index = _scoring_setup()
    cal = batch_with_means([0.2, 0.25, 0.8], [0, 0, 1])
    policy = calibrate(model, encs, index, cal, percentile=0.9, k=3)
    det = Detector(model, encs, index, policy)
    pred, flags = det.flags(batch_with_means([0.2, 0.5], [0, 1]).pixels)
    assert pred.shape == flags.shape == (2,)


def test_score_is_deterministic():
    model, encs, index = _scoring_setup()
    pixels = batch_with_means([0.3, 0.6, 0.9], [0, 1, 1]).pixels
    a = score_batch(model, encs, index, pixels, k=3)
    b = score_batch(model, encs, index, pixels, k=3)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
