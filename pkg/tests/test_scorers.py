import math

import numpy as np
import pytest

from covsel.coverage import CoverageRecord
from covsel.nn import LayerSpec, TrainConfig, forward, init_model
from covsel.scorers import (
    AutoencoderScorer,
    CoverageNoveltyScorer,
    DensityScorer,
    autoencoder_layers,
    autoencoder_score,
    autoencoder_train,
    compute_hit_counts,
    coverage_novelty_label,
    coverage_novelty_layers,
    coverage_novelty_score,
    coverage_novelty_train,
    density_layers,
    density_score,
    density_train,
    knn_distance_sum,
    load_scorer,
    save_scorer,
)

FAST = TrainConfig(epochs=5, minibatch_size=16)


# ---------------------------------------------------------------- oracles

def scalar_mse(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    return total / len(a)


def brute_knn_sum(values, query, k):
    """Full sort of all distances; keep the k smallest."""
    dists = sorted(abs(v - query) for v in values)
    return sum(dists[:k])


def scalar_rarity_label(hits, counts):
    total = 0.0
    for h, c in zip(hits, counts):
        if h:
            total += 1.0 / (c * math.sqrt(c))
    return total


def random_records(rng, n, num_events):
    return [
        CoverageRecord(test_id=i, hits=rng.random(num_events) < 0.3)
        for i in range(n)
    ]


# ---------------------------------------------------------------- presets

def test_architecture_presets_full_scale():
    assert [s.width for s in autoencoder_layers(265)] == [265, 128, 64, 128, 265]
    assert [s.width for s in density_layers(265, 50)] == [265, 512, 265, 128, 50]
    assert [s.width for s in coverage_novelty_layers(265)] == [265, 265, 128, 64, 1]


def test_architecture_presets_desk_scale():
    assert [s.width for s in autoencoder_layers(64)] == [64, 32, 16, 32, 64]
    assert [s.width for s in density_layers(64, 50)] == [64, 128, 64, 32, 50]
    assert [s.width for s in coverage_novelty_layers(64)] == [64, 64, 32, 16, 1]


def test_preset_activations():
    layers = density_layers(64, 50)
    assert all(s.activation == "leaky_relu" for s in layers[1:-1])
    assert layers[-1].activation == "sigmoid"
    assert coverage_novelty_layers(64)[-1].activation == "identity"


# ---------------------------------------------------------------- autoencoder

def test_autoencoder_score_perfect_reconstruction():
    model = init_model([LayerSpec(2), LayerSpec(2, "identity")], seed=0)
    model.weights[0][:] = np.eye(2)
    assert autoencoder_score(model, np.array([0.3, -1.2])) == 0.0


def test_autoencoder_score_half():
    model = init_model([LayerSpec(2), LayerSpec(2, "identity")], seed=0)
    model.weights[0][:] = 0.0  # output [0, 0]
    assert autoencoder_score(model, np.array([1.0, 0.0])) == 0.5


def test_autoencoder_score_matches_scalar_loop():
    rng = np.random.default_rng(31)
    for _ in range(20):
        model = init_model(autoencoder_layers(6), seed=int(rng.integers(1 << 31)))
        v = rng.normal(size=6)
        out, _ = forward(model, v)
        expected = scalar_mse(v, out)
        assert abs(autoencoder_score(model, v) - expected) < 1e-12


def test_autoencoder_rejects_asymmetric():
    model = init_model([LayerSpec(3), LayerSpec(2, "identity")], seed=0)
    with pytest.raises(ValueError):
        autoencoder_score(model, np.zeros(3))


def test_autoencoder_batch_matches_single():
    rng = np.random.default_rng(5)
    scorer = autoencoder_train(rng.normal(size=(30, 8)), FAST, seed=3)
    x = rng.normal(size=(4, 8))
    batch = scorer.score_batch(x)
    singles = [scorer.score(row) for row in x]
    np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-14)


def test_autoencoder_training_separates_far_probe():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(10, 6))
    cfg = TrainConfig(epochs=800, minibatch_size=10, learning_rate=5e-3)
    scorer = autoencoder_train(data, cfg, seed=1,
                               layers=autoencoder_layers(6)[:1]
                               + [LayerSpec(32, "leaky_relu"),
                                  LayerSpec(32, "leaky_relu"),
                                  LayerSpec(6, "identity")])
    train_scores = scorer.score_batch(data)
    probe = np.full(6, 10.0)
    assert train_scores.max() < scorer.score(probe)


# ---------------------------------------------------------------- knn

def test_knn_hand_example():
    cache = np.array([0.0, 1.0, 2.0, 10.0])
    assert knn_distance_sum(cache, np.array([10.0]), 2)[0] == 8.0


def test_knn_uses_all_when_short():
    cache = np.array([1.0, 2.0])
    assert knn_distance_sum(cache, np.array([0.0]), 5)[0] == 3.0


def test_knn_matches_brute_force():
    rng = np.random.default_rng(7)
    for k in (1, 5, 15):
        for _ in range(10):
            m = int(rng.integers(k + 1, 200))
            cache = np.sort(rng.normal(size=m))
            queries = rng.normal(size=40) * 2
            got = knn_distance_sum(cache, queries, k)
            want = [brute_knn_sum(cache, q, k) for q in queries]
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_knn_duplicates_are_distinct_neighbors():
    cache = np.array([1.0, 1.0, 1.0, 5.0])
    # three duplicate values fill k=3 before the far value is reached
    assert knn_distance_sum(cache, np.array([1.0]), 3)[0] == 0.0


def test_knn_monotone_under_cache_growth():
    rng = np.random.default_rng(8)
    for _ in range(20):
        cache = np.sort(rng.normal(size=30))
        grown = np.sort(np.concatenate([cache, rng.normal(size=10)]))
        queries = rng.normal(size=15)
        before = knn_distance_sum(cache, queries, 5)
        after = knn_distance_sum(grown, queries, 5)
        assert np.all(after <= before + 1e-12)


def test_knn_rejects_bad_k():
    with pytest.raises(ValueError):
        knn_distance_sum(np.array([1.0]), np.array([0.0]), 0)


# ---------------------------------------------------------------- density

def test_density_cache_shape_full_preset():
    rng = np.random.default_rng(9)
    simulated = rng.normal(size=(100, 265))
    records = random_records(rng, 100, 120)
    events = np.arange(50)
    cfg = TrainConfig(loss="bce", epochs=1, minibatch_size=32)
    scorer = density_train(simulated, records, events, cfg, seed=4)
    widths = [c.shape[1] for c in scorer.caches]
    assert widths == [512, 265, 128]
    assert sum(widths) == 905
    assert all(c.shape[0] == 100 for c in scorer.caches)


def test_density_caches_sorted():
    rng = np.random.default_rng(10)
    simulated = rng.normal(size=(40, 8))
    records = random_records(rng, 40, 20)
    scorer = density_train(simulated, records, np.arange(10),
                           TrainConfig(loss="bce", epochs=2), seed=1)
    for cache in scorer.caches:
        assert np.all(np.diff(cache, axis=0) >= 0)


def test_density_fits_constant_zero_event():
    rng = np.random.default_rng(11)
    simulated = rng.normal(size=(30, 6))
    records = []
    for i in range(30):
        hits = rng.random(4) < 0.5
        hits[2] = False  # event 2 never hit
        records.append(CoverageRecord(test_id=i, hits=hits))
    cfg = TrainConfig(loss="bce", epochs=300, minibatch_size=30, learning_rate=1e-2)
    scorer = density_train(simulated, records, np.arange(4), cfg, seed=2)
    from covsel.nn import forward_batch

    out, _ = forward_batch(scorer.model, simulated)
    assert np.all(out[:, 2] < 0.5)


def test_density_score_matches_per_neuron_brute_force():
    rng = np.random.default_rng(12)
    simulated = rng.normal(size=(50, 5))
    records = random_records(rng, 50, 12)
    scorer = density_train(simulated, records, np.arange(6),
                           TrainConfig(loss="bce", epochs=2), seed=3)
    v = rng.normal(size=5)
    from covsel.nn import forward_batch

    _, hidden = forward_batch(scorer.model, v[None, :])
    expected = 0.0
    for cache, acts in zip(scorer.caches, hidden):
        for neuron in range(cache.shape[1]):
            expected += brute_knn_sum(cache[:, neuron], acts[0, neuron], 15)
    assert abs(density_score(scorer, v, 15) - expected) < 1e-9


def test_density_coincident_point_cannot_raise_score():
    rng = np.random.default_rng(13)
    simulated = rng.normal(size=(25, 4))
    records = random_records(rng, 25, 10)
    scorer = density_train(simulated, records, np.arange(5),
                           TrainConfig(loss="bce", epochs=2), seed=5)
    from covsel.nn import forward_batch

    _, hidden_rest = forward_batch(scorer.model, simulated[1:])
    without_first = DensityScorer(
        model=scorer.model,
        caches=tuple(np.sort(h, axis=0) for h in hidden_rest),
        sampled_events=scorer.sampled_events,
        k=scorer.k,
        training_loss=scorer.training_loss,
    )
    v = simulated[0]
    assert scorer.score(v, 5) <= without_first.score(v, 5) + 1e-12


def test_density_requires_alignment():
    rng = np.random.default_rng(14)
    with pytest.raises(ValueError):
        density_train(rng.normal(size=(5, 3)), random_records(rng, 4, 6),
                      np.arange(2), TrainConfig(loss="bce", epochs=1), seed=0)
    with pytest.raises(ValueError):
        density_train(np.empty((0, 3)), [], np.arange(2),
                      TrainConfig(loss="bce", epochs=1), seed=0)


# ---------------------------------------------------------------- coverage novelty

def test_rarity_label_anchors():
    assert coverage_novelty_label(np.zeros(5, dtype=bool), np.ones(5, dtype=int)) == 0.0
    hits = np.array([True])
    assert coverage_novelty_label(hits, np.array([1])) == 1.0
    hits = np.array([True, True])
    label = coverage_novelty_label(hits, np.array([4, 9]))
    assert label == pytest.approx(0.125 + 1.0 / 27.0, abs=1e-15)


def test_rarity_label_matches_scalar_oracle():
    rng = np.random.default_rng(15)
    for _ in range(200):
        e = int(rng.integers(1, 40))
        hits = rng.random(e) < 0.4
        counts = rng.integers(1, 100, size=e)
        assert coverage_novelty_label(hits, counts) == scalar_rarity_label(hits, counts)


def test_rarity_label_decreasing_in_counts():
    hits = np.array([True, False])
    low = coverage_novelty_label(hits, np.array([2, 1]))
    high = coverage_novelty_label(hits, np.array([3, 1]))
    assert high < low


def test_rarity_label_additive():
    h1 = np.array([True, False])
    h2 = np.array([False, True])
    both = np.array([True, True])
    counts = np.array([4, 9])
    total = coverage_novelty_label(h1, counts) + coverage_novelty_label(h2, counts)
    assert coverage_novelty_label(both, counts) == pytest.approx(total, abs=1e-15)


def test_rarity_label_rejects_zero_count_hit():
    with pytest.raises(ValueError):
        coverage_novelty_label(np.array([True]), np.array([0]))


def test_cn_identical_tests_same_label():
    hits = np.array([True, False, False])
    records = [CoverageRecord(0, hits), CoverageRecord(1, hits.copy())]
    counts = compute_hit_counts(records)
    labels = [coverage_novelty_label(r.hits, counts) for r in records]
    assert labels[0] == labels[1] == pytest.approx(1.0 / (2.0 * math.sqrt(2.0)), abs=1e-15)


def test_cn_training_labels_match_oracle_exactly():
    rng = np.random.default_rng(16)
    records = random_records(rng, 30, 25)
    counts = compute_hit_counts(records)
    for r in records:
        assert coverage_novelty_label(r.hits, counts) == scalar_rarity_label(r.hits, counts)


def test_cn_scorer_single_output():
    rng = np.random.default_rng(17)
    simulated = rng.normal(size=(20, 6))
    records = random_records(rng, 20, 15)
    scorer = coverage_novelty_train(simulated, records, FAST, seed=6)
    assert scorer.model.output_width == 1
    assert [s.width for s in scorer.model.layers] == [6, 6, 2, 1, 1]


def test_cn_memorizes_small_set():
    rng = np.random.default_rng(18)
    simulated = rng.normal(size=(5, 4))
    records = random_records(rng, 5, 10)
    counts = compute_hit_counts(records)
    labels = [coverage_novelty_label(r.hits, counts) for r in records]
    cfg = TrainConfig(epochs=3000, minibatch_size=5, learning_rate=1e-2)
    layers = [LayerSpec(4), LayerSpec(32, "leaky_relu"), LayerSpec(32, "leaky_relu"),
              LayerSpec(1, "identity")]
    scorer = coverage_novelty_train(simulated, records, cfg, seed=7, layers=layers)
    for row, label in zip(simulated, labels):
        assert coverage_novelty_score(scorer, row) == pytest.approx(label, abs=0.05)


def test_cn_clamps_negative_output():
    model = init_model([LayerSpec(3), LayerSpec(1, "identity")], seed=0)
    model.weights[0][:] = 0.0
    model.biases[0][:] = -0.2
    scorer = CoverageNoveltyScorer(model=model, hit_counts=np.zeros(1, dtype=np.int64),
                                   training_loss=0.0)
    assert scorer.score(np.zeros(3)) == 0.0


def test_cn_score_is_pure():
    rng = np.random.default_rng(19)
    simulated = rng.normal(size=(10, 4))
    records = random_records(rng, 10, 8)
    scorer = coverage_novelty_train(simulated, records, FAST, seed=8)
    v = rng.normal(size=4)
    assert coverage_novelty_score(scorer, v) == coverage_novelty_score(scorer, v)


# ---------------------------------------------------------------- shared contract

def test_scores_nonnegative_all_scorers():
    rng = np.random.default_rng(20)
    simulated = rng.normal(size=(30, 6))
    records = random_records(rng, 30, 12)
    probes = rng.normal(size=(20, 6)) * 3
    ae = autoencoder_train(simulated, FAST, seed=1)
    ds = density_train(simulated, records, np.arange(6),
                       TrainConfig(loss="bce", epochs=3), seed=2)
    cn = coverage_novelty_train(simulated, records, FAST, seed=3)
    for scorer in (ae, ds, cn):
        assert np.all(scorer.score_batch(probes) >= 0.0)


def test_scorer_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(22)
    simulated = rng.normal(size=(25, 6))
    records = random_records(rng, 25, 12)
    probes = rng.normal(size=(7, 6))
    scorers = [
        autoencoder_train(simulated, FAST, seed=1),
        density_train(simulated, records, np.arange(6),
                      TrainConfig(loss="bce", epochs=3), seed=2),
        coverage_novelty_train(simulated, records, FAST, seed=3),
    ]
    for scorer in scorers:
        path = tmp_path / f"{scorer.kind}.npz"
        save_scorer(scorer, path)
        loaded = load_scorer(path)
        assert loaded.kind == scorer.kind
        np.testing.assert_array_equal(loaded.score_batch(probes), scorer.score_batch(probes))
