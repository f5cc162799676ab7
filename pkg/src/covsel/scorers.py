"""The three novelty scorers.

Each scorer trains on the simulated tests (plus their coverage where needed)
and assigns un-simulated tests a nonnegative novelty score; higher means
more dissimilar to what has already been simulated. Scores from different
scorers are not comparable; only ranks within one scorer and round are used.

* autoencoder: trains to reproduce simulated tests; score is the mean
  squared reconstruction error.
* density: trains to predict per-event hit probabilities, then measures how
  far each hidden neuron's activation sits from its nearest activations over
  the simulated set (1-D k-nearest-neighbour distance sums).
* coverage-novelty: regresses a hit-rarity label computed from the simulated
  coverage, then predicts that label for unseen tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .coverage import CoverageRecord
from .nn import (
    LayerSpec,
    MlpModel,
    TrainConfig,
    forward,
    forward_batch,
    init_model,
    load_model,
    save_model,
    train,
)

SCORER_KINDS = ("autoencoder", "density", "coverage-novelty")

DEFAULT_KNN_K = 15
DEFAULT_SAMPLED_EVENTS = 50


def _pow2_floor(n: int) -> int:
    return 1 << (max(1, n).bit_length() - 1)


def autoencoder_layers(d: int) -> list[LayerSpec]:
    """Symmetric bottleneck, hidden widths halved (snapped to powers of two)."""
    h, q = _pow2_floor(d // 2), _pow2_floor(d // 4)
    widths = [d, h, q, h, d]
    return _hidden_leaky(widths, "identity")


def density_layers(d: int, num_outputs: int) -> list[LayerSpec]:
    """Expand to double width, narrow back down to the sampled events."""
    widths = [d, _pow2_floor(2 * d), d, _pow2_floor(d // 2), num_outputs]
    return _hidden_leaky(widths, "sigmoid")


def coverage_novelty_layers(d: int) -> list[LayerSpec]:
    """Funnel from full width down to the single novelty output."""
    widths = [d, d, _pow2_floor(d // 2), _pow2_floor(d // 4), 1]
    return _hidden_leaky(widths, "identity")


def _hidden_leaky(widths: list[int], output_activation: str) -> list[LayerSpec]:
    layers = [LayerSpec(widths[0])]
    layers += [LayerSpec(w, "leaky_relu") for w in widths[1:-1]]
    layers.append(LayerSpec(widths[-1], output_activation))
    return layers


# ---------------------------------------------------------------- autoencoder

def autoencoder_score(model: MlpModel, v: np.ndarray) -> float:
    """Mean squared reconstruction error of one standardized vector."""
    if model.input_width != model.output_width:
        raise ValueError("autoencoder model must have input width == output width")
    out, _ = forward(model, v)
    diff = np.asarray(v, dtype=float) - out
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class AutoencoderScorer:
    kind = "autoencoder"
    model: MlpModel
    training_loss: float

    def score_batch(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward_batch(self.model, x)
        return np.mean((x - out) ** 2, axis=1)

    def score(self, v: np.ndarray) -> float:
        return autoencoder_score(self.model, v)


def autoencoder_train(
    simulated: np.ndarray,
    cfg: TrainConfig,
    seed: int,
    layers: list[LayerSpec] | None = None,
) -> AutoencoderScorer:
    """Fit the reconstruction model on the standardized simulated set."""
    simulated = np.asarray(simulated, dtype=float)
    if simulated.ndim != 2 or simulated.shape[0] < 1:
        raise ValueError("simulated set must be a nonempty 2-D matrix")
    if layers is None:
        layers = autoencoder_layers(simulated.shape[1])
    model = init_model(layers, seed)
    model, loss = train(model, simulated, simulated, cfg)
    return AutoencoderScorer(model=model, training_loss=loss)


# ---------------------------------------------------------------- density

def knn_distance_sum(sorted_values: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """For each query, the summed absolute distance to its k nearest values
    in a sorted 1-D cache; uses every value when fewer than k are cached.

    The k nearest neighbours of a query in a sorted array always lie within
    the k entries on each side of its insertion point, so a shifted 2k-wide
    window plus a partial sort finds them without scanning the whole cache.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sorted_values = np.asarray(sorted_values, dtype=float)
    queries = np.atleast_1d(np.asarray(queries, dtype=float))
    m = sorted_values.shape[0]
    if m <= k:
        return np.abs(queries[:, None] - sorted_values[None, :]).sum(axis=1)
    window = min(2 * k, m)
    pos = np.searchsorted(sorted_values, queries)
    start = np.clip(pos - k, 0, m - window)
    idx = start[:, None] + np.arange(window)[None, :]
    dist = np.abs(sorted_values[idx] - queries[:, None])
    return np.partition(dist, k - 1, axis=1)[:, :k].sum(axis=1)


@dataclass(frozen=True)
class DensityScorer:
    """Trained correlation model plus, per hidden neuron, the sorted
    activation values it produced over the simulated set."""

    kind = "density"
    model: MlpModel
    caches: tuple[np.ndarray, ...]  # one (n_simulated, width) matrix per hidden layer
    sampled_events: np.ndarray
    k: int
    training_loss: float

    def score_batch(self, x: np.ndarray, k: int | None = None) -> np.ndarray:
        k = self.k if k is None else k
        _, hidden = forward_batch(self.model, x)
        total = np.zeros(x.shape[0])
        for cache, acts in zip(self.caches, hidden):
            for neuron in range(cache.shape[1]):
                total += knn_distance_sum(cache[:, neuron], acts[:, neuron], k)
        return total

    def score(self, v: np.ndarray, k: int | None = None) -> float:
        return float(self.score_batch(np.asarray(v, dtype=float)[None, :], k)[0])


def density_train(
    simulated: np.ndarray,
    coverage: list[CoverageRecord],
    sampled_events: np.ndarray,
    cfg: TrainConfig,
    seed: int,
    layers: list[LayerSpec] | None = None,
    k: int = DEFAULT_KNN_K,
) -> DensityScorer:
    """Train the per-event hit predictor and cache sorted hidden activations.

    Output neurons correspond one-to-one to ``sampled_events``; the target
    for each is whether the individual training test hit that event.
    """
    simulated = np.asarray(simulated, dtype=float)
    if simulated.ndim != 2 or simulated.shape[0] < 1:
        raise ValueError("simulated set must be a nonempty 2-D matrix")
    if len(coverage) != simulated.shape[0]:
        raise ValueError("coverage records must align with simulated vectors")
    sampled_events = np.asarray(sampled_events, dtype=np.int64)
    targets = np.stack([r.hits[sampled_events] for r in coverage]).astype(float)
    if layers is None:
        layers = density_layers(simulated.shape[1], len(sampled_events))
    if layers[-1].width != len(sampled_events):
        raise ValueError("output width must equal the number of sampled events")
    model = init_model(layers, seed)
    model, loss = train(model, simulated, targets, cfg)
    _, hidden = forward_batch(model, simulated)
    caches = tuple(np.sort(h, axis=0) for h in hidden)
    return DensityScorer(
        model=model,
        caches=caches,
        sampled_events=sampled_events,
        k=k,
        training_loss=loss,
    )


def density_score(scorer: DensityScorer, v: np.ndarray, k: int) -> float:
    return scorer.score(v, k)


# ---------------------------------------------------------------- coverage novelty

def compute_hit_counts(coverage: list[CoverageRecord]) -> np.ndarray:
    """Per-event hit tallies over a set of simulated tests."""
    if not coverage:
        raise ValueError("no coverage records")
    return np.sum([r.hits for r in coverage], axis=0).astype(np.int64)


def coverage_novelty_label(hits: np.ndarray, counts: np.ndarray) -> float:
    """Hit-rarity label: each hit event contributes 1/(count*sqrt(count)).

    Rarely-hit events dominate, so a test touching a few barely-covered
    events outscores one touching many saturated events. Accumulated
    left-to-right in event order so recomputations agree bit-for-bit.
    """
    hits = np.asarray(hits)
    counts = np.asarray(counts)
    if hits.shape != counts.shape:
        raise ValueError("hits and counts lengths differ")
    if np.any(counts[hits.astype(bool)] < 1):
        raise ValueError("hit event with zero count: coverage data is inconsistent")
    total = 0.0
    for i in np.flatnonzero(hits):
        c = float(counts[i])
        total += 1.0 / (c * math.sqrt(c))
    return total


@dataclass(frozen=True)
class CoverageNoveltyScorer:
    kind = "coverage-novelty"
    model: MlpModel
    hit_counts: np.ndarray
    training_loss: float

    def score_batch(self, x: np.ndarray) -> np.ndarray:
        out, _ = forward_batch(self.model, x)
        return np.maximum(out[:, 0], 0.0)

    def score(self, v: np.ndarray) -> float:
        return float(self.score_batch(np.asarray(v, dtype=float)[None, :])[0])


def coverage_novelty_train(
    simulated: np.ndarray,
    coverage: list[CoverageRecord],
    cfg: TrainConfig,
    seed: int,
    layers: list[LayerSpec] | None = None,
) -> CoverageNoveltyScorer:
    """Label every simulated test by hit rarity and fit the regression."""
    simulated = np.asarray(simulated, dtype=float)
    if simulated.ndim != 2 or simulated.shape[0] < 1:
        raise ValueError("simulated set must be a nonempty 2-D matrix")
    if len(coverage) != simulated.shape[0]:
        raise ValueError("coverage records must align with simulated vectors")
    counts = compute_hit_counts(coverage)
    labels = np.array(
        [[coverage_novelty_label(r.hits, counts)] for r in coverage]
    )
    if layers is None:
        layers = coverage_novelty_layers(simulated.shape[1])
    if layers[-1].width != 1:
        raise ValueError("coverage-novelty model needs a single output neuron")
    model = init_model(layers, seed)
    model, loss = train(model, simulated, labels, cfg)
    return CoverageNoveltyScorer(model=model, hit_counts=counts, training_loss=loss)


def coverage_novelty_score(scorer: CoverageNoveltyScorer, v: np.ndarray) -> float:
    return scorer.score(v)


# ---------------------------------------------------------------- checkpoints

def save_scorer(scorer, path) -> None:
    """Persist a trained scorer: model checkpoint plus scorer-specific state."""
    meta: dict = {"format": "covsel-scorer-v1", "kind": scorer.kind,
                  "training_loss": scorer.training_loss}
    arrays: dict[str, np.ndarray] = {}
    if scorer.kind == "density":
        meta["k"] = scorer.k
        arrays["sampled_events"] = scorer.sampled_events
        for i, cache in enumerate(scorer.caches):
            arrays[f"cache{i}"] = cache
    elif scorer.kind == "coverage-novelty":
        arrays["hit_counts"] = scorer.hit_counts
    model_meta = {
        "seed": scorer.model.seed,
        "layers": [
            {"width": s.width, "activation": s.activation, "slope": s.slope}
            for s in scorer.model.layers
        ],
    }
    meta["model"] = model_meta
    arrays.update({f"w{i}": w for i, w in enumerate(scorer.model.weights)})
    arrays.update({f"b{i}": b for i, b in enumerate(scorer.model.biases)})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_scorer(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != "covsel-scorer-v1":
            raise ValueError(f"unrecognized scorer format {meta.get('format')!r}")
        layers = [
            LayerSpec(width=s["width"], activation=s["activation"], slope=s["slope"])
            for s in meta["model"]["layers"]
        ]
        model = MlpModel(
            layers=layers,
            weights=[data[f"w{i}"] for i in range(len(layers) - 1)],
            biases=[data[f"b{i}"] for i in range(len(layers) - 1)],
            seed=meta["model"]["seed"],
        )
        kind = meta["kind"]
        if kind == "autoencoder":
            return AutoencoderScorer(model=model, training_loss=meta["training_loss"])
        if kind == "density":
            caches = []
            i = 0
            while f"cache{i}" in data:
                caches.append(data[f"cache{i}"])
                i += 1
            return DensityScorer(
                model=model,
                caches=tuple(caches),
                sampled_events=data["sampled_events"],
                k=meta["k"],
                training_loss=meta["training_loss"],
            )
        if kind == "coverage-novelty":
            return CoverageNoveltyScorer(
                model=model,
                hit_counts=data["hit_counts"],
                training_loss=meta["training_loss"],
            )
    raise ValueError(f"unknown scorer kind {kind!r}")
