"""Synthetic configurable DUT: a seeded test generator plus a deterministic
coverage oracle.

Coverage events are conjunctions of interval predicates over raw feature
codes. Rarity tiers give the pool a long-tailed closure curve: common events
fall to almost any test, rare events only to tests sitting in narrow corners
of the configuration space (often unusual categorical tokens), which is what
rewards selecting dissimilar tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoding import FeatureSchema, RawTest, encode
from .rng import derive_rng

TIER_BANDS = {
    "common": (0.30, 0.60),
    "uncommon": (0.01, 0.05),
    "rare": (0.0005, 0.005),
}

DESK_PRESET = {
    "num_features": 64,
    "num_events": 800,
    "tier_mix": {"common": 0.5, "uncommon": 0.35, "rare": 0.15},
    "pool_size": 20000,
}


class GenerationError(RuntimeError):
    """Event re-draw budget exhausted while building a DUT."""


@dataclass(frozen=True)
class FeatureSpec:
    """One configuration field: either a uniform integer or a skewed token."""

    name: str
    kind: str  # "uniform_int" | "categorical"
    size: int
    probs: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("uniform_int", "categorical"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.size < 2:
            raise ValueError("features need at least 2 distinct values")
        if self.kind == "categorical":
            if self.probs is None or len(self.probs) != self.size:
                raise ValueError("categorical feature needs one probability per token")
        elif self.probs is not None:
            raise ValueError("uniform_int feature takes no probabilities")

    def marginal(self) -> np.ndarray:
        """Probability of each code under the pool generator."""
        if self.kind == "uniform_int":
            return np.full(self.size, 1.0 / self.size)
        return np.asarray(self.probs)


@dataclass(frozen=True)
class Conjunct:
    feature: int
    lo: int
    hi: int  # inclusive code bounds

    def __post_init__(self) -> None:
        if self.hi < self.lo:
            raise ValueError("empty conjunct interval")


@dataclass(frozen=True)
class EventPredicate:
    conjuncts: tuple[Conjunct, ...]
    tier: str

    def __post_init__(self) -> None:
        if not 1 <= len(self.conjuncts):
            raise ValueError("event needs at least one conjunct")
        if self.tier not in TIER_BANDS:
            raise ValueError(f"unknown tier {self.tier!r}")


@dataclass(frozen=True)
class CoverageRecord:
    test_id: int
    hits: np.ndarray  # bool vector, one entry per event


@dataclass(frozen=True)
class SyntheticDut:
    seed: int
    features: tuple[FeatureSpec, ...]
    events: tuple[EventPredicate, ...]

    @property
    def num_features(self) -> int:
        return len(self.features)

    @property
    def num_events(self) -> int:
        return len(self.events)

    def schema(self) -> FeatureSchema:
        names = tuple(f.name for f in self.features)
        categories = {
            f.name: {f"v{c}": c for c in range(f.size)}
            for f in self.features
            if f.kind == "categorical"
        }
        return FeatureSchema(names=names, categories=categories)

    def event_probability(self, event: EventPredicate) -> float:
        """Exact single-test hit probability under the pool generator."""
        p = 1.0
        for c in event.conjuncts:
            marg = self.features[c.feature].marginal()
            p *= float(marg[c.lo : c.hi + 1].sum())
        return p


# ---------------------------------------------------------------- generation

def _draw_features(rng: np.random.Generator, num_features: int) -> tuple[FeatureSpec, ...]:
    specs = []
    for i in range(num_features):
        name = f"f{i:03d}"
        if rng.random() < 0.4:
            size = int(rng.integers(4, 13))
            ratio = rng.uniform(0.45, 0.8)
            weights = ratio ** np.arange(size)
            probs = tuple(weights / weights.sum())
            specs.append(FeatureSpec(name=name, kind="categorical", size=size, probs=probs))
        else:
            size = int(rng.integers(8, 65))
            specs.append(FeatureSpec(name=name, kind="uniform_int", size=size))
    return tuple(specs)


def _interval_near_mass(
    feature: FeatureSpec, target: float, rng: np.random.Generator
) -> tuple[int, int, float]:
    """Code interval whose probability mass is close to ``target``."""
    marg = feature.marginal()
    if feature.kind == "uniform_int":
        length = int(np.clip(round(target * feature.size), 1, feature.size))
        lo = int(rng.integers(0, feature.size - length + 1))
        return lo, lo + length - 1, length / feature.size
    # categorical: grow a run from a random start until the mass reaches target
    lo = int(rng.integers(0, feature.size))
    hi = lo
    mass = marg[lo]
    while mass < target and hi + 1 < feature.size:
        hi += 1
        mass += marg[hi]
    return lo, hi, float(mass)


def _draw_event(
    dut_features: tuple[FeatureSpec, ...],
    tier: str,
    rng: np.random.Generator,
    max_conjuncts: int,
    tries: int = 400,
) -> EventPredicate:
    """Rejection-sample a conjunction whose exact hit probability lands in
    the tier band.

    Conjuncts are drawn greedily, each targeting the mass still needed, so
    most draws land inside the band on the first few tries.
    """
    lo_band, hi_band = TIER_BANDS[tier]
    num_features = len(dut_features)
    for _ in range(tries):
        target = float(np.exp(rng.uniform(np.log(lo_band), np.log(hi_band))))
        if tier == "common":
            count = int(rng.integers(1, min(2, max_conjuncts) + 1))
        else:
            count = int(rng.integers(2, max_conjuncts + 1))
        count = min(count, num_features)
        chosen = rng.choice(num_features, size=count, replace=False)
        conjuncts = []
        achieved = 1.0
        for k, fi in enumerate(chosen):
            remaining = count - k
            per_conjunct = (target / achieved) ** (1.0 / remaining)
            per_conjunct = min(per_conjunct, 1.0)
            lo, hi, mass = _interval_near_mass(dut_features[fi], per_conjunct, rng)
            conjuncts.append(Conjunct(feature=int(fi), lo=lo, hi=hi))
            achieved *= mass
        if lo_band <= achieved <= hi_band:
            return EventPredicate(conjuncts=tuple(conjuncts), tier=tier)
    raise GenerationError(f"could not place a {tier} event within {tries} tries")


def _tier_counts(num_events: int, tier_mix: dict[str, float]) -> dict[str, int]:
    if set(tier_mix) - set(TIER_BANDS):
        raise ValueError(f"unknown tiers: {sorted(set(tier_mix) - set(TIER_BANDS))}")
    total = sum(tier_mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"tier fractions must sum to 1, got {total}")
    counts = {t: int(num_events * f) for t, f in tier_mix.items()}
    # remainder goes to the largest fractional parts
    leftovers = num_events - sum(counts.values())
    order = sorted(tier_mix, key=lambda t: num_events * tier_mix[t] - counts[t], reverse=True)
    for t in order[:leftovers]:
        counts[t] += 1
    return counts


def sample_codes(
    features: tuple[FeatureSpec, ...], count: int, rng: np.random.Generator
) -> np.ndarray:
    """(count, D) integer code matrix drawn from the feature marginals."""
    codes = np.empty((count, len(features)), dtype=np.int64)
    for j, spec in enumerate(features):
        if spec.kind == "uniform_int":
            codes[:, j] = rng.integers(0, spec.size, size=count)
        else:
            codes[:, j] = rng.choice(spec.size, size=count, p=np.asarray(spec.probs))
    return codes


def evaluate_codes(dut: SyntheticDut, codes: np.ndarray) -> np.ndarray:
    """Hit matrix (rows = tests, columns = events) for encoded tests."""
    n = codes.shape[0]
    hits = np.empty((n, dut.num_events), dtype=bool)
    for e, event in enumerate(dut.events):
        h = np.ones(n, dtype=bool)
        for c in event.conjuncts:
            col = codes[:, c.feature]
            h &= (col >= c.lo) & (col <= c.hi)
        hits[:, e] = h
    return hits


def generate_dut(
    seed: int,
    num_features: int,
    num_events: int,
    tier_mix: dict[str, float],
    max_conjuncts: int = 4,
    reference_pool_size: int = 20000,
    redraw_budget: int = 60,
) -> SyntheticDut:
    """Build a seeded DUT whose every event is hit at least once by a
    reference pool of ``reference_pool_size`` seeded random tests."""
    if num_features < 1 or num_events < 1:
        raise ValueError("num_features and num_events must be >= 1")
    counts = _tier_counts(num_events, tier_mix)
    features = _draw_features(derive_rng(seed, 0), num_features)
    event_rng = derive_rng(seed, 1)
    events = []
    for tier in ("common", "uncommon", "rare"):
        for _ in range(counts.get(tier, 0)):
            events.append(_draw_event(features, tier, event_rng, max_conjuncts))

    dut = SyntheticDut(seed=seed, features=features, events=tuple(events))
    ref_codes = sample_codes(features, reference_pool_size, derive_rng(seed, 2))
    hits = evaluate_codes(dut, ref_codes)
    hit_any = hits.any(axis=0)
    for e in np.flatnonzero(~hit_any):
        tier = events[e].tier
        for attempt in range(redraw_budget):
            candidate = _draw_event(features, tier, event_rng, max_conjuncts)
            probe = SyntheticDut(seed=seed, features=features, events=(candidate,))
            if evaluate_codes(probe, ref_codes)[:, 0].any():
                events[e] = candidate
                break
        else:
            raise GenerationError(
                f"event {e} ({tier}) unhittable after {redraw_budget} re-draws"
            )
    return SyntheticDut(seed=seed, features=features, events=tuple(events))


def generate_pool(dut: SyntheticDut, pool_size: int, seed: int) -> list[RawTest]:
    """Draw, shuffle, and number a pool of raw tests for this DUT."""
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    rng = derive_rng(seed, 10)
    codes = sample_codes(dut.features, pool_size, rng)
    codes = codes[rng.permutation(pool_size)]
    raws = []
    for i in range(pool_size):
        fields: dict[str, int | str] = {}
        for j, spec in enumerate(dut.features):
            code = int(codes[i, j])
            fields[spec.name] = f"v{code}" if spec.kind == "categorical" else code
        raws.append(RawTest(test_id=i, fields=fields))
    return raws


def simulate(dut: SyntheticDut, test: RawTest) -> CoverageRecord:
    """Pure coverage oracle: which events does this one test hit."""
    vec = encode(test, dut.schema())
    codes = vec.values.astype(np.int64)[None, :]
    return CoverageRecord(test_id=test.test_id, hits=evaluate_codes(dut, codes)[0])


# ---------------------------------------------------------------- persistence

def dut_to_json(dut: SyntheticDut) -> str:
    return json.dumps(
        {
            "format": "covsel-dut-v1",
            "seed": dut.seed,
            "features": [
                {
                    "name": f.name,
                    "kind": f.kind,
                    "size": f.size,
                    "probs": list(f.probs) if f.probs is not None else None,
                }
                for f in dut.features
            ],
            "events": [
                {
                    "tier": e.tier,
                    "conjuncts": [[c.feature, c.lo, c.hi] for c in e.conjuncts],
                }
                for e in dut.events
            ],
        },
        indent=2,
    )


def dut_from_json(text: str) -> SyntheticDut:
    data = json.loads(text)
    if data.get("format") != "covsel-dut-v1":
        raise ValueError(f"unrecognized DUT format {data.get('format')!r}")
    features = tuple(
        FeatureSpec(
            name=f["name"],
            kind=f["kind"],
            size=f["size"],
            probs=tuple(f["probs"]) if f["probs"] is not None else None,
        )
        for f in data["features"]
    )
    events = tuple(
        EventPredicate(
            conjuncts=tuple(Conjunct(feature=c[0], lo=c[1], hi=c[2]) for c in e["conjuncts"]),
            tier=e["tier"],
        )
        for e in data["events"]
    )
    return SyntheticDut(seed=data["seed"], features=features, events=events)
