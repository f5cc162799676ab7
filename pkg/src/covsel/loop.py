"""Selection loop: seed with random tests, then repeatedly retrain a novelty
scorer on everything simulated so far, score the rest of the pool, simulate
the highest-scoring batch, and log coverage.

All randomness is derived statelessly from (seed, round), so a run can be
killed and resumed from its checkpoint without drifting from the
uninterrupted execution.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .coverage import CoverageRecord, SyntheticDut, evaluate_codes
from .encoding import RawTest, encode_pool, fit_standardizer
from .nn import TrainConfig
from .rng import derive_rng, derive_seed
from .scorers import (
    DEFAULT_KNN_K,
    DEFAULT_SAMPLED_EVENTS,
    autoencoder_train,
    coverage_novelty_train,
    density_train,
)

CHECKPOINT_FORMAT = "covsel-checkpoint-v1"

LOOP_SCORER_KINDS = ("autoencoder", "density", "coverage-novelty", "random")

# sampling-seed streams
_STREAM_INITIAL = 0
_STREAM_DENSITY_EVENTS = 1
_STREAM_RANDOM_SCORES = 2
_STREAM_BASELINE = 3


@dataclass(frozen=True)
class LoopSeeds:
    pool: int
    model: int
    sampling: int


@dataclass(frozen=True)
class LoopConfig:
    scorer_kind: str
    target_coverage: float
    seeds: LoopSeeds
    initial_count: int = 100
    batch_size: int = 1000
    max_rounds: int = 1000
    train: TrainConfig = TrainConfig()
    knn_k: int = DEFAULT_KNN_K
    density_events: int = DEFAULT_SAMPLED_EVENTS

    def __post_init__(self) -> None:
        if self.scorer_kind not in LOOP_SCORER_KINDS:
            raise ValueError(f"unknown scorer kind {self.scorer_kind!r}")
        if not 0.0 < self.target_coverage <= 1.0:
            raise ValueError("target_coverage must be in (0, 1]")
        if self.initial_count < 1 or self.batch_size < 1:
            raise ValueError("initial_count and batch_size must be >= 1")
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")


@dataclass
class RoundLog:
    round: int
    selected_ids: list[int]
    cumulative_coverage: float
    training_loss: float
    wall_time: float
    selected_scores: list[float] | None = None


@dataclass
class LoopResult:
    rounds: list[RoundLog]
    simulated_ids: list[int]
    coverage_curve: np.ndarray  # cumulative coverage after each simulated test
    pool_size: int

    def tests_to(self, level: float) -> int | None:
        """Exact number of simulated tests at which coverage first reached
        ``level``, or None if it never did."""
        reached = np.flatnonzero(self.coverage_curve >= level)
        return int(reached[0]) + 1 if reached.size else None


class _PoolState:
    """Precomputed encodings and hit rows for one (pool, dut) pair."""

    def __init__(self, pool: list[RawTest], dut: SyntheticDut):
        if not pool:
            raise ValueError("pool is empty")
        self.ids, matrix = encode_pool(pool, dut.schema())
        self.codes = matrix  # float view of integer codes
        self.hits = evaluate_codes(dut, matrix.astype(np.int64))
        self.num_events = dut.num_events
        self.index_of = {int(t): i for i, t in enumerate(self.ids)}


def _train_scorer(cfg: LoopConfig, round_no: int, x_sim, records, sampled_events):
    seed = derive_seed(cfg.seeds.model, round_no)
    if cfg.scorer_kind == "autoencoder":
        return autoencoder_train(
            x_sim, dataclasses.replace(cfg.train, loss="mse"), seed
        )
    if cfg.scorer_kind == "density":
        return density_train(
            x_sim,
            records,
            sampled_events,
            dataclasses.replace(cfg.train, loss="bce"),
            seed,
            k=cfg.knn_k,
        )
    if cfg.scorer_kind == "coverage-novelty":
        return coverage_novelty_train(
            x_sim, records, dataclasses.replace(cfg.train, loss="mse"), seed
        )
    raise ValueError(f"no trainer for scorer kind {cfg.scorer_kind!r}")


def run_loop(
    pool: list[RawTest],
    dut: SyntheticDut,
    cfg: LoopConfig,
    checkpoint_path=None,
    resume: bool = False,
    scorer_factory=None,
) -> LoopResult:
    """Run the full selection loop; see the module docstring.

    ``scorer_factory(cfg, round_no, x_sim, records, sampled_events)`` can be
    injected to replace the built-in scorers (used by tests and the random
    selector).
    """
    state = _PoolState(pool, dut)
    n = len(state.ids)
    covered = np.zeros(state.num_events, dtype=bool)
    simulated_idx: list[int] = []
    curve: list[float] = []
    rounds: list[RoundLog] = []

    density_events = None
    if cfg.scorer_kind == "density":
        density_events = derive_rng(cfg.seeds.sampling, _STREAM_DENSITY_EVENTS).choice(
            state.num_events, size=min(cfg.density_events, state.num_events), replace=False
        )
        density_events.sort()

    def absorb(batch_idx) -> None:
        for i in batch_idx:
            covered |= state.hits[i]
            curve.append(covered.sum() / state.num_events)
            simulated_idx.append(int(i))

    start_round = 0
    if resume:
        if checkpoint_path is None or not os.path.exists(checkpoint_path):
            raise FileNotFoundError("resume requested but no checkpoint found")
        rounds = _load_checkpoint(checkpoint_path, cfg)
        for log in rounds:
            absorb(state.index_of[t] for t in log.selected_ids)
        start_round = len(rounds)

    if start_round == 0:
        t0 = time.perf_counter()
        order = derive_rng(cfg.seeds.sampling, _STREAM_INITIAL).permutation(n)
        initial = order[: min(cfg.initial_count, n)]
        absorb(initial)
        rounds.append(
            RoundLog(
                round=0,
                selected_ids=[int(state.ids[i]) for i in initial],
                cumulative_coverage=curve[-1],
                training_loss=float("nan"),
                wall_time=time.perf_counter() - t0,
            )
        )
        if checkpoint_path is not None:
            _save_checkpoint(checkpoint_path, cfg, rounds)
        start_round = 1

    round_no = start_round
    while True:
        coverage_now = curve[-1]
        if coverage_now >= cfg.target_coverage:
            break
        if len(simulated_idx) >= n:
            break
        if round_no > cfg.max_rounds:
            break
        t0 = time.perf_counter()
        simulated_set = set(simulated_idx)
        remaining = np.array([i for i in range(n) if i not in simulated_set], dtype=np.int64)
        if remaining.size == 0:
            break

        if cfg.scorer_kind == "random" and scorer_factory is None:
            scores = derive_rng(cfg.seeds.sampling, _STREAM_RANDOM_SCORES, round_no).random(
                remaining.size
            )
            loss = float("nan")
        else:
            x_raw_sim = state.codes[simulated_idx]
            std = fit_standardizer(x_raw_sim)
            x_sim = std.transform(x_raw_sim)
            records = [
                CoverageRecord(test_id=int(state.ids[i]), hits=state.hits[i])
                for i in simulated_idx
            ]
            factory = scorer_factory or _train_scorer
            scorer = factory(cfg, round_no, x_sim, records, density_events)
            x_rem = std.transform(state.codes[remaining])
            scores = np.asarray(scorer.score_batch(x_rem), dtype=float)
            loss = float(getattr(scorer, "training_loss", float("nan")))

        # highest score first; ties broken by lower test id
        order = np.lexsort((state.ids[remaining], -scores))
        batch = remaining[order[: cfg.batch_size]]
        if batch.size == 0:
            raise RuntimeError("selection produced an empty batch with tests remaining")
        batch_scores = scores[order[: cfg.batch_size]]
        absorb(batch)
        rounds.append(
            RoundLog(
                round=round_no,
                selected_ids=[int(state.ids[i]) for i in batch],
                cumulative_coverage=curve[-1],
                training_loss=loss,
                wall_time=time.perf_counter() - t0,
                selected_scores=[float(s) for s in batch_scores],
            )
        )
        if checkpoint_path is not None:
            _save_checkpoint(checkpoint_path, cfg, rounds)
        round_no += 1

    return LoopResult(
        rounds=rounds,
        simulated_ids=[int(state.ids[i]) for i in simulated_idx],
        coverage_curve=np.array(curve),
        pool_size=n,
    )


def run_random_baseline(
    pool: list[RawTest],
    dut: SyntheticDut,
    cfg: LoopConfig,
    repetitions: int,
) -> list[int]:
    """Tests-to-target for seeded random permutations of the pool.

    Each repetition permutes the whole pool, simulates in order, and records
    the position at which target coverage is first reached (pool size + 1 if
    never).
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    counts = baseline_crossings(pool, dut, cfg, repetitions, [cfg.target_coverage])
    return [c[cfg.target_coverage] for c in counts]


def baseline_crossings(
    pool: list[RawTest],
    dut: SyntheticDut,
    cfg: LoopConfig,
    repetitions: int,
    targets: list[float],
    chunk: int = 1024,
) -> list[dict[float, int]]:
    """Per repetition, the first-crossing test count for every target."""
    state = _PoolState(pool, dut)
    n = len(state.ids)
    out: list[dict[float, int]] = []
    thresholds = sorted(targets)
    for rep in range(repetitions):
        perm = derive_rng(cfg.seeds.sampling, _STREAM_BASELINE, rep).permutation(n)
        covered = np.zeros(state.num_events, dtype=bool)
        crossings: dict[float, int] = {}
        pending = list(thresholds)
        position = 0
        while pending and position < n:
            rows = state.hits[perm[position : position + chunk]]
            cum = np.logical_or.accumulate(rows, axis=0)
            cum |= covered
            counts = cum.sum(axis=1) / state.num_events
            for t in list(pending):
                idx = np.flatnonzero(counts >= t)
                if idx.size:
                    crossings[t] = position + int(idx[0]) + 1
                    pending.remove(t)
            covered = cum[-1]
            position += rows.shape[0]
        for t in pending:
            crossings[t] = n + 1
        out.append(crossings)
    return out


def random_coverage_checkpoints(
    pool: list[RawTest],
    dut: SyntheticDut,
    cfg: LoopConfig,
    repetitions: int,
    fractions: list[float],
) -> np.ndarray:
    """Coverage reached at given pool fractions, one row per permutation."""
    state = _PoolState(pool, dut)
    n = len(state.ids)
    marks = [max(1, int(n * f)) for f in fractions]
    rows = np.empty((repetitions, len(marks)))
    for rep in range(repetitions):
        perm = derive_rng(cfg.seeds.sampling, _STREAM_BASELINE, rep).permutation(n)
        covered = np.zeros(state.num_events, dtype=bool)
        position = 0
        for j, mark in enumerate(sorted(marks)):
            while position < mark:
                covered |= state.hits[perm[position]]
                position += 1
            rows[rep, j] = covered.sum() / state.num_events
    return rows


# ---------------------------------------------------------------- checkpoints

def _config_dict(cfg: LoopConfig) -> dict:
    return dataclasses.asdict(cfg)


def _save_checkpoint(path, cfg: LoopConfig, rounds: list[RoundLog]) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": _config_dict(cfg),
        "rounds": [
            {
                "round": log.round,
                "selected_ids": log.selected_ids,
                "cumulative_coverage": log.cumulative_coverage,
                "training_loss": None if np.isnan(log.training_loss) else log.training_loss,
                "wall_time": log.wall_time,
                "selected_scores": log.selected_scores,
            }
            for log in rounds
        ],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)  # atomic: a kill mid-write never corrupts the checkpoint


def _load_checkpoint(path, cfg: LoopConfig) -> list[RoundLog]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"incompatible checkpoint format {payload.get('format')!r}")
    if payload["config"] != _config_dict(cfg):
        raise ValueError("checkpoint was written with a different configuration")
    rounds = []
    for entry in payload["rounds"]:
        rounds.append(
            RoundLog(
                round=entry["round"],
                selected_ids=list(entry["selected_ids"]),
                cumulative_coverage=entry["cumulative_coverage"],
                training_loss=float("nan")
                if entry["training_loss"] is None
                else entry["training_loss"],
                wall_time=entry["wall_time"],
                selected_scores=entry["selected_scores"],
            )
        )
    return rounds


# ---------------------------------------------------------------- csv output

def write_rounds_csv(path, rounds: list[RoundLog]) -> None:
    """Per-round summary. Wall times go to timings.csv so this file is a
    pure function of the configuration."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "selected_count", "cumulative_coverage", "training_loss"])
        for log in rounds:
            writer.writerow(
                [log.round, len(log.selected_ids), log.cumulative_coverage, log.training_loss]
            )


def write_timings_csv(path, rounds: list[RoundLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "wall_time_seconds"])
        for log in rounds:
            writer.writerow([log.round, log.wall_time])


def write_selected_csv(path, rounds: list[RoundLog]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "test_id", "score"])
        for log in rounds:
            scores = log.selected_scores or [float("nan")] * len(log.selected_ids)
            for test_id, score in zip(log.selected_ids, scores):
                writer.writerow([log.round, test_id, score])


def write_coverage_csv(path, result: LoopResult, pool: list[RawTest], dut: SyntheticDut) -> None:
    """Sparse (test_id, event_id) pairs in simulation order."""
    state = _PoolState(pool, dut)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["test_id", "event_id"])
        for test_id in result.simulated_ids:
            row = state.hits[state.index_of[test_id]]
            for event_id in np.flatnonzero(row):
                writer.writerow([test_id, int(event_id)])
