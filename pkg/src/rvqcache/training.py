"""Codebook learning from streamed activation vectors.

Stage codebooks are initialized with k-means on the first batch (stage i
clusters the residuals left by stages 1..i-1) and then refined with
exponential-moving-average updates; there is no gradient anywhere because
the upstream model is frozen and the commitment weight is zero.

Every batch is encoded with the codebooks as of batch start, all stages
update synchronously from those assignments, and the derived codebook entry
is always ``sums / (counts + epsilon)``.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .quantizer import (
    GroupingKind,
    QuantizerGeometry,
    ResidualQuantizer,
    _nearest_code,
    channel_permutation,
    decode_groups,
    encode_groups,
    standardize_rows,
)

__all__ = [
    "TrainerConfig",
    "TrainerState",
    "StepRecord",
    "TrainingReport",
    "kmeans_init",
    "init_residual_codebooks",
    "ema_step",
    "train",
]


@dataclass(frozen=True)
class TrainerConfig:
    """Training hyperparameters; defaults follow the reference recipe."""

    decay: float = 0.99
    batch_tokens: int = 4096
    steps: int = 60
    kmeans_iters: int = 8
    epsilon: float = 1e-5
    dead_code_threshold: float = 0.01
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay must be in (0, 1), got {self.decay}")
        if self.batch_tokens < 1:
            raise ValueError(f"batch_tokens must be >= 1, got {self.batch_tokens}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.kmeans_iters < 1:
            raise ValueError(f"kmeans_iters must be >= 1, got {self.kmeans_iters}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.dead_code_threshold < 0:
            raise ValueError(f"dead_code_threshold must be >= 0, got {self.dead_code_threshold}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


@dataclass
class TrainerState:
    """EMA statistics per stage: cluster sizes and embedding sums.

    ``counts`` is (stages, codes) and ``sums`` (stages, codes, code_dim),
    both float32. Codebook entries are always derived as
    ``sums / (counts + epsilon)``.
    """

    counts: np.ndarray
    sums: np.ndarray
    step: int = 0

    @classmethod
    def from_codebooks(cls, codebooks: np.ndarray, counts: np.ndarray, epsilon: float):
        """Seed the statistics so the derived entries equal ``codebooks``."""
        counts = np.asarray(counts, dtype=np.float32)
        sums = codebooks * (counts + np.float32(epsilon))[:, :, None]
        return cls(counts=counts.copy(), sums=sums.astype(np.float32))

    def derived_codebooks(self, epsilon: float) -> np.ndarray:
        return self.sums / (self.counts + np.float32(epsilon))[:, :, None]


@dataclass
class StepRecord:
    """One training step: quantization loss and per-stage diagnostics.

    ``stage_energy`` holds the mean squared residual norm entering each
    stage plus the final value after the last stage; ``utilization`` the
    fraction of codes each stage assigned at least once in the batch.
    """

    step: int
    mse: float
    stage_energy: list[float]
    reseeds: int
    utilization: list[float]

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "mse": self.mse,
            "stage_energy": self.stage_energy,
            "reseeds": self.reseeds,
            "utilization": self.utilization,
        }


@dataclass
class TrainingReport:
    """Per-step loss curve plus the last batch's code-assignment histogram.

    The step-1 loss is measured right after k-means initialization on the
    init batch; later steps measure the fresh batch against the codebooks
    as of batch start, before that step's EMA update.
    """

    records: list[StepRecord] = field(default_factory=list)
    code_histogram: np.ndarray | None = None

    @property
    def final_mse(self) -> float:
        return self.records[-1].mse

    def write_jsonl(self, path) -> None:
        """One structured text record per step."""
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.as_dict()) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrainingReport":
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                raw = json.loads(line)
                records.append(StepRecord(**raw))
        return cls(records=records)


# ---------------------------------------------------------------------------
# k-means initialization
# ---------------------------------------------------------------------------


def _plusplus_seeding(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; falls back to uniform picks once all distances vanish."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float32)
    centers[0] = points[int(rng.integers(n))]
    dist_sq = np.square(points - centers[0]).sum(axis=1).astype(np.float64)
    for i in range(1, k):
        total = dist_sq.sum()
        if total > 0:
            pick = int(rng.choice(n, p=dist_sq / total))
        else:
            pick = int(rng.integers(n))
        centers[i] = points[pick]
        np.minimum(dist_sq, np.square(points - centers[i]).sum(axis=1), out=dist_sq)
    return centers


def _cluster_means(points, labels, k):
    counts = np.bincount(labels, minlength=k)
    sums = np.empty((k, points.shape[1]), dtype=np.float32)
    for col in range(points.shape[1]):
        sums[:, col] = np.bincount(labels, weights=points[:, col], minlength=k)
    return counts, sums


def kmeans_init(
    batch: np.ndarray,
    num_codes: int,
    kmeans_iters: int,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding over one batch of group vectors.

    Empty clusters are reseeded from the points farthest from their assigned
    centroid (distinct points, in decreasing distance order). Returns the
    (num_codes, code_dim) float32 centroid matrix.
    """
    points = np.asarray(batch, dtype=np.float32)
    if points.ndim != 2:
        raise ValueError(f"expected (n, code_dim) group vectors, got shape {points.shape}")
    if points.shape[0] < num_codes:
        raise ValueError(
            f"k-means needs at least {num_codes} vectors, batch has {points.shape[0]}"
        )
    if not np.all(np.isfinite(points)):
        raise ValueError("batch contains non-finite values")
    if rng is None:
        rng = np.random.default_rng(seed)
    centers = _plusplus_seeding(points, num_codes, rng)
    for _ in range(kmeans_iters):
        labels = _nearest_code(points, centers)
        counts, sums = _cluster_means(points, labels, num_codes)
        occupied = counts > 0
        centers[occupied] = sums[occupied] / counts[occupied, None].astype(np.float32)
        empty = np.nonzero(~occupied)[0]
        if empty.size:
            member_dist = np.square(points - centers[labels]).sum(axis=1)
            farthest = np.argsort(-member_dist, kind="stable")[: empty.size]
            centers[empty] = points[farthest]
    return centers


def init_residual_codebooks(
    groups: np.ndarray,
    geometry: QuantizerGeometry,
    grouping: GroupingKind,
    kmeans_iters: int = 8,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> ResidualQuantizer:
    """Sequential per-stage k-means over the residuals of the greedy encode.

    Stage 1 clusters the standardized group vectors themselves; every later
    stage clusters whatever residual the previous stages leave on the same
    batch.
    """
    points = np.asarray(groups, dtype=np.float32)
    if rng is None:
        rng = np.random.default_rng(seed)
    codebooks = np.empty(
        (geometry.num_codebooks, geometry.num_codes, geometry.code_dim), dtype=np.float32
    )
    residual = points.copy()
    for stage in range(geometry.num_codebooks):
        centers = kmeans_init(residual, geometry.num_codes, kmeans_iters, rng=rng)
        codebooks[stage] = centers
        chosen = _nearest_code(residual, centers)
        residual -= centers[chosen]
    return ResidualQuantizer(geometry, grouping, codebooks)


# ---------------------------------------------------------------------------
# EMA updates
# ---------------------------------------------------------------------------


def ema_step(
    state: TrainerState,
    stage_inputs: np.ndarray,
    assignments: np.ndarray,
    decay: float,
    epsilon: float,
    dead_code_threshold: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, int]:
    """Fold one batch of assignments into the EMA state.

    ``stage_inputs`` is (stages, n, code_dim): the residual entering each
    stage for every group vector of the batch; ``assignments`` (n, stages)
    holds the codes those residuals selected. Counts and sums decay toward
    the batch statistics; codes whose count falls below
    ``dead_code_threshold`` are reseeded from a random stage input. Mutates
    ``state`` and returns the newly derived codebooks plus the reseed count.
    """
    stage_inputs = np.asarray(stage_inputs, dtype=np.float32)
    assignments = np.asarray(assignments)
    num_stages, n, _ = stage_inputs.shape
    num_codes = state.counts.shape[1]
    if assignments.shape != (n, num_stages):
        raise ValueError(
            f"assignments shape {assignments.shape} does not match stage inputs "
            f"({(n, num_stages)})"
        )
    if dead_code_threshold > 0 and rng is None:
        raise ValueError("dead-code reseeding needs an rng")
    gamma = np.float32(decay)
    one_minus = np.float32(1.0 - decay)
    reseeds = 0
    for stage in range(num_stages):
        counts, sums = _cluster_means(stage_inputs[stage], assignments[:, stage], num_codes)
        state.counts[stage] = gamma * state.counts[stage] + one_minus * counts.astype(np.float32)
        state.sums[stage] = gamma * state.sums[stage] + one_minus * sums
        dead = np.nonzero(state.counts[stage] < dead_code_threshold)[0]
        for code in dead:
            sample = stage_inputs[stage][int(rng.integers(n))]
            state.counts[stage][code] = 1.0
            state.sums[stage][code] = sample * np.float32(1.0 + epsilon)
            reseeds += 1
    state.step += 1
    return state.derived_codebooks(epsilon).astype(np.float32), reseeds


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _take_batch(stream, limit: int, dim: int) -> np.ndarray:
    rows = list(itertools.islice(stream, limit))
    if not rows:
        return np.empty((0, dim), dtype=np.float32)
    batch = np.asarray(rows, dtype=np.float32)
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ValueError(f"stream yielded vectors of shape {batch.shape[1:]}, expected ({dim},)")
    return batch


def _group_rows(batch: np.ndarray, geometry: QuantizerGeometry, perm: np.ndarray) -> np.ndarray:
    _, scaled = standardize_rows(batch)
    return scaled[:, perm].reshape(-1, geometry.code_dim)


def _encode_with_stages(groups: np.ndarray, codebooks: np.ndarray, workers: int):
    """Greedy encode keeping stage inputs, optionally sliced across threads.

    Rows are independent, so worker count never changes the results.
    """
    if workers <= 1 or groups.shape[0] < 2 * workers:
        return encode_groups(groups, codebooks, want_stage_inputs=True)
    bounds = np.linspace(0, groups.shape[0], workers + 1, dtype=int)
    slices = [groups[bounds[w] : bounds[w + 1]] for w in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda part: encode_groups(part, codebooks, True), slices))
    indices = np.concatenate([p[0] for p in parts], axis=0)
    stage_inputs = np.concatenate([p[1] for p in parts], axis=1)
    residual = np.concatenate([p[2] for p in parts], axis=0)
    return indices, stage_inputs, residual


def _batch_metrics(groups, codebooks, indices, stage_inputs, residual):
    recon = decode_groups(indices, codebooks)
    mse = float(np.mean(np.square(groups - recon)))
    energy = [float(np.mean(np.square(s).sum(axis=1))) for s in stage_inputs]
    energy.append(float(np.mean(np.square(residual).sum(axis=1))))
    num_codes = codebooks.shape[1]
    histogram = np.stack(
        [np.bincount(indices[:, s], minlength=num_codes) for s in range(codebooks.shape[0])]
    )
    utilization = [float(np.count_nonzero(h) / num_codes) for h in histogram]
    return mse, energy, utilization, histogram


def train(
    stream,
    geometry: QuantizerGeometry,
    grouping: GroupingKind,
    config: TrainerConfig,
) -> tuple[ResidualQuantizer, TrainingReport]:
    """Learn a residual quantizer from a stream of activation vectors.

    The first batch initializes the codebooks (k-means per stage); each of
    the remaining ``config.steps - 1`` batches is encoded with the codebooks
    as of batch start and folded in with one synchronous EMA update across
    all stages. The stream must yield at least one full batch; later batches
    may run short, and training stops early if the stream dries up.
    """
    if config.batch_tokens < geometry.num_codes:
        raise ValueError(
            f"batch_tokens ({config.batch_tokens}) must be >= the codebook size "
            f"({geometry.num_codes})"
        )
    rng = np.random.default_rng(config.seed)
    stream = iter(stream)
    perm = channel_permutation(geometry, grouping)
    report = TrainingReport()

    first = _take_batch(stream, config.batch_tokens, geometry.dim)
    if first.shape[0] == 0:
        raise ValueError("activation stream is empty")
    if first.shape[0] < config.batch_tokens:
        raise ValueError(
            f"first batch needs {config.batch_tokens} vectors, stream yielded {first.shape[0]}"
        )
    groups = _group_rows(first, geometry, perm)
    quantizer = init_residual_codebooks(
        groups, geometry, grouping, kmeans_iters=config.kmeans_iters, rng=rng
    )
    codebooks = quantizer.codebooks
    indices, stage_inputs, residual = _encode_with_stages(groups, codebooks, config.workers)
    mse, energy, utilization, histogram = _batch_metrics(
        groups, codebooks, indices, stage_inputs, residual
    )
    state = TrainerState.from_codebooks(codebooks, histogram, config.epsilon)
    report.records.append(StepRecord(1, mse, energy, 0, utilization))
    report.code_histogram = histogram

    for step in range(2, config.steps + 1):
        batch = _take_batch(stream, config.batch_tokens, geometry.dim)
        if batch.shape[0] == 0:
            break
        groups = _group_rows(batch, geometry, perm)
        indices, stage_inputs, residual = _encode_with_stages(groups, codebooks, config.workers)
        mse, energy, utilization, histogram = _batch_metrics(
            groups, codebooks, indices, stage_inputs, residual
        )
        codebooks, reseeds = ema_step(
            state,
            stage_inputs,
            indices,
            decay=config.decay,
            epsilon=config.epsilon,
            dead_code_threshold=config.dead_code_threshold,
            rng=rng,
        )
        report.records.append(StepRecord(step, mse, energy, reseeds, utilization))
        report.code_histogram = histogram

    quantizer = ResidualQuantizer(geometry, grouping, codebooks)
    return quantizer, report
