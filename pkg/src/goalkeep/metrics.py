"""Evaluation mathematics for goal forecasting under continual learning.

Covers goal extraction from heatmaps, final displacement error (FDE), the
miss rate (MR) with its speed-dependent longitudinal threshold, the
task-by-task error matrix, and the backward-transfer (BWT) aggregate that
quantifies forgetting.

Task indices in ``bwt``/``averages`` are 1-based counts of completed
tasks, matching the usual presentation of the error matrix R where
R[i][j] is the error on task j after training through task i.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .model import Array, Heatmap, HeatmapPredictor, Sample

LATERAL_LIMIT = 2.0      # metres, full box width across the heading
SPEED_LOW = 1.4          # m/s, below which the longitudinal threshold is 1 m
SPEED_HIGH = 11.0        # m/s, above which the longitudinal threshold is 2 m


@dataclass(frozen=True)
class GoalSet:
    """K predicted goal positions, ordered by descending probability."""

    positions: Array    # (K, 2) metres

    def __post_init__(self):
        p = np.asarray(self.positions)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] != 2:
            raise InputError(f"positions must be (K>=1, 2), got {p.shape}")

    @property
    def k(self) -> int:
        return self.positions.shape[0]


def topk_cells(probs: Array, k: int) -> Array:
    """Indices of the k most probable cells per row, ties by lower index.

    ``probs`` is (n, C); the result is (n, k). A stable descending sort
    keeps row-major cell order among exact ties.
    """
    if k < 1 or k > probs.shape[-1]:
        raise ConfigurationError(
            f"k must be in [1, {probs.shape[-1]}], got {k}")
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def extract_goals(h: Heatmap, k: int, rng: np.random.Generator | None = None) -> GoalSet:
    """Centers of the k highest-probability cells, deterministic.

    With ``rng`` given, cells are instead sampled (with replacement)
    proportionally to their mass and then ordered by descending
    probability; the default deterministic mode keeps evaluation
    variance-free.
    """
    h.validate()
    flat = h.flat()
    if rng is None:
        idx = topk_cells(flat[None, :], k)[0]
    else:
        if k > flat.size:
            raise ConfigurationError(f"k must be in [1, {flat.size}], got {k}")
        p = np.maximum(flat, 0)
        drawn = rng.choice(flat.size, size=k, replace=True, p=p / p.sum())
        drawn = drawn[np.argsort(-flat[drawn], kind="stable")]
        idx = drawn
    return GoalSet(positions=h.cell_centers()[idx])


def fde(goals: GoalSet | Array, truth: Array) -> float:
    """Minimum Euclidean distance from any predicted goal to the truth."""
    pos = goals.positions if isinstance(goals, GoalSet) else np.atleast_2d(goals)
    truth = np.asarray(truth, dtype=np.float64)
    return float(np.linalg.norm(pos - truth, axis=1).min())


def mr_threshold(v: float) -> float:
    """Longitudinal miss threshold in metres as a function of speed."""
    if v < 0:
        raise InputError(f"speed must be >= 0, got {v}")
    if v < SPEED_LOW:
        return 1.0
    if v <= SPEED_HIGH:
        return 1.0 + (v - SPEED_LOW) / (SPEED_HIGH - SPEED_LOW)
    return 2.0


def miss(goal: Array, truth: Array, heading: Array, v: float) -> bool:
    """Whether a predicted goal falls outside the box around the truth.

    The box is axis-aligned to ``heading``: half-width 1 m laterally and
    mr_threshold(v) longitudinally.
    """
    h = np.asarray(heading, dtype=np.float64)
    norm = np.linalg.norm(h)
    if norm < 1e-12:
        raise InputError("heading must be a nonzero vector")
    h = h / norm
    d = np.asarray(goal, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    lon = d @ h
    lat = d @ np.array([-h[1], h[0]])
    return bool(abs(lat) > LATERAL_LIMIT / 2 or abs(lon) > mr_threshold(v))


def mr_task(predictions: Sequence[GoalSet], truths: Sequence[Array],
            speeds: Sequence[float], headings: Sequence[Array]) -> float:
    """Fraction of all K*N predicted goals missing their sample's box."""
    n = len(predictions)
    if not (len(truths) == len(speeds) == len(headings) == n):
        raise InputError("predictions, truths, speeds, headings must align")
    missed = 0
    total = 0
    for goals, truth, v, heading in zip(predictions, truths, speeds, headings):
        for g in goals.positions:
            missed += miss(g, truth, heading, v)
            total += 1
    return missed / total


class ErrorMatrix:
    """T x T matrix R of test errors; R[i][j] is task j's error after task i.

    Rows are filled one at a time as training passes each task boundary;
    aggregate queries check fill state. Indices here are 0-based; the
    module-level ``bwt``/``averages`` take 1-based task counts.
    """

    def __init__(self, n_tasks: int, tag: str):
        if n_tasks < 1:
            raise ConfigurationError(f"n_tasks must be >= 1, got {n_tasks}")
        self.n_tasks = n_tasks
        self.tag = tag
        self.values = np.full((n_tasks, n_tasks), np.nan)
        self.filled = [False] * n_tasks

    def fill_row(self, i: int, row: Sequence[float]) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.n_tasks,):
            raise InputError(f"row must have length {self.n_tasks}")
        if np.any(row < 0) or not np.all(np.isfinite(row)):
            raise InputError("errors must be finite and >= 0")
        self.values[i] = row
        self.filled[i] = True

    def row(self, i: int) -> Array:
        if not self.filled[i]:
            raise InputError(f"row {i} has not been filled")
        return self.values[i]


def bwt(matrix: ErrorMatrix, c: int) -> float:
    """Mean error increase on past tasks after training through task c.

    ``c`` is the 1-based count of completed tasks; requires c >= 2 and rows
    1..c filled. Positive values mean forgetting, negative means backward
    improvement.
    """
    if c < 2:
        raise InputError(f"bwt needs at least 2 completed tasks, got {c}")
    if c > matrix.n_tasks:
        raise InputError(f"c={c} exceeds the {matrix.n_tasks}-task matrix")
    for i in range(c):
        if not matrix.filled[i]:
            raise InputError(f"row {i} has not been filled")
    past = np.arange(c - 1)
    return float(np.mean(matrix.values[c - 1, past] - matrix.values[past, past]))


def averages(matrix: ErrorMatrix, c: int) -> float:
    """Mean of row c (1-based) across all task columns."""
    return float(np.mean(matrix.row(c - 1)))


# ---------------------------------------------------------------------------
# Batched sample evaluation (harness side)
# ---------------------------------------------------------------------------


def heading_of(sample: Sample) -> Array:
    """Unit heading from the target agent's last observed velocity.

    Falls back to +x when the agent is effectively stationary. Feature
    scaling does not affect the direction.
    """
    if sample.speed < 1e-6:
        return np.array([1.0, 0.0])
    v = np.asarray(sample.dynamic, dtype=np.float64)[0, -2:]
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return np.array([1.0, 0.0])
    return v / norm


@dataclass(frozen=True)
class EvalResult:
    fde: float
    mr: float
    n: int


def evaluate_model(predictor: HeatmapPredictor, params: Array,
                   samples: Sequence[Sample], k: int,
                   chunk: int = 512) -> EvalResult:
    """Mean FDE and MR of one parameter vector over a sample list.

    Both metrics come from the same deterministic top-k extraction. The
    forward pass is batched; per-sample values are assembled before the
    final reduction, so results depend on ``chunk`` only through the
    floating-point roundoff of the underlying matrix kernels.
    """
    if not samples:
        raise InputError("cannot evaluate on an empty sample list")
    centers = predictor.heatmap_from_probs(
        np.full(predictor.config.n_cells, 1.0 / predictor.config.n_cells)
    ).cell_centers()
    fde_vals = []
    missed = 0
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        probs = predictor.predict_probs(params, predictor.encode(part))
        goal_pos = centers[topk_cells(probs, k)]           # (n, k, 2)
        truths = np.stack([s.goal for s in part])          # (n, 2)
        diffs = goal_pos - truths[:, None, :]
        fde_vals.append(np.linalg.norm(diffs, axis=2).min(axis=1))
        heads = np.stack([heading_of(s) for s in part])    # (n, 2)
        perps = np.stack([-heads[:, 1], heads[:, 0]], axis=1)
        lon = np.einsum("nkd,nd->nk", diffs, heads)
        lat = np.einsum("nkd,nd->nk", diffs, perps)
        ths = np.array([mr_threshold(s.speed) for s in part])
        missed += int(((np.abs(lat) > LATERAL_LIMIT / 2)
                       | (np.abs(lon) > ths[:, None])).sum())
    n = len(samples)
    return EvalResult(fde=float(np.concatenate(fde_vals).sum() / n),
                      mr=missed / (n * k), n=n)
