"""Domain types, target normalization, and system-state bookkeeping.

Everything downstream works in a normalized maximization space: raw oracle
outputs are mapped to scores where larger is always better, regardless of
whether a target is maximized, minimized, or pinned to an interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np


class DomainError(ValueError):
    """Raised when inputs violate the declared problem geometry."""


class UnsupportedModeError(RuntimeError):
    """Raised when an operation is called in the wrong domain mode."""


MODES = ("maximize", "minimize", "interval")


@dataclass(frozen=True)
class TargetSpec:
    """One optimization target: direction or interval in raw oracle units."""

    name: str
    mode: str = "maximize"
    interval_bounds: Optional[tuple[float, float]] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise DomainError(f"unknown target mode {self.mode!r}")
        if self.mode == "interval":
            if self.interval_bounds is None:
                raise DomainError(f"target {self.name!r}: interval mode requires bounds")
            lo, hi = self.interval_bounds
            if not lo < hi:
                raise DomainError(f"target {self.name!r}: interval requires lo < hi")
        elif self.interval_bounds is not None:
            raise DomainError(f"target {self.name!r}: bounds only valid in interval mode")


@dataclass(frozen=True)
class Box:
    """Axis-aligned continuous domain."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise DomainError("box bounds must be 1-D arrays of equal length")
        if not np.all(lower < upper):
            raise DomainError("box requires lower < upper in every dimension")

    @property
    def dimension(self) -> int:
        return self.lower.size

    def contains(self, X: np.ndarray, atol: float = 1e-12) -> np.ndarray:
        X = np.atleast_2d(X)
        return np.all((X >= self.lower - atol) & (X <= self.upper + atol), axis=1)

    def clip(self, X: np.ndarray) -> np.ndarray:
        return np.clip(X, self.lower, self.upper)


@dataclass(frozen=True)
class ClosedPool:
    """Finite candidate library; optimization selects which rows to evaluate."""

    X: np.ndarray
    known_Y: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        object.__setattr__(self, "X", X)
        if X.ndim != 2:
            raise DomainError("pool matrix must be 2-D")
        if self.known_Y is not None:
            Y = np.asarray(self.known_Y, dtype=float)
            object.__setattr__(self, "known_Y", Y)
            if Y.shape[0] != X.shape[0]:
                raise DomainError("pool targets must align with pool rows")

    @property
    def size(self) -> int:
        return self.X.shape[0]


Domain = Union[Box, ClosedPool]


@dataclass(frozen=True)
class ProblemSpec:
    """What is being optimized: domain, targets, and evaluation budget."""

    dimension: int
    domain: Domain
    targets: tuple[TargetSpec, ...]
    batch_size: int
    max_iterations: int
    init_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.dimension < 1:
            raise DomainError("dimension must be positive")
        if len(self.targets) < 1:
            raise DomainError("at least one target required")
        if min(self.batch_size, self.max_iterations + 1, self.init_count) < 1:
            raise DomainError("batch_size and init_count must be positive")
        if isinstance(self.domain, Box) and self.domain.dimension != self.dimension:
            raise DomainError("box dimension mismatch")
        if isinstance(self.domain, ClosedPool):
            if self.domain.X.shape[1] != self.dimension:
                raise DomainError("pool dimension mismatch")
            if self.domain.size < self.init_count + self.batch_size:
                raise DomainError("pool smaller than init_count + batch_size")

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    @property
    def is_pool(self) -> bool:
        return isinstance(self.domain, ClosedPool)


def normalize_targets(Y_raw: np.ndarray, targets: Sequence[TargetSpec]) -> np.ndarray:
    """Map raw oracle outputs to scores where larger is always better.

    maximize keeps the value, minimize negates it, and interval mode scores
    the distance to the interval center in half-width units (0 at the center,
    -1 at either bound, below -1 outside).
    """
    Y = np.atleast_2d(np.asarray(Y_raw, dtype=float))
    if Y.shape[1] != len(targets):
        raise DomainError(f"expected {len(targets)} target columns, got {Y.shape[1]}")
    out = np.empty_like(Y)
    for j, target in enumerate(targets):
        if target.mode == "maximize":
            out[:, j] = Y[:, j]
        elif target.mode == "minimize":
            out[:, j] = -Y[:, j]
        else:
            lo, hi = target.interval_bounds  # type: ignore[misc]
            center = 0.5 * (lo + hi)
            half = 0.5 * (hi - lo)
            out[:, j] = -np.abs(Y[:, j] - center) / half
    return out


@dataclass(frozen=True)
class ObservationSet:
    """Evaluated designs with raw outputs, scores, and iteration tags."""

    X: np.ndarray
    Y_raw: np.ndarray
    Y_score: np.ndarray
    iteration_tag: np.ndarray

    def __post_init__(self) -> None:
        n = self.X.shape[0]
        if not (self.Y_raw.shape[0] == self.Y_score.shape[0] == self.iteration_tag.shape[0] == n):
            raise DomainError("observation row counts disagree")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @classmethod
    def empty(cls, dimension: int, n_targets: int) -> "ObservationSet":
        return cls(
            X=np.empty((0, dimension)),
            Y_raw=np.empty((0, n_targets)),
            Y_score=np.empty((0, n_targets)),
            iteration_tag=np.empty((0,), dtype=int),
        )

    def rows_of_iterations(self, tags: Sequence[int]) -> np.ndarray:
        mask = np.isin(self.iteration_tag, np.asarray(tags, dtype=int))
        return self.X[mask]


@dataclass(frozen=True)
class SystemState:
    """Snapshot of the run: observations, fitted components, and counters.

    A cheap value object; the controller replaces it wholesale after each
    batch, so read-only references can be shared freely.
    """

    observations: ObservationSet
    t: int
    rng_root_seed: int
    capacity: Optional[object] = None  # CapacityBudget; None marks it stale
    ensemble: Optional[object] = None
    structure: Optional[object] = None
    pool_indices: Optional[tuple[int, ...]] = None


def update_state(
    state: SystemState,
    new_X: np.ndarray,
    new_Y_raw: np.ndarray,
    targets: Sequence[TargetSpec],
    new_pool_indices: Optional[Sequence[int]] = None,
) -> SystemState:
    """Append a batch of observations and advance the iteration counter.

    An empty batch is a no-op (the counter does not advance). Historical rows
    are never mutated; capacity is marked stale for recomputation.
    """
    new_X = np.atleast_2d(np.asarray(new_X, dtype=float))
    new_Y_raw = np.atleast_2d(np.asarray(new_Y_raw, dtype=float))
    if new_X.shape[0] == 0:
        return state
    obs = state.observations
    if obs.X.shape[1] and new_X.shape[1] != obs.X.shape[1]:
        raise DomainError(f"design dimension mismatch: {new_X.shape[1]} vs {obs.X.shape[1]}")
    if new_Y_raw.shape[0] != new_X.shape[0]:
        raise DomainError("batch X and Y row counts disagree")
    t_next = state.t + 1
    scores = normalize_targets(new_Y_raw, targets)
    merged = ObservationSet(
        X=np.vstack([obs.X, new_X]),
        Y_raw=np.vstack([obs.Y_raw, new_Y_raw]),
        Y_score=np.vstack([obs.Y_score, scores]),
        iteration_tag=np.concatenate([obs.iteration_tag, np.full(new_X.shape[0], t_next, dtype=int)]),
    )
    pool_indices = state.pool_indices
    if new_pool_indices is not None:
        pool_indices = tuple(state.pool_indices or ()) + tuple(int(i) for i in new_pool_indices)
    return replace(
        state,
        observations=merged,
        t=t_next,
        capacity=None,
        pool_indices=pool_indices,
    )


def success_threshold(pool_size: int) -> int:
    """Rank cutoff for closed-pool success: min(10, ceil(1% of the pool))."""
    return min(10, int(np.ceil(0.01 * pool_size)))


def success_check(state: SystemState, pool_ranks: np.ndarray) -> bool:
    """True when any evaluated pool row ranks within the success cutoff."""
    if state.pool_indices is None:
        raise UnsupportedModeError("success_check requires closed-pool mode with known ranks")
    ranks = np.asarray(pool_ranks)
    cutoff = success_threshold(ranks.size)
    evaluated = np.asarray(state.pool_indices, dtype=int)
    if evaluated.size == 0:
        return False
    return bool(np.any(ranks[evaluated] <= cutoff))


def pareto_non_dominated(Y: np.ndarray) -> np.ndarray:
    """Boolean mask of rows not dominated by any other row (maximization)."""
    Y = np.atleast_2d(Y)
    n = Y.shape[0]
    mask = np.ones(n, dtype=bool)
    for i in range(n):
        if not mask[i]:
            continue
        dominated = np.all(Y >= Y[i], axis=1) & np.any(Y > Y[i], axis=1)
        if np.any(dominated & mask):
            mask[i] = False
    return mask


def aggregate_pool_ranks(Y_score: np.ndarray) -> np.ndarray:
    """1-based quality ranks over pool rows on the normalized score matrix.

    Single target: rank by score, best first. Multiple targets:
    non-dominated sorting, ties within a front broken by hypervolume
    contribution against a reference 10% of the column range below each
    column minimum.
    """
    Y = np.atleast_2d(np.asarray(Y_score, dtype=float))
    n, q = Y.shape
    if q == 1:
        order = np.argsort(-Y[:, 0], kind="stable")
        ranks = np.empty(n, dtype=int)
        ranks[order] = np.arange(1, n + 1)
        return ranks

    from .fusion import hypervolume  # local import to avoid a module cycle

    col_min = Y.min(axis=0)
    col_range = np.maximum(Y.max(axis=0) - col_min, 1e-12)
    ref = col_min - 0.1 * col_range

    remaining = np.arange(n)
    fronts: list[np.ndarray] = []
    Y_work = Y.copy()
    while remaining.size:
        mask = pareto_non_dominated(Y_work[remaining])
        front = remaining[mask]
        fronts.append(front)
        remaining = remaining[~mask]

    ranks = np.empty(n, dtype=int)
    next_rank = 1
    for front in fronts:
        if front.size == 1:
            ranks[front[0]] = next_rank
            next_rank += 1
            continue
        pts = Y[front]
        total = hypervolume(pts, ref)
        contribution = np.array(
            [total - hypervolume(np.delete(pts, i, axis=0), ref) for i in range(front.size)]
        )
        order = np.argsort(-contribution, kind="stable")
        for position, idx in enumerate(order):
            ranks[front[idx]] = next_rank + position
        next_rank += front.size
    return ranks


def substream(root_seed: int, *key: int) -> np.random.Generator:
    """Deterministic RNG substream keyed by (iteration, stage, member, ...).

    Streams are independent of scheduling order, which keeps parallel member
    fits and replayed runs bit-identical.
    """
    spawn_key = tuple(int(k) & 0xFFFFFFFF for k in key)
    return np.random.default_rng(np.random.SeedSequence(int(root_seed) & (2**64 - 1), spawn_key=spawn_key))


# stage identifiers for substream keys
STAGE_INIT = 0
STAGE_TUNE = 1
STAGE_BOOT = 2
STAGE_DE = 3
STAGE_SOBOL = 4
STAGE_CLUSTER = 5
STAGE_MC = 6
STAGE_TRAINING_LABELS = 7
STAGE_POOL = 8
