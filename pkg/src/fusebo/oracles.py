"""Benchmark objectives, pool ingestion, and synthetic pool generation.

Benchmark functions return raw minimization values in their textbook form;
the sign inversion to maximization scores happens in target normalization,
never here.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import qmc

from .core import Box, DomainError, TargetSpec, aggregate_pool_ranks, normalize_targets

log = logging.getLogger(__name__)

SCHWEFEL_OPT = 420.9687


def ackley(X: np.ndarray, a: float = 20.0, b: float = 0.2, c: float = 2.0 * np.pi) -> np.ndarray:
    X = np.atleast_2d(X)
    d = X.shape[1]
    term1 = -a * np.exp(-b * np.sqrt(np.sum(X**2, axis=1) / d))
    term2 = -np.exp(np.sum(np.cos(c * X), axis=1) / d)
    return term1 + term2 + a + np.e


def rastrigin(X: np.ndarray, amplitude: float = 10.0) -> np.ndarray:
    X = np.atleast_2d(X)
    return amplitude * X.shape[1] + np.sum(X**2 - amplitude * np.cos(2.0 * np.pi * X), axis=1)


def schwefel(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return 418.9829 * X.shape[1] - np.sum(X * np.sin(np.sqrt(np.abs(X))), axis=1)


@dataclass(frozen=True)
class BenchmarkFunction:
    """A named test landscape with its conventional box and known optimum."""

    name: str
    dimension: int
    bounds: tuple[float, float]
    optimum_x: np.ndarray
    optimum_value: float
    fn: Callable[[np.ndarray], np.ndarray]

    def box(self) -> Box:
        lo, hi = self.bounds
        return Box(np.full(self.dimension, lo), np.full(self.dimension, hi))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return eval_benchmark(self, X)


_BENCH_TABLE = {
    "ackley": ((-32.768, 32.768), 0.0, ackley),
    "rastrigin": ((-5.12, 5.12), 0.0, rastrigin),
    "schwefel": ((-500.0, 500.0), SCHWEFEL_OPT, schwefel),
}


def get_benchmark(name: str, dimension: int = 20) -> BenchmarkFunction:
    key = name.lower()
    if key not in _BENCH_TABLE:
        raise DomainError(f"unknown benchmark {name!r}; choose from {sorted(_BENCH_TABLE)}")
    bounds, opt_coord, fn = _BENCH_TABLE[key]
    return BenchmarkFunction(
        name=key,
        dimension=dimension,
        bounds=bounds,
        optimum_x=np.full(dimension, opt_coord),
        optimum_value=0.0,
        fn=fn,
    )


def eval_benchmark(bench: BenchmarkFunction, X: np.ndarray) -> np.ndarray:
    """Evaluate a benchmark, clipping out-of-bounds rows with a warning."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != bench.dimension:
        raise DomainError(f"{bench.name}: expected dimension {bench.dimension}, got {X.shape[1]}")
    lo, hi = bench.bounds
    if np.any(X < lo) or np.any(X > hi):
        log.warning("%s: clipping %d out-of-bounds rows", bench.name, int(np.sum(np.any((X < lo) | (X > hi), axis=1))))
        X = np.clip(X, lo, hi)
    return bench.fn(X)


@dataclass
class Pool:
    """Ingested candidate library with per-target rank tables.

    ``rank_Y`` holds the values ranks are computed from; for synthetic pools
    this is the noiseless ground truth while ``Y`` carries the noisy oracle
    outputs returned to the optimizer.
    """

    X: np.ndarray
    Y: np.ndarray
    ids: Optional[np.ndarray] = None
    n_dropped: int = 0
    rank_Y: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.X.shape[0]

    @property
    def dimension(self) -> int:
        return self.X.shape[1]

    def ranks(self, targets: Sequence[TargetSpec]) -> np.ndarray:
        basis = self.rank_Y if self.rank_Y is not None else self.Y
        return aggregate_pool_ranks(normalize_targets(basis, targets))

    def oracle(self) -> Callable[[np.ndarray], np.ndarray]:
        """Row-lookup oracle; queries must be exact pool rows."""

        def lookup(X_query: np.ndarray) -> np.ndarray:
            X_query = np.atleast_2d(X_query)
            out = np.empty((X_query.shape[0], self.Y.shape[1]))
            for i, row in enumerate(X_query):
                matches = np.where(np.all(self.X == row, axis=1))[0]
                if matches.size == 0:
                    raise DomainError("query row is not a pool member")
                out[i] = self.Y[matches[0]]
            return out

        return lookup


def load_pool(
    path: str | Path,
    feature_columns: Sequence[str],
    target_columns: Sequence[str],
    id_column: Optional[str] = None,
    sep: str = ",",
) -> Pool:
    """Load a delimited table into a typed pool.

    Rows with missing or non-numeric entries in the named columns are dropped
    and counted. Duplicate header names and missing columns are hard errors.
    """
    path = Path(path)
    header = pd.read_csv(path, sep=sep, nrows=0)
    raw_names = [c.strip() for c in path.open().readline().rstrip("\n").split(sep)]
    dupes = {name for name in raw_names if raw_names.count(name) > 1}
    if dupes:
        raise DomainError(f"duplicate header names in {path.name}: {sorted(dupes)}")

    frame = pd.read_csv(path, sep=sep, float_precision="round_trip")
    missing = [c for c in [*feature_columns, *target_columns] if c not in frame.columns]
    if missing:
        raise DomainError(f"missing columns in {path.name}: {missing}")

    used = list(feature_columns) + list(target_columns)
    numeric = frame[used].apply(pd.to_numeric, errors="coerce")
    keep = numeric.notna().all(axis=1)
    n_dropped = int((~keep).sum())
    if n_dropped:
        log.warning("%s: dropped %d rows with missing/non-numeric entries", path.name, n_dropped)
    clean = numeric[keep]
    if clean.shape[0] == 0:
        raise DomainError(f"{path.name}: no usable rows after dropping incomplete ones")

    ids = None
    if id_column is not None:
        if id_column not in frame.columns:
            raise DomainError(f"missing id column {id_column!r}")
        ids = frame.loc[keep, id_column].to_numpy()
    return Pool(
        X=clean[list(feature_columns)].to_numpy(dtype=float),
        Y=clean[list(target_columns)].to_numpy(dtype=float),
        ids=ids,
        n_dropped=n_dropped,
    )


def save_pool(pool: Pool, path: str | Path, sep: str = ",") -> None:
    """Write a pool back to delimited text (features f_0.., targets y_0..)."""
    d, q = pool.dimension, pool.Y.shape[1]
    frame = pd.DataFrame(pool.X, columns=[f"f_{j}" for j in range(d)])
    for j in range(q):
        frame[f"y_{j}"] = pool.Y[:, j]
    # %.17g round-trips float64 exactly, keeping ingestion idempotent
    frame.to_csv(path, sep=sep, index=False, float_format="%.17g")


def generate_synthetic_pool(
    bench: BenchmarkFunction,
    n: int,
    noise_sd: float,
    rng: np.random.Generator,
) -> Pool:
    """Sample a pool from a benchmark: Sobol designs, noisy targets.

    Ranks are taken from the noiseless values so success checks follow the
    true ordering while the optimizer only ever sees the noisy column.
    """
    if n < 100:
        raise DomainError("synthetic pools need at least 100 rows")
    box = bench.box()
    seed = int(rng.integers(2**32))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        sampler = qmc.Sobol(d=bench.dimension, scramble=True, seed=seed)
        unit = sampler.random(n)
    X = qmc.scale(unit, box.lower, box.upper)
    y_clean = eval_benchmark(bench, X)
    y_noisy = y_clean + rng.normal(0.0, noise_sd, size=n) if noise_sd > 0 else y_clean.copy()
    return Pool(
        X=X,
        Y=y_noisy[:, None],
        rank_Y=y_clean[:, None],
    )
