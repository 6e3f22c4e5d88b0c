"""Stage 2a: building the finite candidate support for each iteration.

Closed pools pass through their unevaluated rows. In box domains the support
is the union of per-family differential-evolution elites (exploitation), one
ensemble-mean DE run, and a scrambled Sobol design (geometry-aligned
exploration), deduplicated at a tight tolerance.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .core import Box, ClosedPool, ProblemSpec, STAGE_DE, STAGE_SOBOL, SystemState, substream
from .ensemble import EnsembleModel

log = logging.getLogger(__name__)

SOBOL_MAX_DIM = 21201  # direction-number table support in scipy


class PoolExhaustedError(RuntimeError):
    """No unevaluated pool rows remain."""


@dataclass
class CandidateSet:
    X_cand: np.ndarray
    provenance: np.ndarray  # per-row origin tag
    pool_rows: Optional[np.ndarray] = None  # indices into the pool (closed-pool mode)

    @property
    def size(self) -> int:
        return self.X_cand.shape[0]


def de_popsize(dimension: int, cap: int = 60) -> int:
    return max(20, min(4 * dimension, cap))


def run_family_de(
    objective: Callable[[np.ndarray, int], np.ndarray],
    box: Box,
    rng: np.random.Generator,
    generations: int = 100,
    popsize: Optional[int] = None,
    weight: float = 0.7,
    crossover: float = 0.9,
    elite: int = 20,
    pop_cap: int = 60,
) -> np.ndarray:
    """DE/rand/1/bin maximization over the box; returns the top elite points.

    ``objective(X, generation)`` may be stochastic across generations (the
    family objectives re-draw their member subset each call); parents and
    trials are always compared under the same draw.
    """
    d = box.dimension
    p = popsize or de_popsize(d, pop_cap)
    pop = rng.uniform(box.lower, box.upper, size=(p, d))
    values = objective(pop, 0)
    rows = np.arange(p)
    for gen in range(1, generations + 1):
        r = rng.integers(0, p, size=(p, 3))
        while True:  # resample rows until r1, r2, r3, i are all distinct
            bad = (
                (r[:, 0] == r[:, 1]) | (r[:, 0] == r[:, 2]) | (r[:, 1] == r[:, 2])
                | np.any(r == rows[:, None], axis=1)
            )
            if not bad.any():
                break
            r[bad] = rng.integers(0, p, size=(int(bad.sum()), 3))
        mutant = pop[r[:, 0]] + weight * (pop[r[:, 1]] - pop[r[:, 2]])
        cross = rng.random((p, d)) < crossover
        cross[np.arange(p), rng.integers(0, d, size=p)] = True
        trial = box.clip(np.where(cross, mutant, pop))
        joint = objective(np.vstack([pop, trial]), gen)
        values, trial_values = joint[:p], joint[p:]
        accept = trial_values >= values
        pop[accept] = trial[accept]
        values[accept] = trial_values[accept]
    order = np.argsort(-values, kind="stable")
    seen: set[bytes] = set()
    out = []
    for i in order:
        key = pop[i].tobytes()
        if key in seen:
            continue
        seen.add(key)
        out.append(pop[i])
        if len(out) >= elite:
            break
    return np.array(out)


def sobol_exploration(
    box: Box, n: int, rng: np.random.Generator, scramble: bool = True
) -> np.ndarray:
    """Scrambled Sobol points mapped into the box; deterministic given rng.

    Dimensions beyond the direction-number tables fall back to a Latin
    hypercube with a warning.
    """
    if n < 1:
        raise ValueError("need at least one exploration point")
    seed = int(rng.integers(2**32))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        if box.dimension > SOBOL_MAX_DIM:
            log.warning("dimension %d exceeds Sobol table support; using Latin hypercube", box.dimension)
            sampler = qmc.LatinHypercube(d=box.dimension, seed=seed)
        else:
            sampler = qmc.Sobol(d=box.dimension, scramble=scramble, seed=seed)
        unit = sampler.random(n)
    return qmc.scale(unit, box.lower, box.upper)


def make_family_objective(
    model: EnsembleModel,
    family_id: str,
    rng: np.random.Generator,
    subset_size: int = 4,
) -> Callable[[np.ndarray, int], np.ndarray]:
    """Stochastic surrogate objective: mean of a fresh random member subset.

    The subset is re-drawn once per generation (keyed by the generation
    argument), averaged across targets for multi-target problems.
    """
    state = {"gen": -1, "subsets": None}

    def objective(X: np.ndarray, gen: int) -> np.ndarray:
        if gen != state["gen"]:
            state["gen"] = gen
            state["subsets"] = [
                rng.choice(
                    model.families[t][family_id].members.n_members,
                    size=min(subset_size, model.families[t][family_id].members.n_members),
                    replace=False,
                )
                for t in range(model.n_targets)
            ]
        total = np.zeros(X.shape[0])
        for t in range(model.n_targets):
            members = model.families[t][family_id].members
            total += members.predict_subset(X, state["subsets"][t]).mean(axis=0)
        return total / model.n_targets

    return objective


def make_ensemble_objective(
    model: EnsembleModel,
    family_ids: Sequence[str],
    rng: np.random.Generator,
    subset_size: int = 4,
) -> Callable[[np.ndarray, int], np.ndarray]:
    """Reliability-weighted mean of stochastic family objectives."""
    parts = {
        fam: make_family_objective(model, fam, rng, subset_size) for fam in family_ids
    }
    mean_w = {
        fam: float(np.mean([model.reliability[t][fam] for t in range(model.n_targets)]))
        for fam in family_ids
    }
    total_w = sum(mean_w.values())

    def objective(X: np.ndarray, gen: int) -> np.ndarray:
        acc = np.zeros(X.shape[0])
        for fam, part in parts.items():
            acc += mean_w[fam] * part(X, gen)
        return acc / total_w

    return objective


def dedup_rows(X: np.ndarray, box: Box, tol: float = 1e-9) -> np.ndarray:
    """Indices of first occurrences, merging rows closer than ``tol`` in
    box-standardized coordinates."""
    scale = (X - box.lower) / (box.upper - box.lower)
    keys = np.round(scale / tol).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def generate_candidates(
    state: SystemState,
    spec: ProblemSpec,
    de_generations: int = 100,
    de_elite: int = 20,
    de_subset: int = 4,
    de_weight: float = 0.7,
    de_crossover: float = 0.9,
    de_pop_cap: int = 60,
    n_sobol: int = 128,
    sobol_scramble: bool = True,
    dedup_tol: float = 1e-9,
) -> CandidateSet:
    """Candidate support for the current iteration.

    Closed pool: every unevaluated row. Box: per-family DE elites, one
    ensemble-mean DE run, and a Sobol design, deduplicated in order.
    """
    if isinstance(spec.domain, ClosedPool):
        evaluated = np.asarray(state.pool_indices or (), dtype=int)
        remaining = np.setdiff1d(np.arange(spec.domain.size), evaluated)
        if remaining.size == 0:
            raise PoolExhaustedError("all pool rows have been evaluated")
        return CandidateSet(
            X_cand=spec.domain.X[remaining],
            provenance=np.array(["pool"] * remaining.size),
            pool_rows=remaining,
        )

    box = spec.domain
    model: EnsembleModel = state.ensemble  # type: ignore[assignment]
    if model is None:
        raise RuntimeError("box-mode candidate generation requires a fitted ensemble")
    family_ids = sorted(
        set.intersection(*(set(model.family_ids(t)) for t in range(model.n_targets)))
    )
    blocks: list[np.ndarray] = []
    tags: list[str] = []
    for run_idx, family_id in enumerate(family_ids):
        rng = substream(state.rng_root_seed, STAGE_DE, state.t, run_idx)
        objective = make_family_objective(model, family_id, rng, de_subset)
        pts = run_family_de(
            objective, box, rng, generations=de_generations,
            weight=de_weight, crossover=de_crossover, elite=de_elite, pop_cap=de_pop_cap,
        )
        blocks.append(pts)
        tags.extend([f"de-family:{family_id}"] * len(pts))
    rng = substream(state.rng_root_seed, STAGE_DE, state.t, len(family_ids))
    ens_objective = make_ensemble_objective(model, family_ids, rng, de_subset)
    pts = run_family_de(
        ens_objective, box, rng, generations=de_generations,
        weight=de_weight, crossover=de_crossover, elite=de_elite, pop_cap=de_pop_cap,
    )
    blocks.append(pts)
    tags.extend(["de-ensemble"] * len(pts))

    sobol_rng = substream(state.rng_root_seed, STAGE_SOBOL, state.t)
    sob = sobol_exploration(box, n_sobol, sobol_rng, scramble=sobol_scramble)
    blocks.append(sob)
    tags.extend(["sobol"] * len(sob))

    X = np.vstack(blocks)
    provenance = np.array(tags)
    keep = dedup_rows(X, box, tol=dedup_tol)
    X, provenance = X[keep], provenance[keep]
    if X.shape[0] < spec.batch_size:
        raise RuntimeError("candidate set smaller than the batch size")
    return CandidateSet(X_cand=X, provenance=provenance)
