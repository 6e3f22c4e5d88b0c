"""Orchestration of the adaptive sampling loop.

The Engine exposes a propose/ingest pair so the same pipeline drives both
in-process runs (run_loop) and file-based ask-tell sessions: propose() walks
stages 0-3 and returns the next batch, ingest() folds oracle results back
into the state and appends an iteration record. Runs, logs, and checkpoints
are bit-reproducible for a fixed seed and deterministic oracle.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import capacity as capacity_mod
from . import candidates as candidates_mod
from . import fusion as fusion_mod
from . import structure as structure_mod
from .config import RunConfig
from .core import (
    Box,
    ClosedPool,
    ObservationSet,
    ProblemSpec,
    STAGE_CLUSTER,
    STAGE_INIT,
    STAGE_TRAINING_LABELS,
    SystemState,
    success_check,
    substream,
    update_state,
)
from .ensemble import EnsembleAbortError, fit_ensemble

log = logging.getLogger(__name__)

LOG_FORMAT = "fusebo-runlog"
LOG_VERSION = 1
CHECKPOINT_VERSION = 1

STATUS_BUDGET = "budget-exhausted"
STATUS_TARGET = "target-reached"
STATUS_POOL = "pool-exhausted"
STATUS_SUCCESS = "success-criterion"
STATUS_FAILED = "failed"


class LogFormatError(RuntimeError):
    """Log or checkpoint file is malformed, truncated, or version-mismatched."""


class SessionStateError(RuntimeError):
    """Ask-tell calls arrived in the wrong order."""


@dataclass
class IterationRecord:
    iteration: int
    batch_X: list
    batch_pool_rows: Optional[list]
    Y_raw: list
    Y_score: list
    best_so_far_score: list
    best_so_far_raw: list
    bandwidth: list
    n_clusters: int
    internal_similarity: float
    novelty: float
    dist_to_optimum: Optional[float]
    oob_summary: dict
    deviation: list
    seed: int
    timing: float


@dataclass
class RunLog:
    config: dict
    records: list[IterationRecord]
    status: str
    final_best: list  # per target: {x, raw, score}

    def digest(self) -> str:
        """Content hash over everything except wall-clock timing."""
        payload = {
            "config": self.config,
            "status": self.status,
            "final_best": self.final_best,
            "records": [
                {k: v for k, v in dataclasses.asdict(r).items() if k != "timing"}
                for r in self.records
            ],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


@dataclass
class Proposal:
    iteration: int
    X: np.ndarray
    pool_rows: Optional[np.ndarray]
    batch_labels: np.ndarray
    n_clusters: int
    bandwidth: list
    oob_summary: dict
    deviation: list
    timing: float


def _as_output_matrix(Y, n_rows: int) -> np.ndarray:
    """Coerce oracle output to (n_rows, q); 1-D outputs become a column."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None] if Y.size == n_rows else Y[None, :]
    return Y


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def compute_iteration_diagnostics(
    prev_obs: ObservationSet,
    batch_X: np.ndarray,
    batch_labels: np.ndarray,
    n_clusters: int,
    optimum: Optional[np.ndarray] = None,
    novelty_window: int = 3,
    novelty_k: int = 5,
    current_iteration: int = 0,
) -> dict:
    """Structural diagnostics of one batch against recent history.

    bandwidth: fraction of the batch per cluster (sums to 1). internal
    similarity: mean pairwise distance within the batch in per-dimension
    standardized coordinates. novelty: mean nearest-neighbor distance from
    batch points to the union of the preceding ``novelty_window`` iterations
    (queried at depth ``novelty_k``); zero when the batch repeats known
    points. Distance to the optimum is reported in raw coordinates.
    """
    batch_X = np.atleast_2d(batch_X)
    b = batch_X.shape[0]
    counts = np.bincount(np.asarray(batch_labels, dtype=int), minlength=max(n_clusters, 1))
    bandwidth = (counts / b).tolist()

    scale_source = prev_obs.X if prev_obs.n > 1 else batch_X
    std = scale_source.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Zb = batch_X / std

    if b < 2:
        similarity = 0.0
    else:
        diffs = Zb[:, None, :] - Zb[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        iu = np.triu_indices(b, k=1)
        similarity = float(dist[iu].mean())

    tags = range(max(0, current_iteration - novelty_window), current_iteration)
    prev_points = prev_obs.rows_of_iterations(list(tags))
    if prev_points.shape[0] == 0:
        novelty = 0.0
    else:
        from sklearn.neighbors import NearestNeighbors

        k = min(novelty_k, prev_points.shape[0])
        nn = NearestNeighbors(n_neighbors=k).fit(prev_points / std)
        dists, _ = nn.kneighbors(Zb)
        novelty = float(dists[:, 0].mean())

    dist_opt = None
    if optimum is not None:
        dist_opt = float(np.min(np.linalg.norm(batch_X - optimum, axis=1)))
    return {
        "bandwidth": bandwidth,
        "internal_similarity": similarity,
        "novelty": novelty,
        "dist_to_optimum": dist_opt,
    }


class Engine:
    """Stage sequencing around a SystemState, usable in-process or ask-tell."""

    def __init__(
        self,
        spec: ProblemSpec,
        config: RunConfig,
        pool_ranks: Optional[np.ndarray] = None,
        optimum: Optional[np.ndarray] = None,
    ):
        self.spec = spec
        self.config = config
        self.pool_ranks = pool_ranks
        self.optimum = optimum
        self.state = SystemState(
            observations=ObservationSet.empty(spec.dimension, spec.n_targets),
            t=0,
            rng_root_seed=config.seed,
            pool_indices=() if spec.is_pool else None,
        )
        self.records: list[IterationRecord] = []
        self.pending: Optional[Proposal] = None
        self.pending_init: Optional[tuple[np.ndarray, Optional[np.ndarray]]] = None
        self.status: Optional[str] = None
        self.oracle_calls = 0
        self._tuned: dict = {}
        self._tuned_budget: Optional[int] = None

    # -- initialization -------------------------------------------------------

    def propose_init(
        self, oracle: Optional[Callable] = None
    ) -> tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
        """Initial design: below-median pool rows, or (filtered) uniform box.

        Returns (X, pool_rows, Y_known): pool mode carries the chosen row
        indices; low-quality box mode already holds oracle values for the
        accepted points (the screening probe is not charged to the budget).
        """
        rng = substream(self.config.seed, STAGE_INIT, 0)
        spec = self.spec
        if spec.is_pool:
            pool: ClosedPool = spec.domain  # type: ignore[assignment]
            if pool.known_Y is not None:
                from .core import normalize_targets

                scores = normalize_targets(pool.known_Y, spec.targets)
                medians = np.median(scores, axis=0)
                eligible = np.where(np.all(scores <= medians, axis=1))[0]
                if eligible.size < spec.init_count:
                    order = np.argsort(scores.mean(axis=1), kind="stable")
                    eligible = order[: max(spec.init_count, pool.size // 2)]
            else:
                eligible = np.arange(pool.size)
            rows = rng.choice(eligible, size=spec.init_count, replace=False)
            return pool.X[np.sort(rows)], np.sort(rows), None

        box: Box = spec.domain  # type: ignore[assignment]
        if self.config.init_mode == "uniform" or oracle is None:
            if self.config.init_mode == "low-quality" and oracle is None:
                raise SessionStateError(
                    "low-quality box initialization needs an oracle; use init.mode=uniform"
                )
            X = rng.uniform(box.lower, box.upper, size=(spec.init_count, spec.dimension))
            return X, None, None

        from .core import normalize_targets

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            probe_unit = qmc.Sobol(d=spec.dimension, scramble=True, seed=int(rng.integers(2**32))).random(
                self.config.init_probe
            )
        probe = qmc.scale(probe_unit, box.lower, box.upper)
        probe_scores = normalize_targets(
            _as_output_matrix(oracle(probe), probe.shape[0]), spec.targets
        ).mean(axis=1)
        threshold = float(np.median(probe_scores))
        accepted_X, accepted_Y = [], []
        attempts = 0
        while len(accepted_X) < spec.init_count and attempts < 10000:
            x = rng.uniform(box.lower, box.upper, size=(1, spec.dimension))
            y = _as_output_matrix(oracle(x), 1)
            attempts += 1
            if normalize_targets(y, spec.targets).mean() <= threshold:
                accepted_X.append(x[0])
                accepted_Y.append(y[0])
        return np.array(accepted_X), None, np.array(accepted_Y)

    def ingest_init(self, X: np.ndarray, Y_raw: np.ndarray, pool_rows=None) -> IterationRecord:
        from .core import normalize_targets

        scores = normalize_targets(Y_raw, self.spec.targets)
        self.state = replace(
            self.state,
            observations=ObservationSet(
                X=np.atleast_2d(X),
                Y_raw=np.atleast_2d(Y_raw),
                Y_score=scores,
                iteration_tag=np.zeros(len(X), dtype=int),
            ),
            pool_indices=tuple(int(i) for i in pool_rows) if pool_rows is not None else self.state.pool_indices,
        )
        self.oracle_calls += len(X)
        diag = compute_iteration_diagnostics(
            ObservationSet.empty(self.spec.dimension, self.spec.n_targets),
            X,
            np.zeros(len(X), dtype=int),
            1,
            optimum=self.optimum,
            current_iteration=0,
        )
        record = self._make_record(
            iteration=0,
            X=np.atleast_2d(X),
            pool_rows=pool_rows,
            Y_raw=np.atleast_2d(Y_raw),
            Y_score=scores,
            diag=diag,
            oob_summary={},
            deviation=[],
            timing=0.0,
        )
        self.records.append(record)
        self.pending_init = None
        self._check_stop()
        return record

    # -- main loop ------------------------------------------------------------

    def propose(self) -> Optional[Proposal]:
        """Stages 0-3; returns None after setting a terminal status."""
        if self.pending is not None or self.pending_init is not None:
            raise SessionStateError("a proposal is already pending; tell results first")
        if self.state.observations.n == 0:
            raise SessionStateError("no observations yet; initialize first")
        if self.status is not None:
            return None
        cfg = self.config
        t = self.state.t
        start = time.perf_counter()
        obs = self.state.observations

        remaining = self.spec.max_iterations * self.spec.batch_size - (self.oracle_calls - self.spec.init_count)
        budget = capacity_mod.assess_capacity(
            obs.X, obs.Y_score, remaining,
            k_lo=cfg.capacity_k_lo, k_hi=cfg.capacity_k_hi,
            rho=cfg.capacity_rho, budget_min=cfg.capacity_budget_min, budget_max=cfg.capacity_budget_max,
        )

        if self._tuned_budget is not None:
            ratio = budget.n_budget / max(self._tuned_budget, 1)
            if ratio >= cfg.ensemble_retune_ratio or ratio <= 1.0 / cfg.ensemble_retune_ratio:
                self._tuned = {}
        if not self._tuned:
            self._tuned_budget = budget.n_budget

        labels = self._training_labels(obs.X, t)
        try:
            model = self._fit(obs, budget, labels, t)
        except EnsembleAbortError as exc:
            log.warning("ensemble aborted (%s); retrying with uniform bootstraps", exc)
            try:
                model = self._fit(obs, budget, np.zeros(obs.n, dtype=int), t, kappa=0.0)
            except EnsembleAbortError:
                self.status = STATUS_FAILED
                return None
        self.state = replace(self.state, ensemble=model, capacity=budget)

        try:
            cand = candidates_mod.generate_candidates(
                self.state, self.spec,
                de_generations=cfg.de_generations, de_elite=cfg.de_elite,
                de_subset=cfg.de_member_subset, de_weight=cfg.de_weight,
                de_crossover=cfg.de_crossover, de_pop_cap=cfg.de_pop_cap,
                n_sobol=cfg.n_sobol, sobol_scramble=cfg.sobol_scramble,
                dedup_tol=cfg.dedup_tol,
            )
        except candidates_mod.PoolExhaustedError:
            self.status = STATUS_POOL
            return None

        cluster_rng = substream(cfg.seed, STAGE_CLUSTER, t)
        cluster_model, weights = structure_mod.analyze_candidates(
            cand.X_cand, cluster_rng,
            max_components=cfg.embed_dim,
            kmeans_k_max=cfg.kmeans_k_max, gmm_k_max=cfg.gmm_k_max,
            hdbscan_min_sizes=cfg.hdbscan_sizes(), graph_resolutions=cfg.resolutions(),
            graph_knn=cfg.graph_knn, fit_cap=cfg.proposer_fit_cap,
            silhouette_cap=cfg.silhouette_cap, density_k=cfg.density_k,
            pi_base=cfg.pi_base, boundary_gain=cfg.pi_boundary_gain,
            core_gain=cfg.pi_core_gain, pi_min=cfg.pi_min,
        )
        self.state = replace(self.state, structure=cluster_model)

        breakdown = fusion_mod.score_candidates(
            model, cand.X_cand, obs.Y_score, weights.pi, cfg.seed, t,
            snr_cap=cfg.snr_cap, trend_gain=cfg.gamma_trend_gain,
            beta_min=cfg.beta_min, beta_max=cfg.beta_max,
            kf_sigma_gain=cfg.kf_sigma_gain, alpha_gain=cfg.alpha_gain,
            cov_shrinkage=cfg.cov_shrinkage, n_mc=cfg.n_mc, ref_margin=cfg.ref_margin,
        )
        selected = fusion_mod.rank_and_select_batch(
            breakdown.utility, cluster_model.assigned, self.spec.batch_size
        )
        selected = self._dedupe_batch(selected, breakdown.utility, cand.X_cand)

        batch_X = cand.X_cand[selected]
        batch_rows = cand.pool_rows[selected] if cand.pool_rows is not None else None
        batch_labels = cluster_model.assigned[selected]
        counts = np.bincount(batch_labels, minlength=cluster_model.n_clusters)
        oob_summary = {
            f"{fam}:{tgt}": {"r2": s.r2, "elpd": s.elpd}
            for (fam, tgt), s in model.oob.raw.items()
        }
        deviation = [
            {"lam_r2": d.lam_r2, "lam_elpd": d.lam_elpd, "alpha": d.alpha}
            for d in breakdown.deviation
        ]
        proposal = Proposal(
            iteration=t + 1,
            X=batch_X,
            pool_rows=batch_rows,
            batch_labels=batch_labels,
            n_clusters=cluster_model.n_clusters,
            bandwidth=(counts / len(selected)).tolist(),
            oob_summary=oob_summary,
            deviation=deviation,
            timing=time.perf_counter() - start,
        )
        self.pending = proposal
        return proposal

    def ingest(self, proposal: Proposal, Y_raw: np.ndarray) -> IterationRecord:
        """Fold oracle results for a pending proposal into the state."""
        if self.pending is None or proposal.iteration != self.pending.iteration:
            raise SessionStateError("no matching pending proposal")
        Y_raw = np.atleast_2d(np.asarray(Y_raw, dtype=float))
        if Y_raw.shape != (proposal.X.shape[0], self.spec.n_targets):
            raise SessionStateError(
                f"expected measurements of shape {(proposal.X.shape[0], self.spec.n_targets)}, got {Y_raw.shape}"
            )
        prev_obs = self.state.observations
        diag = compute_iteration_diagnostics(
            prev_obs,
            proposal.X,
            proposal.batch_labels,
            proposal.n_clusters,
            optimum=self.optimum,
            novelty_window=self.config.novelty_window,
            novelty_k=self.config.novelty_k,
            current_iteration=proposal.iteration,
        )
        diag["bandwidth"] = proposal.bandwidth
        self.state = update_state(
            self.state, proposal.X, Y_raw, self.spec.targets,
            new_pool_indices=proposal.pool_rows,
        )
        self.oracle_calls += proposal.X.shape[0]
        from .core import normalize_targets

        record = self._make_record(
            iteration=proposal.iteration,
            X=proposal.X,
            pool_rows=proposal.pool_rows,
            Y_raw=Y_raw,
            Y_score=normalize_targets(Y_raw, self.spec.targets),
            diag=diag,
            oob_summary=proposal.oob_summary,
            deviation=proposal.deviation,
            timing=proposal.timing,
        )
        self.records.append(record)
        self.pending = None
        self._check_stop()
        return record

    # -- helpers ---------------------------------------------------------------

    def _training_labels(self, X: np.ndarray, t: int) -> np.ndarray:
        if X.shape[0] < 10:
            return np.zeros(X.shape[0], dtype=int)
        rng = substream(self.config.seed, STAGE_TRAINING_LABELS, t)
        proposers = tuple(p.strip() for p in self.config.training_proposers.split(","))
        try:
            model, _ = structure_mod.analyze_candidates(
                X, rng, max_components=self.config.embed_dim, proposers=proposers,
                kmeans_k_max=self.config.kmeans_k_max, gmm_k_max=self.config.gmm_k_max,
                silhouette_cap=self.config.silhouette_cap, density_k=self.config.density_k,
            )
            return model.assigned
        except structure_mod.PartitionError:
            return np.zeros(X.shape[0], dtype=int)

    def _fit(self, obs, budget, labels, t, kappa: Optional[float] = None):
        cfg = self.config
        return fit_ensemble(
            obs.X, obs.Y_score, budget, labels,
            root_seed=cfg.seed, iteration=t,
            family_ids=cfg.family_ids(),
            b_boot=cfg.ensemble_b_boot,
            kappa=cfg.ensemble_kappa if kappa is None else kappa,
            w_min=cfg.ensemble_w_min, softmax_temp=cfg.ensemble_softmax_temp,
            sigma_floor_rel=cfg.ensemble_sigma_floor_rel,
            min_families=cfg.ensemble_min_families, cv_folds=cfg.ensemble_cv_folds,
            tuned=self._tuned,
        )

    def _dedupe_batch(self, selected: list[int], utility: np.ndarray, X_cand: np.ndarray) -> list[int]:
        """Drop exact-duplicate rows from the batch, refilling down the ranking."""
        seen: set[bytes] = set()
        unique: list[int] = []
        for i in selected:
            key = X_cand[i].tobytes()
            if key not in seen:
                seen.add(key)
                unique.append(i)
        if len(unique) < min(self.spec.batch_size, X_cand.shape[0]):
            for i in np.argsort(-utility, kind="stable"):
                key = X_cand[int(i)].tobytes()
                if key not in seen:
                    seen.add(key)
                    unique.append(int(i))
                if len(unique) >= self.spec.batch_size:
                    break
        return unique

    def _make_record(self, iteration, X, pool_rows, Y_raw, Y_score, diag, oob_summary, deviation, timing):
        obs = self.state.observations
        best_idx = np.argmax(obs.Y_score, axis=0)
        best_score = [float(obs.Y_score[best_idx[t], t]) for t in range(self.spec.n_targets)]
        best_raw = [float(obs.Y_raw[best_idx[t], t]) for t in range(self.spec.n_targets)]
        return IterationRecord(
            iteration=int(iteration),
            batch_X=_jsonable(X),
            batch_pool_rows=_jsonable(pool_rows) if pool_rows is not None else None,
            Y_raw=_jsonable(Y_raw),
            Y_score=_jsonable(Y_score),
            best_so_far_score=best_score,
            best_so_far_raw=best_raw,
            bandwidth=_jsonable(diag["bandwidth"]),
            n_clusters=len(diag["bandwidth"]),
            internal_similarity=float(diag["internal_similarity"]),
            novelty=float(diag["novelty"]),
            dist_to_optimum=diag["dist_to_optimum"],
            oob_summary=_jsonable(oob_summary),
            deviation=_jsonable(deviation),
            seed=int(self.config.seed),
            timing=float(timing),
        )

    def _check_stop(self) -> None:
        if self.status is not None:
            return
        if self.pool_ranks is not None and self.state.pool_indices:
            if success_check(self.state, self.pool_ranks):
                self.status = STATUS_SUCCESS
                return
        thresholds = self.config.parsed_stop_targets()
        if thresholds:
            obs = self.state.observations
            satisfied = np.ones(obs.n, dtype=bool)
            applied = 0
            for t, target in enumerate(self.spec.targets):
                if target.mode == "interval":
                    lo, hi = target.interval_bounds  # type: ignore[misc]
                    satisfied &= (obs.Y_raw[:, t] >= lo) & (obs.Y_raw[:, t] <= hi)
                    applied += 1
                elif target.name in thresholds:
                    if target.mode == "maximize":
                        satisfied &= obs.Y_raw[:, t] >= thresholds[target.name]
                    else:
                        satisfied &= obs.Y_raw[:, t] <= thresholds[target.name]
                    applied += 1
            if applied and np.any(satisfied):
                self.status = STATUS_TARGET

    def finalize(self) -> RunLog:
        obs = self.state.observations
        final_best = []
        if obs.n:
            best_idx = np.argmax(obs.Y_score, axis=0)
            for t in range(self.spec.n_targets):
                i = int(best_idx[t])
                final_best.append(
                    {
                        "target": self.spec.targets[t].name,
                        "x": obs.X[i].tolist(),
                        "raw": float(obs.Y_raw[i, t]),
                        "score": float(obs.Y_score[i, t]),
                    }
                )
        return RunLog(
            config=self.config.as_dict(),
            records=self.records,
            status=self.status or STATUS_BUDGET,
            final_best=final_best,
        )


def run_loop(
    spec: ProblemSpec,
    config: RunConfig,
    oracle: Callable[[np.ndarray], np.ndarray],
    pool_ranks: Optional[np.ndarray] = None,
    optimum: Optional[np.ndarray] = None,
) -> RunLog:
    """Execute the full loop against an in-process oracle.

    The oracle maps an (n, d) design matrix to (n, q) raw outputs; with
    max_iterations = 0 only the initialization record is produced. Screening
    probes used by low-quality initialization are not charged against the
    evaluation budget.
    """
    engine = Engine(spec, config, pool_ranks=pool_ranks, optimum=optimum)
    X0, rows0, Y0 = engine.propose_init(oracle)
    if Y0 is None:
        Y0 = _as_output_matrix(oracle(X0), X0.shape[0])
    engine.ingest_init(X0, Y0, pool_rows=rows0)
    for _ in range(spec.max_iterations):
        if engine.status is not None:
            break
        proposal = engine.propose()
        if proposal is None:
            break
        Y = _as_output_matrix(oracle(proposal.X), proposal.X.shape[0])
        engine.ingest(proposal, Y)
    return engine.finalize()


# ---------------------------------------------------------------------------
# persistence


def save_log(run_log: RunLog, path: str | Path) -> None:
    """Newline-delimited records with a self-describing header and footer."""
    path = Path(path)
    with path.open("w") as handle:
        header = {"format": LOG_FORMAT, "version": LOG_VERSION, "config": run_log.config}
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        for record in run_log.records:
            handle.write(json.dumps(dataclasses.asdict(record), sort_keys=True) + "\n")
        footer = {"terminal": run_log.status, "final_best": run_log.final_best}
        handle.write(json.dumps(footer, sort_keys=True) + "\n")


def load_log(path: str | Path) -> RunLog:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise LogFormatError(f"{path}: empty log file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"{path}: bad header: {exc}") from exc
    if header.get("format") != LOG_FORMAT:
        raise LogFormatError(f"{path}: not a run log")
    if header.get("version") != LOG_VERSION:
        raise LogFormatError(f"{path}: unsupported log version {header.get('version')}")
    try:
        body = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"{path}: truncated or corrupt log: {exc}") from exc
    if not body or "terminal" not in body[-1]:
        raise LogFormatError(f"{path}: missing terminal record (truncated?)")
    footer = body[-1]
    records = [IterationRecord(**row) for row in body[:-1]]
    return RunLog(
        config=header["config"],
        records=records,
        status=footer["terminal"],
        final_best=footer["final_best"],
    )


def save_checkpoint(engine: Engine, path: str | Path) -> None:
    """Binary, versioned snapshot of an engine for ask-tell resumption."""
    obs = engine.state.observations
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": engine.config.as_dict(),
        "t": engine.state.t,
        "status": engine.status,
        "oracle_calls": engine.oracle_calls,
        "tuned": [[list(k), v] for k, v in engine._tuned.items()],
        "tuned_budget": engine._tuned_budget,
        "records": [dataclasses.asdict(r) for r in engine.records],
        "pool_indices": list(engine.state.pool_indices or []) if engine.state.pool_indices is not None else None,
        "pending": None,
        "pending_init": None,
    }
    arrays = {
        "X": obs.X,
        "Y_raw": obs.Y_raw,
        "iteration_tag": obs.iteration_tag,
    }
    if engine.pending_init is not None:
        init_X, init_rows = engine.pending_init
        meta["pending_init"] = {"has_rows": init_rows is not None}
        arrays["pending_init_X"] = init_X
        if init_rows is not None:
            arrays["pending_init_rows"] = init_rows
    if engine.pending is not None:
        p = engine.pending
        meta["pending"] = {
            "iteration": p.iteration,
            "n_clusters": p.n_clusters,
            "bandwidth": p.bandwidth,
            "oob_summary": p.oob_summary,
            "deviation": p.deviation,
            "timing": p.timing,
            "has_rows": p.pool_rows is not None,
        }
        arrays["pending_X"] = p.X
        arrays["pending_labels"] = p.batch_labels
        if p.pool_rows is not None:
            arrays["pending_rows"] = p.pool_rows
    np.savez_compressed(path, meta=json.dumps(meta), **arrays)


def load_checkpoint(path: str | Path, spec: ProblemSpec, pool_ranks=None, optimum=None) -> Engine:
    try:
        data = np.load(path, allow_pickle=False)
        meta = json.loads(str(data["meta"]))
    except Exception as exc:  # noqa: BLE001
        raise LogFormatError(f"{path}: unreadable checkpoint: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise LogFormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    config = RunConfig.from_dict(meta["config"])
    engine = Engine(spec, config, pool_ranks=pool_ranks, optimum=optimum)
    from .core import normalize_targets

    X, Y_raw = data["X"], data["Y_raw"]
    engine.state = replace(
        engine.state,
        observations=ObservationSet(
            X=X,
            Y_raw=Y_raw,
            Y_score=normalize_targets(Y_raw, spec.targets) if len(X) else np.empty((0, spec.n_targets)),
            iteration_tag=data["iteration_tag"],
        ),
        t=int(meta["t"]),
        pool_indices=tuple(meta["pool_indices"]) if meta["pool_indices"] is not None else None,
    )
    engine.status = meta["status"]
    engine.oracle_calls = int(meta["oracle_calls"])
    engine._tuned = {tuple(k): v for k, v in meta["tuned"]}
    engine._tuned_budget = meta["tuned_budget"]
    engine.records = [IterationRecord(**row) for row in meta["records"]]
    if meta.get("pending_init") is not None:
        engine.pending_init = (
            data["pending_init_X"],
            data["pending_init_rows"] if meta["pending_init"]["has_rows"] else None,
        )
    if meta["pending"] is not None:
        p = meta["pending"]
        engine.pending = Proposal(
            iteration=int(p["iteration"]),
            X=data["pending_X"],
            pool_rows=data["pending_rows"] if p["has_rows"] else None,
            batch_labels=data["pending_labels"],
            n_clusters=int(p["n_clusters"]),
            bandwidth=p["bandwidth"],
            oob_summary=p["oob_summary"],
            deviation=p["deviation"],
            timing=float(p["timing"]),
        )
    return engine
