"""Stage 1: heterogeneous surrogate reservoir on target-biased bootstraps.

Each family is tuned once under the stage-0 budget, then refitted as a set of
bootstrap members whose spread carries the predictive uncertainty. Out-of-bag
rows provide unbiased accuracy, calibration, trend, and stability scores that
are normalized into family reliability weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from .capacity import CapacityBudget
from .core import STAGE_BOOT, STAGE_TUNE, substream
from .families import Family, FamilyFitError, MemberSet, get_family

log = logging.getLogger(__name__)

METRICS = ("r2", "elpd", "stability", "trend")


class EnsembleAbortError(RuntimeError):
    """Fewer than the minimum number of families survived fitting."""


@dataclass(frozen=True)
class OOBScores:
    r2: float
    elpd: float
    stability: float
    trend: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.r2, self.elpd, self.stability, self.trend)


@dataclass
class OOBScoreTable:
    """Raw and min-max-normalized OOB scores per (family, target)."""

    raw: dict[tuple[str, int], OOBScores]
    normalized: dict[tuple[str, int], OOBScores]

    def families_for(self, target: int) -> list[str]:
        return [fam for fam, tgt in self.raw if tgt == target]


@dataclass
class FittedFamily:
    family_id: str
    capacity_class: str
    config: dict
    members: MemberSet
    oob_pred: np.ndarray  # (B, n); NaN where the row was in-bag


@dataclass
class EnsembleModel:
    families: list[dict[str, FittedFamily]]  # one dict per target
    oob: OOBScoreTable
    reliability: list[dict[str, float]]  # simplex weights per target
    sigma_floor: np.ndarray  # (q,)
    oob_mu: dict[tuple[str, int], np.ndarray]  # aggregated OOB means, NaN = uncovered

    @property
    def n_targets(self) -> int:
        return len(self.families)

    def family_ids(self, target: int) -> list[str]:
        return list(self.families[target])


@dataclass
class TuneResult:
    config: dict
    n_trials: int
    scores: np.ndarray


def compute_bootstrap_weights(
    y: np.ndarray, cluster_labels: np.ndarray, kappa: float = 1.0
) -> np.ndarray:
    """Rank-based upweighting of high-score rows within each cluster.

    Within a cluster the best row gets rank fraction 1 and weight 1 + kappa;
    ties share averaged ranks, so constant scores produce uniform weights.
    The result is normalized to sum to n. Being rank-based, no temperature
    parameter is involved.
    """
    y = np.asarray(y, dtype=float)
    labels = np.asarray(cluster_labels)
    n = y.size
    weights = np.ones(n)
    for label in np.unique(labels):
        members = np.where(labels == label)[0]
        if members.size == 1:
            rank_frac = np.array([0.5])
        else:
            ranks = rankdata(y[members], method="average")
            rank_frac = (ranks - 1.0) / (members.size - 1.0)
        weights[members] = 1.0 + rank_frac * kappa
    return weights * (n / weights.sum())


def draw_target_biased_bootstrap(
    weights: np.ndarray, n_draw: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted bootstrap indices plus the out-of-bag complement.

    If every row happens to be drawn, a uniform 20% holdout replaces the
    empty OOB set (and is swapped out of the training multiset); when 20%
    rounds down to zero the member simply has no OOB rows.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("bootstrap weights must be non-negative and not all zero")
    n = weights.size
    p = weights / weights.sum()
    idx = rng.choice(n, size=n_draw, replace=True, p=p)
    oob = np.setdiff1d(np.arange(n), idx)
    if oob.size == 0:
        n_hold = int(np.floor(0.2 * n))
        if n_hold == 0:
            return idx, oob
        holdout = rng.choice(n, size=n_hold, replace=False)
        replace_mask = np.isin(idx, holdout)
        if replace_mask.any():
            allowed = np.setdiff1d(np.arange(n), holdout)
            p_allowed = weights[allowed]
            p_allowed = p_allowed / p_allowed.sum() if p_allowed.sum() > 0 else None
            idx = idx.copy()
            idx[replace_mask] = rng.choice(allowed, size=int(replace_mask.sum()), replace=True, p=p_allowed)
        oob = np.sort(holdout)
    return idx, oob


def tune_family_hyperparameters(
    family_id: str,
    X: np.ndarray,
    y: np.ndarray,
    budget: CapacityBudget,
    rng: np.random.Generator,
    cv_folds: int = 3,
) -> TuneResult:
    """Random search of exactly ``n_budget`` configurations, scored by CV R2.

    Repeated configurations (the discrete search grids are small) are scored
    once and cached. A family whose every trial fails raises FamilyFitError.
    """
    family = get_family(family_id)
    configs = [family.sample_config(rng, budget) for _ in range(budget.n_budget)]
    n = X.shape[0]
    n_folds = max(2, min(cv_folds, n))
    fold_ids = rng.permutation(n) % n_folds
    seed = int(rng.integers(2**31))
    scores = family.cv_scores(X, y, configs, fold_ids, seed)
    if not np.any(np.isfinite(scores)):
        raise FamilyFitError(f"{family_id}: every tuning trial failed")
    best = int(np.argmax(scores))
    return TuneResult(config=configs[best], n_trials=len(configs), scores=scores)


def sigma_floor_for(y_score: np.ndarray, rel: float = 1e-6) -> float:
    span = float(np.max(y_score) - np.min(y_score)) if y_score.size else 0.0
    return rel * max(span, rel)


def predict_family_moments(
    model: EnsembleModel, family_id: str, target: int, X_query: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Member mean and population-SD spread (floored) at the query points."""
    try:
        fitted = model.families[target][family_id]
    except KeyError as exc:
        raise KeyError(f"family {family_id!r} not fitted for target {target}") from exc
    preds = fitted.members.predict_all(np.atleast_2d(X_query))
    mu = preds.mean(axis=0)
    sigma = preds.std(axis=0, ddof=0) + model.sigma_floor[target]
    return mu, sigma


def gaussian_elpd(y: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Mean log density of ``y`` under per-row Normal(mu, sigma^2), in nats."""
    sigma = np.maximum(sigma, 1e-300)
    log_density = -0.5 * np.log(2.0 * np.pi * sigma**2) - (y - mu) ** 2 / (2.0 * sigma**2)
    return float(np.mean(log_density))


def oob_r2(y: np.ndarray, mu: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - mu) ** 2))
    if ss_tot <= 1e-300:
        return 0.0 if ss_res > 1e-300 else 1.0
    return 1.0 - ss_res / ss_tot


def clusterwise_trend(mu: np.ndarray, y: np.ndarray, labels: np.ndarray) -> float:
    """Mean within-cluster Spearman correlation between predictions and truth.

    Clusters without enough points or without variation contribute nothing;
    if no cluster qualifies the trend is 0.
    """
    values = []
    for label in np.unique(labels):
        members = labels == label
        if members.sum() < 2:
            continue
        mu_c, y_c = mu[members], y[members]
        if np.all(mu_c == mu_c[0]) or np.all(y_c == y_c[0]):
            continue
        rho = spearmanr(mu_c, y_c).statistic
        if np.isfinite(rho):
            values.append(float(rho))
    return float(np.mean(values)) if values else 0.0


def member_stability(member_r2: Sequence[float]) -> float:
    """1 / (1 + coefficient of variation) of per-member OOB R2 values."""
    values = np.asarray([v for v in member_r2 if np.isfinite(v)], dtype=float)
    if values.size <= 1:
        return 1.0
    cv = values.std(ddof=0) / max(abs(values.mean()), 1e-12)
    return 1.0 / (1.0 + cv)


def _minmax_normalize(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def score_oob(
    per_family_oob: dict[str, np.ndarray],
    y: np.ndarray,
    cluster_labels: np.ndarray,
    sigma_floor: float,
) -> tuple[dict[str, OOBScores], dict[str, OOBScores], dict[str, np.ndarray]]:
    """Score one target's families from their (B, n) OOB prediction matrices.

    Families whose OOB predictions cover fewer than half the rows are given
    the column minima rather than unreliable estimates. Returns raw scores,
    normalized scores, and the aggregated OOB mean per family.
    """
    n = y.size
    raw: dict[str, OOBScores] = {}
    agg_mu: dict[str, np.ndarray] = {}
    uncovered: list[str] = []
    no_elpd: list[str] = []
    for family_id, preds in per_family_oob.items():
        counts = np.sum(np.isfinite(preds), axis=0)
        covered = counts > 0
        mu = np.full(n, np.nan)
        if covered.any():
            with np.errstate(invalid="ignore"):
                mu[covered] = np.nanmean(preds[:, covered], axis=0)
        agg_mu[family_id] = mu
        if covered.mean() < 0.5:
            uncovered.append(family_id)
            continue
        y_cov, mu_cov = y[covered], mu[covered]
        # calibration needs a defined spread: use rows seen by >= 2 members
        multi = counts >= 2
        if multi.any():
            with np.errstate(invalid="ignore"):
                sd = np.nanstd(preds[:, multi], axis=0, ddof=0)
            sd = np.where(np.isfinite(sd), sd, 0.0) + sigma_floor
            elpd = gaussian_elpd(y[multi], mu[multi], sd)
        else:
            elpd = np.nan
            no_elpd.append(family_id)
        member_r2s = []
        for b in range(preds.shape[0]):
            rows = np.isfinite(preds[b])
            if rows.sum() >= 2 and np.ptp(y[rows]) > 0:
                member_r2s.append(oob_r2(y[rows], preds[b, rows]))
        raw[family_id] = OOBScores(
            r2=oob_r2(y_cov, mu_cov),
            elpd=elpd,
            stability=member_stability(member_r2s),
            trend=clusterwise_trend(mu_cov, y_cov, cluster_labels[covered]),
        )
    finite_elpds = [s.elpd for s in raw.values() if np.isfinite(s.elpd)]
    elpd_floor = min(finite_elpds) if finite_elpds else 0.0
    for family_id in no_elpd:
        scores = raw[family_id]
        raw[family_id] = OOBScores(scores.r2, elpd_floor, scores.stability, scores.trend)
    if raw:
        floors = {m: min(getattr(s, m) for s in raw.values()) for m in METRICS}
    else:
        floors = {m: 0.0 for m in METRICS}
    for family_id in uncovered:
        raw[family_id] = OOBScores(**floors)

    order = list(per_family_oob)
    normalized: dict[str, OOBScores] = {}
    norm_cols = {
        m: _minmax_normalize(np.array([getattr(raw[f], m) for f in order])) for m in METRICS
    }
    for i, family_id in enumerate(order):
        normalized[family_id] = OOBScores(**{m: float(norm_cols[m][i]) for m in METRICS})
    return raw, normalized, agg_mu


def compute_reliability_weights(
    normalized: dict[str, OOBScores], w_min: float = 0.02, temperature: float = 1.0
) -> dict[str, float]:
    """Softmax of mean normalized scores, floored and renormalized."""
    order = list(normalized)
    raw = np.array([np.mean(normalized[f].as_tuple()) for f in order])
    z = np.exp((raw - raw.max()) / temperature)
    w = z / z.sum()
    w = np.maximum(w, w_min)
    w = w / w.sum()
    return {f: float(w[i]) for i, f in enumerate(order)}


def fit_ensemble(
    X: np.ndarray,
    Y_score: np.ndarray,
    budget: CapacityBudget,
    cluster_labels: np.ndarray,
    root_seed: int,
    iteration: int,
    family_ids: Sequence[str],
    b_boot: int = 16,
    kappa: float = 1.0,
    w_min: float = 0.02,
    softmax_temp: float = 1.0,
    sigma_floor_rel: float = 1e-6,
    min_families: int = 3,
    cv_folds: int = 3,
    tuned: Optional[dict[tuple[str, int], dict]] = None,
) -> EnsembleModel:
    """Tune once per (family, target), then fit bootstrap member sets.

    Failed families are dropped with a warning; fewer than ``min_families``
    survivors abort the iteration. All randomness comes from substreams keyed
    by (iteration, family, target, member), so results are independent of
    fitting order.
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y_score, dtype=float))
    n, q = Y.shape
    labels = np.asarray(cluster_labels)
    families_per_target: list[dict[str, FittedFamily]] = []
    raw_all: dict[tuple[str, int], OOBScores] = {}
    norm_all: dict[tuple[str, int], OOBScores] = {}
    oob_mu: dict[tuple[str, int], np.ndarray] = {}
    reliability: list[dict[str, float]] = []
    sigma_floor = np.array([sigma_floor_for(Y[:, t], sigma_floor_rel) for t in range(q)])

    for t in range(q):
        y = Y[:, t]
        weights = compute_bootstrap_weights(y, labels, kappa=kappa)
        fitted: dict[str, FittedFamily] = {}
        per_family_oob: dict[str, np.ndarray] = {}
        for f_idx, family_id in enumerate(family_ids):
            family = get_family(family_id)
            try:
                key = (family_id, t)
                if tuned is not None and key in tuned:
                    config = tuned[key]
                else:
                    tune_rng = substream(root_seed, STAGE_TUNE, iteration, f_idx, t)
                    config = tune_family_hyperparameters(
                        family_id, X, y, budget, tune_rng, cv_folds=cv_folds
                    ).config
                    if tuned is not None:
                        tuned[key] = config
                boot_idx, oob_sets, seeds = [], [], []
                for b in range(b_boot):
                    boot_rng = substream(root_seed, STAGE_BOOT, iteration, f_idx, t, b)
                    idx, oob = draw_target_biased_bootstrap(weights, n, boot_rng)
                    boot_idx.append(idx)
                    oob_sets.append(oob)
                    seeds.append(int(boot_rng.integers(2**31)))
                members = family.fit_members(X, y, config, boot_idx, seeds)
                full_pred = members.predict_all(X)
                oob_pred = np.full((b_boot, n), np.nan)
                for b, oob in enumerate(oob_sets):
                    oob_pred[b, oob] = full_pred[b, oob]
                fitted[family_id] = FittedFamily(
                    family_id=family_id,
                    capacity_class=family.capacity_class,
                    config=config,
                    members=members,
                    oob_pred=oob_pred,
                )
                per_family_oob[family_id] = oob_pred
            except (FamilyFitError, np.linalg.LinAlgError, ValueError) as exc:
                log.warning("dropping family %s for target %d: %s", family_id, t, exc)
        if len(fitted) < min_families:
            raise EnsembleAbortError(
                f"only {len(fitted)} families survived for target {t}; need {min_families}"
            )
        raw, normalized, agg = score_oob(per_family_oob, y, labels, float(sigma_floor[t]))
        for family_id in fitted:
            raw_all[(family_id, t)] = raw[family_id]
            norm_all[(family_id, t)] = normalized[family_id]
            oob_mu[(family_id, t)] = agg[family_id]
        reliability.append(
            compute_reliability_weights(normalized, w_min=w_min, temperature=softmax_temp)
        )
        families_per_target.append(fitted)

    return EnsembleModel(
        families=families_per_target,
        oob=OOBScoreTable(raw=raw_all, normalized=norm_all),
        reliability=reliability,
        sigma_floor=sigma_floor,
        oob_mu=oob_mu,
    )
