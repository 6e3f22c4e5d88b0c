"""Stage 0: intrinsic-dimension estimation and model-capacity budgeting.

The observed data usually concentrate near a manifold of far lower dimension
than the ambient space. Estimating that dimension and capping surrogate
complexity accordingly keeps the ensemble from fitting high-dimensional noise
when only a few dozen observations exist.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.neighbors import NearestNeighbors

log = logging.getLogger(__name__)

_DIST_FLOOR = 1e-12  # neighbor distances are clipped here before taking logs


@dataclass(frozen=True)
class ComplexityCaps:
    """Per-family complexity ceilings derived from the information budget."""

    max_depth: int
    max_rounds: int
    max_hidden: int
    max_neighbors: int


@dataclass(frozen=True)
class CapacityBudget:
    d_eff: float
    n_budget: int
    caps: ComplexityCaps


def standardize_columns(X: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance columns; constant columns stay zero."""
    X = np.asarray(X, dtype=float)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (X - mean) / std


def estimate_intrinsic_dimension(X: np.ndarray, k_lo: int = 10, k_hi: int = 20) -> float:
    """Maximum-likelihood nearest-neighbor intrinsic dimension of ``X``.

    For each point, the log-ratios of the k-th neighbor distance to closer
    neighbor distances yield a local dimension estimate; estimates are
    averaged over points and over k in [k_lo, k_hi], then clamped to [1, d].
    When too few rows exist the estimate falls back to ``min(d, max(1, n-2))``.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n < 4:
        fallback = float(min(d, max(1, n - 2)))
        log.warning("intrinsic dimension: only %d rows, falling back to %.0f", n, fallback)
        return fallback
    k_hi_eff = min(k_hi, n - 2)
    k_lo_eff = min(k_lo, k_hi_eff)
    if k_hi_eff < k_hi:
        k_lo_eff = min(2, k_hi_eff)

    Z = standardize_columns(X)
    nn = NearestNeighbors(n_neighbors=k_hi_eff + 1).fit(Z)
    dist, _ = nn.kneighbors(Z)
    dist = np.maximum(dist[:, 1:], _DIST_FLOOR)  # drop self-distance
    log_dist = np.log(dist)

    estimates = []
    for k in range(k_lo_eff, k_hi_eff + 1):
        # inverse mean log-ratio log(T_k / T_j), j < k
        ratios = log_dist[:, k - 1][:, None] - log_dist[:, : k - 1]
        inv = np.mean(ratios, axis=1)
        m_hat = 1.0 / np.maximum(inv, _DIST_FLOOR)
        estimates.append(float(np.mean(m_hat)))
    d_eff = float(np.mean(estimates))
    return float(np.clip(d_eff, 1.0, d))


def compute_information_budget(
    d_eff: float,
    n_obs: int,
    remaining_evals: int,
    rho: float = 4.0,
    budget_min: int = 8,
    budget_max: int = 256,
) -> CapacityBudget:
    """Convert data volume per intrinsic dimension into complexity caps.

    ``n_budget`` counts hyperparameter-search trials and seeds all per-family
    caps; each cap grows monotonically with the budget. ``remaining_evals``
    is accepted for interface stability but the current rule derives capacity
    from accumulated data alone.
    """
    del remaining_evals
    n_budget = int(np.clip(math.floor(rho * n_obs / max(d_eff, 1.0)), budget_min, budget_max))
    caps = ComplexityCaps(
        max_depth=int(np.clip(math.floor(math.log2(n_budget)), 2, 8)),
        max_rounds=min(4 * n_budget, 512),
        max_hidden=int(np.clip(2 * n_budget, 8, 128)),
        max_neighbors=int(np.clip(math.floor(math.sqrt(n_obs)), 2, 32)),
    )
    return CapacityBudget(d_eff=float(d_eff), n_budget=n_budget, caps=caps)


def assess_capacity(
    X: np.ndarray,
    Y_score: np.ndarray,
    remaining_evals: int,
    k_lo: int = 10,
    k_hi: int = 20,
    rho: float = 4.0,
    budget_min: int = 8,
    budget_max: int = 256,
) -> CapacityBudget:
    """Stage-0 entry point: estimate d_eff on design-response rows, budget it.

    Scores are appended as standardized extra columns so that response
    structure contributes to the manifold estimate.
    """
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y_score, dtype=float))
    augmented = np.hstack([X, Y])
    d_eff = estimate_intrinsic_dimension(augmented, k_lo=k_lo, k_hi=k_hi)
    return compute_information_budget(
        d_eff, X.shape[0], remaining_evals, rho=rho, budget_min=budget_min, budget_max=budget_max
    )
