"""Stage 3: per-candidate acquisition from fused multi-model evidence.

Per target, three z-normalized channels are built: a reliability-weighted
UCB channel, a precision-weighted Kalman-style consensus channel (KF), and a
variance-amplified reverse channel (rKF) that is large where families are
jointly optimistic yet mutually divergent. Deviation ratios computed from
normalized out-of-bag scores gate the KF/rKF mix; the channels combine via a
signed L2 fusion. Multi-target problems score the fused posterior by Monte
Carlo expected hypervolume improvement under a correlated residual model,
and the structural weight pi(x) multiplies the result into the final
utility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_ndtr

from .core import STAGE_MC, pareto_non_dominated, substream
from .ensemble import EnsembleModel, predict_family_moments


@dataclass
class SnrChannels:
    peak: np.ndarray  # sigma-units above the 90th percentile of observed scores
    boundary: np.ndarray  # logit probability of beating the incumbent


@dataclass
class DeviationRatios:
    lam_r2: float
    lam_elpd: float
    alpha: float


@dataclass
class AcquisitionBreakdown:
    """Per-candidate scores at every fusion step, for diagnostics and replay."""

    model_channel: np.ndarray  # (q, m)
    kf_score: np.ndarray  # (q, m)
    rkf_score: np.ndarray  # (q, m)
    mu_kf: np.ndarray  # (q, m)
    sigma_kf: np.ndarray  # (q, m)
    fused: np.ndarray  # (q, m) target-wise A_t
    deviation: list[DeviationRatios]
    gamma_ee: list[dict[str, float]]
    s_mo: np.ndarray  # (m,)
    pi: np.ndarray  # (m,)
    utility: np.ndarray  # (m,)


def zscore(values: np.ndarray) -> np.ndarray:
    """Standardize over candidates; a constant vector maps to all zeros."""
    sd = values.std(ddof=0)
    if sd <= 0:
        return np.zeros_like(values)
    return (values - values.mean()) / sd


def compute_snr_channels(
    mu: np.ndarray, sigma: np.ndarray, observed_scores: np.ndarray, cap: float = 50.0
) -> SnrChannels:
    """Dual-channel SNR separating high peaks from broad improvement fronts.

    peak: distance of the prediction above the 90th percentile of observed
    scores, in posterior sigma units. boundary: logit of the standard-normal
    probability that the prediction beats the incumbent best. Both capped.
    """
    q90 = np.percentile(observed_scores, 90)
    y_best = np.max(observed_scores)
    peak = np.clip((mu - q90) / sigma, -cap, cap)
    z = (mu - y_best) / sigma
    boundary = np.clip(log_ndtr(z) - log_ndtr(-z), -cap, cap)
    return SnrChannels(peak=peak, boundary=boundary)


def compute_gamma_ee(
    snr: SnrChannels, trend: float, trend_gain: float = 0.2, eps: float = 1e-9
) -> float:
    """Exploitation share in [0, 1] for one (family, target).

    Dominant peak signal pushes toward exploitation, dominant boundary signal
    toward exploration; a positive structural trend shifts the balance
    slightly toward exploitation.
    """
    p = float(np.mean(np.maximum(snr.peak, 0.0)))
    b = float(np.mean(np.maximum(snr.boundary, 0.0)))
    gamma = p / (p + b + eps) + trend_gain * ((trend + 1.0) / 2.0 - 0.5)
    return float(np.clip(gamma, 0.0, 1.0))


def model_acquisition_channel(
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    reliability: dict[str, float],
    gamma_ee: dict[str, float],
    beta_min: float = 0.5,
    beta_max: float = 3.0,
) -> np.ndarray:
    """Reliability-weighted UCB across families, z-normalized.

    Each family's confidence multiplier interpolates from beta_min at full
    exploitation (gamma 1) to beta_max at full exploration (gamma 0).
    """
    channel = None
    for family_id, (mu, sigma) in moments.items():
        beta = beta_min + (1.0 - gamma_ee[family_id]) * (beta_max - beta_min)
        ucb = reliability[family_id] * (mu + beta * sigma)
        channel = ucb if channel is None else channel + ucb
    return zscore(channel)


def kf_rkf_fuse(
    moments: dict[str, tuple[np.ndarray, np.ndarray]],
    reliability: dict[str, float],
    kf_sigma_gain: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Consensus (KF) and disagreement-amplifying (rKF) fusion channels.

    KF weights each family by reliability over predictive variance, favoring
    agreement; rKF weights by reliability times variance and adds the
    weighted spread of family means, lighting up where families are
    optimistic but divergent. Returns (mu_kf, sigma_kf, kf_z, rkf_z).
    """
    fams = list(moments)
    mu = np.stack([moments[f][0] for f in fams])  # (F, m)
    sigma = np.stack([moments[f][1] for f in fams])
    w = np.array([reliability[f] for f in fams])[:, None]

    u = w / sigma**2
    u_sum = u.sum(axis=0)
    mu_kf = (u * mu).sum(axis=0) / u_sum
    sigma_kf = np.sqrt(1.0 / u_sum)
    kf_raw = mu_kf + kf_sigma_gain * sigma_kf

    v = w * sigma**2
    v_sum = v.sum(axis=0)
    mu_rkf = (v * mu).sum(axis=0) / v_sum
    spread = (v * (mu - mu_rkf) ** 2).sum(axis=0) / v_sum
    rkf_raw = mu_rkf + np.sqrt(spread)
    return mu_kf, sigma_kf, zscore(kf_raw), zscore(rkf_raw)


def compute_deviation_ratios(
    r2_norm: np.ndarray, elpd_norm: np.ndarray, alpha_gain: float = 2.0
) -> DeviationRatios:
    """Mean-times-variance of normalized OOB scores per channel, gating alpha.

    Unanimous (or single-family) channels have zero variance and therefore
    alpha 0; strong-but-heterogeneous channels push alpha toward the rKF end.
    """
    r2_norm = np.asarray(r2_norm, dtype=float)
    elpd_norm = np.asarray(elpd_norm, dtype=float)
    lam_r2 = float(r2_norm.mean() * r2_norm.var()) if r2_norm.size > 1 else 0.0
    lam_elpd = float(elpd_norm.mean() * elpd_norm.var()) if elpd_norm.size > 1 else 0.0
    alpha = float(np.clip(alpha_gain * (lam_r2 + lam_elpd), 0.0, 1.0))
    return DeviationRatios(lam_r2=lam_r2, lam_elpd=lam_elpd, alpha=alpha)


def fuse_channels(
    model_channel: np.ndarray, kf_score: np.ndarray, rkf_score: np.ndarray, alpha: float
) -> np.ndarray:
    """Signed L2 late fusion of the model channel with the KF/rKF mix.

    Jointly positive parts reinforce like a Euclidean norm, jointly negative
    parts penalize the same way, so the ordering of aligned channels is
    preserved.
    """
    fusion = (1.0 - alpha) * kf_score + alpha * rkf_score
    positive = np.hypot(np.maximum(model_channel, 0.0), np.maximum(fusion, 0.0))
    negative = np.hypot(np.maximum(-model_channel, 0.0), np.maximum(-fusion, 0.0))
    return positive - negative


def estimate_residual_covariance(
    model: EnsembleModel, Y_score: np.ndarray, shrinkage: float = 0.1
) -> np.ndarray:
    """Covariance of reliability-weighted OOB residuals across targets.

    Residuals use each row's covering families with renormalized weights;
    rows uncovered for any target are dropped. The empirical covariance is
    shrunk toward its diagonal and eigenvalue-clipped to stay PSD.
    """
    Y = np.atleast_2d(np.asarray(Y_score, dtype=float))
    n, q = Y.shape
    residual = np.full((n, q), np.nan)
    for t in range(q):
        fams = model.family_ids(t)
        mus = np.stack([model.oob_mu[(f, t)] for f in fams])  # (F, n)
        w = np.array([model.reliability[t][f] for f in fams])[:, None]
        covered = np.isfinite(mus)
        w_eff = np.where(covered, w, 0.0)
        w_total = w_eff.sum(axis=0)
        rows = w_total > 0
        agg = np.where(covered, mus * w_eff, 0.0).sum(axis=0)
        residual[rows, t] = Y[rows, t] - agg[rows] / w_total[rows]
    complete = np.all(np.isfinite(residual), axis=1)
    R = residual[complete]
    if R.shape[0] < 2:
        return np.eye(q)
    emp = np.atleast_2d(np.cov(R.T))
    shrunk = (1.0 - shrinkage) * emp + shrinkage * np.diag(np.diag(emp))
    eigvals, eigvecs = np.linalg.eigh(shrunk)
    clipped = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
    return 0.5 * (clipped + clipped.T)


# ---------------------------------------------------------------------------
# hypervolume and MC-EHVI


def _front_2d(points: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Non-dominated points strictly above ref, sorted by x descending."""
    pts = points[np.all(points > ref, axis=1)]
    if pts.shape[0] == 0:
        return pts
    pts = pts[pareto_non_dominated(pts)]
    return pts[np.argsort(-pts[:, 0], kind="stable")]


def _hv_2d(points: np.ndarray, ref: np.ndarray) -> float:
    pts = _front_2d(points, ref)
    hv = 0.0
    y_prev = ref[1]
    for x, y in pts:
        hv += (x - ref[0]) * (y - y_prev)
        y_prev = y
    return hv


def _hv_3d(points: np.ndarray, ref: np.ndarray) -> float:
    pts = points[np.all(points > ref, axis=1)]
    if pts.shape[0] == 0:
        return 0.0
    pts = pts[pareto_non_dominated(pts)]
    order = np.argsort(-pts[:, 2], kind="stable")
    pts = pts[order]
    hv = 0.0
    levels = pts[:, 2]
    xy: list[np.ndarray] = []
    i = 0
    while i < len(pts):
        z = levels[i]
        while i < len(pts) and levels[i] == z:
            xy.append(pts[i, :2])
            i += 1
        z_next = levels[i] if i < len(pts) else ref[2]
        hv += (z - z_next) * _hv_2d(np.array(xy), ref[:2])
    return hv


def hypervolume(
    front: np.ndarray,
    ref: np.ndarray,
    n_mc: int = 65536,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Lebesgue measure of the union of boxes [ref, p] over the front.

    Exact sweeps for one to three objectives; Monte Carlo beyond that (the
    estimate's standard error is available through hypervolume_mc).
    """
    front = np.atleast_2d(np.asarray(front, dtype=float))
    ref = np.asarray(ref, dtype=float)
    q = front.shape[1]
    if q == 1:
        better = front[front[:, 0] > ref[0], 0]
        return float(better.max() - ref[0]) if better.size else 0.0
    if q == 2:
        return float(_hv_2d(front, ref))
    if q == 3:
        return float(_hv_3d(front, ref))
    value, _ = hypervolume_mc(front, ref, n_mc=n_mc, rng=rng or np.random.default_rng(0))
    return value


def hypervolume_mc(
    front: np.ndarray, ref: np.ndarray, n_mc: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Monte Carlo hypervolume estimate with its standard error."""
    front = np.atleast_2d(np.asarray(front, dtype=float))
    pts = front[np.all(front > ref, axis=1)]
    if pts.shape[0] == 0:
        return 0.0, 0.0
    upper = pts.max(axis=0)
    box_volume = float(np.prod(upper - ref))
    samples = rng.uniform(ref, upper, size=(n_mc, len(ref)))
    covered = np.zeros(n_mc, dtype=bool)
    for p in pts:
        covered |= np.all(samples <= p, axis=1)
    frac = covered.mean()
    se = box_volume * math.sqrt(max(frac * (1.0 - frac), 0.0) / n_mc)
    return box_volume * frac, se


def _contribution_2d(front: np.ndarray, ref: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Exclusive hypervolume of points (px, py) over a fixed 2-D front.

    Vectorized over the points via the front's step-function envelope.
    """
    pts = _front_2d(front, ref)
    if pts.shape[0] == 0:
        return np.maximum(px - ref[0], 0.0) * np.maximum(py - ref[1], 0.0)
    xs = pts[::-1, 0]  # ascending x
    ys = pts[::-1, 1]  # descending y
    bounds_lo = np.concatenate([[ref[0]], xs])
    bounds_hi = np.concatenate([xs, [np.inf]])
    heights = np.concatenate([[ys[0]], ys[1:], [ref[1]]])  # envelope per x-segment
    width = np.clip(np.minimum(px[:, None], bounds_hi[None, :]) - bounds_lo[None, :], 0.0, None)
    gain = np.clip(py[:, None] - heights[None, :], 0.0, None)
    out = (width * gain).sum(axis=1)
    out[(px <= ref[0]) | (py <= ref[1])] = 0.0
    return out


def mc_ehvi(
    means: np.ndarray,
    sigmas: np.ndarray,
    residual_cov: np.ndarray,
    front: np.ndarray,
    ref: np.ndarray,
    n_mc: int = 256,
    rng: Optional[np.random.Generator] = None,
    return_se: bool = False,
):
    """Monte Carlo expected hypervolume improvement per candidate.

    The candidate posterior is Gaussian with the fused per-target means and
    scales, correlated according to the residual covariance. One draw matrix
    is shared across candidates (common random numbers), so score differences
    between candidates are not washed out by sampling noise. With a single
    objective this reduces to a Monte Carlo expected improvement.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=float))
    m, q = means.shape
    rng = rng or np.random.default_rng(0)
    Z = rng.standard_normal((n_mc, q))

    if q == 1:
        front = np.atleast_2d(front) if np.size(front) else np.empty((0, 1))
        incumbent = float(front[:, 0].max()) if front.size else float(ref[0])
        draws = means[:, 0][:, None] + sigmas[:, 0][:, None] * Z[:, 0][None, :]
        contrib = np.maximum(draws - incumbent, 0.0)
    else:
        diag = np.sqrt(np.diag(residual_cov))
        safe = np.where(diag > 0, diag, 1.0)
        corr = residual_cov / np.outer(safe, safe)
        np.fill_diagonal(corr, 1.0)
        try:
            L = np.linalg.cholesky(corr)
        except np.linalg.LinAlgError:
            L = np.linalg.cholesky(corr + 1e-9 * np.eye(q))
        corr_z = Z @ L.T  # (n_mc, q)
        base_hv = hypervolume(front, ref)
        contrib = np.empty((m, n_mc))
        if q == 2:
            for i in range(m):
                draws = means[i] + corr_z * sigmas[i]
                contrib[i] = _contribution_2d(front, ref, draws[:, 0], draws[:, 1])
        else:
            for i in range(m):
                draws = means[i] + corr_z * sigmas[i]
                for s in range(n_mc):
                    contrib[i, s] = hypervolume(np.vstack([front, draws[s]]), ref) - base_hv
    score = contrib.mean(axis=1)
    if return_se:
        return score, contrib.std(axis=1, ddof=0) / math.sqrt(n_mc)
    return score


def reference_point(Y_score: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Per-column minimum pushed down by a fraction of the column range."""
    Y = np.atleast_2d(Y_score)
    col_min = Y.min(axis=0)
    col_range = np.maximum(Y.max(axis=0) - col_min, 1e-6)
    return col_min - margin * col_range


def rank_and_select_batch(
    utility: np.ndarray, cluster_labels: np.ndarray, batch_size: int
) -> list[int]:
    """Greedy utility ranking with a per-cluster cap, relaxed if needed.

    A cluster may hold at most ceil(B/2) batch members on the first pass;
    remaining slots are filled from the ranked list once the cap binds
    everywhere. Returns min(B, m) indices.
    """
    order = np.argsort(-np.asarray(utility), kind="stable")
    cap = max(1, math.ceil(batch_size / 2))
    counts: dict[int, int] = {}
    selected: list[int] = []
    for i in order:
        label = int(cluster_labels[i])
        if counts.get(label, 0) >= cap:
            continue
        selected.append(int(i))
        counts[label] = counts.get(label, 0) + 1
        if len(selected) >= batch_size:
            return selected
    for i in order:
        if len(selected) >= batch_size:
            break
        if int(i) not in set(selected):
            selected.append(int(i))
    return selected


def score_candidates(
    model: EnsembleModel,
    X_cand: np.ndarray,
    Y_score_obs: np.ndarray,
    pi: np.ndarray,
    root_seed: int,
    iteration: int,
    snr_cap: float = 50.0,
    trend_gain: float = 0.2,
    beta_min: float = 0.5,
    beta_max: float = 3.0,
    kf_sigma_gain: float = 0.5,
    alpha_gain: float = 2.0,
    cov_shrinkage: float = 0.1,
    n_mc: int = 256,
    ref_margin: float = 0.1,
) -> AcquisitionBreakdown:
    """Full stage-3 scoring of a candidate matrix."""
    Y_obs = np.atleast_2d(Y_score_obs)
    q = model.n_targets
    m = X_cand.shape[0]
    model_channel = np.zeros((q, m))
    kf_score = np.zeros((q, m))
    rkf_score = np.zeros((q, m))
    mu_kf = np.zeros((q, m))
    sigma_kf = np.zeros((q, m))
    fused = np.zeros((q, m))
    deviations: list[DeviationRatios] = []
    gammas: list[dict[str, float]] = []

    for t in range(q):
        fams = model.family_ids(t)
        moments = {f: predict_family_moments(model, f, t, X_cand) for f in fams}
        observed = Y_obs[:, t]
        gamma_t: dict[str, float] = {}
        for f in fams:
            snr = compute_snr_channels(*moments[f], observed, cap=snr_cap)
            gamma_t[f] = compute_gamma_ee(snr, model.oob.raw[(f, t)].trend, trend_gain)
        reliab = model.reliability[t]
        model_channel[t] = model_acquisition_channel(
            moments, reliab, gamma_t, beta_min=beta_min, beta_max=beta_max
        )
        mu_kf[t], sigma_kf[t], kf_score[t], rkf_score[t] = kf_rkf_fuse(
            moments, reliab, kf_sigma_gain=kf_sigma_gain
        )
        dev = compute_deviation_ratios(
            np.array([model.oob.normalized[(f, t)].r2 for f in fams]),
            np.array([model.oob.normalized[(f, t)].elpd for f in fams]),
            alpha_gain=alpha_gain,
        )
        deviations.append(dev)
        gammas.append(gamma_t)
        fused[t] = fuse_channels(model_channel[t], kf_score[t], rkf_score[t], dev.alpha)

    if q == 1:
        s_mo = fused[0].copy()
    else:
        cov = estimate_residual_covariance(model, Y_obs, shrinkage=cov_shrinkage)
        front = Y_obs[pareto_non_dominated(Y_obs)]
        ref = reference_point(Y_obs, margin=ref_margin)
        rng = substream(root_seed, STAGE_MC, iteration)
        s_mo = mc_ehvi(mu_kf.T, sigma_kf.T, cov, front, ref, n_mc=n_mc, rng=rng)

    utility = pi * s_mo
    return AcquisitionBreakdown(
        model_channel=model_channel,
        kf_score=kf_score,
        rkf_score=rkf_score,
        mu_kf=mu_kf,
        sigma_kf=sigma_kf,
        fused=fused,
        deviation=deviations,
        gamma_ee=gammas,
        s_mo=s_mo,
        pi=np.asarray(pi, dtype=float),
        utility=utility,
    )
