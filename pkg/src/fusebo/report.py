"""Campaign reporting: tidy per-iteration tables and rendered figures.

Tables are plain delimited text that any plotting tool can consume; the
figures (convergence curves and run diagnostics) are rendered from the same
data and written alongside them.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .controller import RunLog


def summary_frame(logs: Sequence[RunLog], seeds: Sequence[int]) -> pd.DataFrame:
    rows = []
    for run_index, (run_log, seed) in enumerate(zip(logs, seeds)):
        last = run_log.records[-1]
        row = {
            "run": run_index,
            "seed": seed,
            "status": run_log.status,
            "iterations": last.iteration,
            "oracle_calls": sum(len(r.batch_X) for r in run_log.records),
            "success": run_log.status == "success-criterion",
            "iters_to_stop": last.iteration if run_log.status in ("success-criterion", "target-reached") else None,
        }
        for t, best in enumerate(run_log.final_best):
            row[f"best_raw_{best['target']}"] = best["raw"]
            row[f"best_score_{best['target']}"] = best["score"]
        if last.dist_to_optimum is not None:
            row["final_dist_to_optimum"] = min(
                r.dist_to_optimum for r in run_log.records if r.dist_to_optimum is not None
            )
        rows.append(row)
    return pd.DataFrame(rows)


def curves_frame(logs: Sequence[RunLog], seeds: Sequence[int]) -> pd.DataFrame:
    rows = []
    for run_index, (run_log, seed) in enumerate(zip(logs, seeds)):
        best_dist = np.inf
        for record in run_log.records:
            if record.dist_to_optimum is not None:
                best_dist = min(best_dist, record.dist_to_optimum)
            row = {
                "run": run_index,
                "seed": seed,
                "iteration": record.iteration,
                "novelty": record.novelty,
                "internal_similarity": record.internal_similarity,
                "n_clusters": record.n_clusters,
            }
            for t, score in enumerate(record.best_so_far_score):
                row[f"best_score_{t}"] = score
                row[f"best_raw_{t}"] = record.best_so_far_raw[t]
            if record.dist_to_optimum is not None:
                row["dist_to_optimum"] = record.dist_to_optimum
                row["best_dist_to_optimum"] = best_dist
            for t, dev in enumerate(record.deviation):
                row[f"alpha_{t}"] = dev["alpha"]
                row[f"lam_r2_{t}"] = dev["lam_r2"]
                row[f"lam_elpd_{t}"] = dev["lam_elpd"]
            rows.append(row)
    return pd.DataFrame(rows)


def percentile_frame(curves: pd.DataFrame, column: str) -> pd.DataFrame:
    """Mean and 10/50/90 percentiles of one curve column per iteration."""
    grouped = curves.groupby("iteration")[column]
    out = grouped.agg(mean="mean")
    for p in (10, 50, 90):
        out[f"p{p}"] = grouped.quantile(p / 100.0)
    return out.reset_index()


def write_tables(out_dir: Path, logs: Sequence[RunLog], seeds: Sequence[int]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summary_frame(logs, seeds)
    curves = curves_frame(logs, seeds)
    summary.to_csv(out_dir / "summary.csv", index=False)
    curves.to_csv(out_dir / "curves.csv", index=False)
    band = percentile_frame(curves, "best_raw_0")
    if "best_dist_to_optimum" in curves:
        dist_band = percentile_frame(curves.dropna(subset=["best_dist_to_optimum"]), "best_dist_to_optimum")
        band = band.merge(dist_band, on="iteration", suffixes=("_best", "_dist"))
    band.to_csv(out_dir / "curves_aggregate.csv", index=False)


def render_convergence(out_dir: Path, logs: Sequence[RunLog], seeds: Sequence[int], title: str) -> Path:
    """Best-so-far and distance-to-optimum curves, individual runs plus mean."""
    curves = curves_frame(logs, seeds)
    has_dist = "best_dist_to_optimum" in curves.columns
    fig, axes = plt.subplots(2 if has_dist else 1, 1, figsize=(7, 7 if has_dist else 4), sharex=True)
    axes = np.atleast_1d(axes)

    for run in curves["run"].unique():
        sub = curves[curves["run"] == run]
        axes[0].plot(sub["iteration"], sub["best_raw_0"], color="steelblue", alpha=0.35, lw=0.8)
    agg = percentile_frame(curves, "best_raw_0")
    axes[0].plot(agg["iteration"], agg["mean"], color="crimson", lw=2.2, label="mean")
    axes[0].set_ylabel("best-so-far objective")
    axes[0].legend(loc="best")
    axes[0].set_title(title)

    if has_dist:
        for run in curves["run"].unique():
            sub = curves[curves["run"] == run].dropna(subset=["best_dist_to_optimum"])
            axes[1].plot(sub["iteration"], sub["best_dist_to_optimum"], color="mediumseagreen", alpha=0.35, lw=0.8)
        agg_d = percentile_frame(curves.dropna(subset=["best_dist_to_optimum"]), "best_dist_to_optimum")
        axes[1].plot(agg_d["iteration"], agg_d["mean"], color="darkgreen", lw=2.2, label="mean")
        axes[1].set_ylabel("min distance to optimum")
        axes[1].set_yscale("log")
        axes[1].legend(loc="best")
    axes[-1].set_xlabel("iteration")
    fig.tight_layout()
    path = out_dir / "convergence.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_diagnostics(out_dir: Path, run_log: RunLog, title: str) -> Optional[Path]:
    """Novelty/similarity and deviation-ratio traces for one run."""
    records = [r for r in run_log.records if r.iteration > 0]
    if not records:
        return None
    iters = [r.iteration for r in records]
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    axes[0].plot(iters, [r.novelty for r in records], label="novelty", color="darkorange")
    axes[0].plot(iters, [r.internal_similarity for r in records], label="internal similarity", color="steelblue")
    axes[0].set_ylabel("standardized distance")
    axes[0].legend(loc="best")
    axes[0].set_title(title)

    if records[0].deviation:
        axes[1].plot(iters, [r.deviation[0]["lam_r2"] for r in records], label="dev ratio (R2)", color="crimson")
        axes[1].plot(iters, [r.deviation[0]["lam_elpd"] for r in records], label="dev ratio (ELPD)", color="purple")
        axes[1].plot(iters, [r.deviation[0]["alpha"] for r in records], label="alpha", color="gray", ls="--")
    axes[1].set_ylabel("fusion gating")
    axes[1].set_xlabel("iteration")
    axes[1].legend(loc="best")
    fig.tight_layout()
    path = out_dir / "diagnostics.png"
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
