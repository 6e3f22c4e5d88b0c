"""Command-line surface: benchmark campaigns, pool runs, and ask-tell sessions.

Every command is deterministic given its flags, seed, and input files;
rerunning a command overwrites its outputs bit-identically. Config precedence
is built-in defaults < config file < command-line overrides.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import click
import numpy as np
import pandas as pd

from . import report
from .config import ConfigError, RunConfig
from .controller import (
    Engine,
    LogFormatError,
    RunLog,
    SessionStateError,
    load_checkpoint,
    load_log,
    run_loop,
    save_checkpoint,
    save_log,
)
from .core import Box, ClosedPool, DomainError, ProblemSpec, TargetSpec
from .oracles import Pool, get_benchmark, load_pool

BENCH_DEFAULTS = {"init": 10, "batch": 10, "iters": 100}
POOL_DEFAULTS = {"init": 20, "batch": 10, "iters": 50}


def _fail(message: str) -> None:
    raise click.ClickException(message)


def _build_config(config_file: Optional[str], sets: Sequence[str], seed: int) -> RunConfig:
    try:
        overrides = {}
        for item in sets:
            key, _, value = item.partition("=")
            if not value:
                _fail(f"--set expects key=value, got {item!r}")
            overrides[key] = value
        overrides["seed"] = seed
        if config_file:
            return RunConfig.from_file(config_file, overrides)
        return RunConfig().with_overrides(overrides)
    except ConfigError as exc:
        _fail(str(exc))


def _parse_modes(mode: str, names: Sequence[str]) -> list[TargetSpec]:
    chunks = [c.strip() for c in mode.split(",")]
    if len(chunks) == 1:
        chunks = chunks * len(names)
    if len(chunks) != len(names):
        _fail(f"--mode lists {len(chunks)} modes for {len(names)} targets")
    specs = []
    for name, chunk in zip(names, chunks):
        if chunk in ("max", "maximize"):
            specs.append(TargetSpec(name, "maximize"))
        elif chunk in ("min", "minimize"):
            specs.append(TargetSpec(name, "minimize"))
        elif chunk.startswith("interval:"):
            try:
                _, lo, hi = chunk.split(":")
                specs.append(TargetSpec(name, "interval", (float(lo), float(hi))))
            except (ValueError, DomainError) as exc:
                _fail(f"bad interval mode {chunk!r}: {exc}")
        else:
            _fail(f"unknown mode {chunk!r}; use max, min, or interval:lo:hi")
    return specs


def _parse_features(spec: str, columns: Sequence[str]) -> list[str]:
    spec = spec.strip()
    if spec.startswith("prefix:"):
        prefix = spec[len("prefix:"):]
        out = [c for c in columns if c.startswith(prefix)]
        if not out:
            _fail(f"no columns start with {prefix!r}")
        return out
    return [c.strip() for c in spec.split(",") if c.strip()]


def _bench_worker(args: dict) -> str:
    """Run one benchmark seed and write its log; safe for process pools."""
    bench = get_benchmark(args["function"], args["dims"])
    targets = (TargetSpec(bench.name, "minimize"),)
    spec = ProblemSpec(
        dimension=bench.dimension,
        domain=bench.box(),
        targets=targets,
        batch_size=args["batch"],
        max_iterations=args["iters"],
        init_count=args["init"],
    )
    config = RunConfig.from_dict(args["config"]).with_overrides({"seed": args["run_seed"]})
    run_log = run_loop(spec, config, bench, optimum=bench.optimum_x)
    path = Path(args["out"]) / f"run_{args['run_index']:03d}.jsonl"
    save_log(run_log, path)
    return str(path)


@click.group()
def main() -> None:
    """Entropy-aware multi-source adaptive sampling."""


@main.command()
@click.option("--function", required=True, help="ackley | rastrigin | schwefel")
@click.option("--dims", default=20, show_default=True)
@click.option("--runs", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--iters", default=BENCH_DEFAULTS["iters"], show_default=True)
@click.option("--batch", default=BENCH_DEFAULTS["batch"], show_default=True)
@click.option("--init", default=BENCH_DEFAULTS["init"], show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--jobs", default=1, show_default=True, help="parallel worker processes")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True, help="config override key=value")
@click.option("--figures/--no-figures", default=True, show_default=True)
def bench(function, dims, runs, seed, iters, batch, init, out, jobs, config_file, sets, figures):
    """Benchmark campaign: independent seeded runs plus summary tables."""
    try:
        get_benchmark(function, dims)
    except DomainError as exc:
        _fail(str(exc))
    config = _build_config(config_file, sets, seed)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = max(1, min(jobs, runs))
    tasks = [
        {
            "function": function,
            "dims": dims,
            "run_seed": seed + run_index,
            "run_index": run_index,
            "iters": iters,
            "batch": batch,
            "init": init,
            "out": str(out_dir),
            "config": config.as_dict(),
        }
        for run_index in range(runs)
    ]
    if jobs == 1:
        paths = [_bench_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            paths = list(pool.map(_bench_worker, tasks))
    logs = [load_log(p) for p in paths]
    seeds = [seed + i for i in range(runs)]
    report.write_tables(out_dir, logs, seeds)
    if figures:
        report.render_convergence(out_dir, logs, seeds, f"{function} {dims}D")
        report.render_diagnostics(out_dir, logs[0], f"{function} {dims}D, seed {seeds[0]}")
    click.echo(f"wrote {runs} run logs to {out_dir}")


class _PoolOracle:
    def __init__(self, pool: Pool):
        self.pool = pool

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.empty((X.shape[0], self.pool.Y.shape[1]))
        for i, row in enumerate(X):
            matches = np.where(np.all(self.pool.X == row, axis=1))[0]
            if matches.size == 0:
                raise DomainError("query is not a pool row")
            out[i] = self.pool.Y[matches[0]]
        return out


def _pool_problem(pool: Pool, targets, batch, iters, init) -> ProblemSpec:
    return ProblemSpec(
        dimension=pool.dimension,
        domain=ClosedPool(pool.X, known_Y=pool.Y),
        targets=tuple(targets),
        batch_size=batch,
        max_iterations=iters,
        init_count=init,
    )


def run_pool_campaign(
    pool: Pool,
    targets: Sequence[TargetSpec],
    config: RunConfig,
    runs: int,
    seed: int,
    iters: int,
    batch: int,
    init: int,
) -> tuple[list[RunLog], list[int]]:
    """Seeded closed-pool runs with the rank-based success criterion."""
    spec = _pool_problem(pool, targets, batch, iters, init)
    ranks = pool.ranks(targets)
    oracle = _PoolOracle(pool)
    logs, seeds = [], []
    for run_index in range(runs):
        run_seed = seed + run_index
        run_config = config.with_overrides({"seed": run_seed})
        logs.append(run_loop(spec, run_config, oracle, pool_ranks=ranks))
        seeds.append(run_seed)
    return logs, seeds


@main.command("pool-run")
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, help="comma list or prefix:<p>")
@click.option("--targets", required=True, help="comma list of target columns")
@click.option("--mode", default="max", show_default=True, help="max|min|interval:lo:hi per target")
@click.option("--runs", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--iters", default=POOL_DEFAULTS["iters"], show_default=True)
@click.option("--batch", default=POOL_DEFAULTS["batch"], show_default=True)
@click.option("--init", default=POOL_DEFAULTS["init"], show_default=True)
@click.option("--sep", default=",", show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_file", type=click.Path(exists=True), default=None)
@click.option("--set", "sets", multiple=True)
@click.option("--figures/--no-figures", default=True, show_default=True)
def pool_run(pool_path, features, targets, mode, runs, seed, iters, batch, init, sep, out,
             config_file, sets, figures):
    """Closed-pool campaign with median-filtered init and rank success rule."""
    header = pd.read_csv(pool_path, sep=sep, nrows=0).columns.tolist()
    feature_cols = _parse_features(features, header)
    target_cols = [c.strip() for c in targets.split(",")]
    try:
        pool = load_pool(pool_path, feature_cols, target_cols, sep=sep)
        target_specs = _parse_modes(mode, target_cols)
        config = _build_config(config_file, sets, seed)
        logs, seeds = run_pool_campaign(pool, target_specs, config, runs, seed, iters, batch, init)
    except (DomainError, ConfigError) as exc:
        _fail(str(exc))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for run_index, run_log in enumerate(logs):
        save_log(run_log, out_dir / f"run_{run_index:03d}.jsonl")
    report.write_tables(out_dir, logs, seeds)
    if figures:
        report.render_convergence(out_dir, logs, seeds, Path(pool_path).stem)
        report.render_diagnostics(out_dir, logs[0], f"{Path(pool_path).stem}, seed {seeds[0]}")
    n_success = sum(1 for lg in logs if lg.status == "success-criterion")
    click.echo(f"{n_success}/{runs} runs reached the success criterion")


# ---------------------------------------------------------------------------
# ask-tell sessions

SESSION_CONFIG = "session.cfg"
SESSION_STATE = "state.npz"
SESSION_PROPOSALS = "proposals.csv"
SESSION_OBSERVATIONS = "observations.csv"
SESSION_LOG = "log.jsonl"


def _load_session(session_dir: Path):
    config_path = session_dir / SESSION_CONFIG
    if not config_path.exists():
        _fail(f"missing {config_path}")
    problem: dict[str, str] = {}
    run_items: dict[str, str] = {}
    for lineno, line in enumerate(config_path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            _fail(f"{config_path}:{lineno}: expected key=value")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("problem."):
            problem[key[len("problem."):]] = value
        else:
            run_items[key] = value
    try:
        config = RunConfig().with_overrides(run_items)
    except ConfigError as exc:
        _fail(str(exc))

    kind = problem.get("kind")
    batch = int(problem.get("batch", POOL_DEFAULTS["batch"]))
    iters = int(problem.get("iters", POOL_DEFAULTS["iters"]))
    target_names = [c.strip() for c in problem.get("targets", "y").split(",")]
    target_specs = _parse_modes(problem.get("mode", "max"), target_names)
    pool = None
    ranks = None
    if kind == "pool":
        pool_file = session_dir / problem["pool"]
        header = pd.read_csv(pool_file, sep=problem.get("sep", ",")).columns.tolist()
        feature_cols = _parse_features(problem.get("features", "prefix:f_"), header)
        have_targets = all(t in header for t in target_names)
        pool = load_pool(
            pool_file,
            feature_cols,
            target_names if have_targets else [],
            sep=problem.get("sep", ","),
        ) if have_targets else load_pool(pool_file, feature_cols, [], sep=problem.get("sep", ","))
        init = int(problem.get("init", POOL_DEFAULTS["init"]))
        domain = ClosedPool(pool.X, known_Y=pool.Y if have_targets and pool.Y.size else None)
        spec = ProblemSpec(pool.dimension, domain, tuple(target_specs), batch, iters, init)
        if have_targets and pool.Y.size:
            ranks = pool.ranks(target_specs)
    elif kind == "box":
        dims = int(problem["dims"])
        lower = _parse_bound(problem["lower"], dims)
        upper = _parse_bound(problem["upper"], dims)
        init = int(problem.get("init", BENCH_DEFAULTS["init"]))
        spec = ProblemSpec(dims, Box(lower, upper), tuple(target_specs), batch, iters, init)
    else:
        _fail(f"session problem.kind must be pool or box, got {kind!r}")
    return spec, config, target_names, ranks


def _parse_bound(text: str, dims: int) -> np.ndarray:
    values = [float(v) for v in text.split(",")]
    if len(values) == 1:
        return np.full(dims, values[0])
    if len(values) != dims:
        _fail(f"bound lists {len(values)} values for {dims} dimensions")
    return np.array(values)


def _write_proposals(session_dir: Path, X: np.ndarray, rows: Optional[np.ndarray], iteration: int) -> None:
    frame = pd.DataFrame(X, columns=[f"f_{j}" for j in range(X.shape[1])])
    if rows is not None:
        frame.insert(0, "pool_row", rows)
    frame.insert(0, "proposal_iteration", iteration)
    # %.17g keeps designs bit-exact through the file round trip
    frame.to_csv(session_dir / SESSION_PROPOSALS, index=False, float_format="%.17g")


@main.command()
@click.option("--session", "session_dir", required=True, type=click.Path(exists=True, file_okay=False))
def suggest(session_dir):
    """Propose the next batch for a file-based session."""
    session_dir = Path(session_dir)
    spec, config, target_names, ranks = _load_session(session_dir)
    state_path = session_dir / SESSION_STATE
    try:
        if state_path.exists():
            engine = load_checkpoint(state_path, spec, pool_ranks=ranks)
        else:
            engine = Engine(spec, config, pool_ranks=ranks)
        if engine.pending is not None or engine.pending_init is not None:
            raise SessionStateError("a proposal is already pending; run tell first")
        if engine.state.observations.n == 0:
            X, rows, _ = engine.propose_init(None)
            engine.pending_init = (X, rows)
            _write_proposals(session_dir, X, rows, 0)
            save_checkpoint(engine, state_path)
            click.echo(f"proposed {len(X)} initialization points")
            return
        proposal = engine.propose()
        if proposal is None:
            click.echo(f"run complete: {engine.status}")
            save_checkpoint(engine, state_path)
            sys.exit(3)
        _write_proposals(session_dir, proposal.X, proposal.pool_rows, proposal.iteration)
        save_checkpoint(engine, state_path)
        click.echo(f"proposed batch of {proposal.X.shape[0]} for iteration {proposal.iteration}")
    except (SessionStateError, LogFormatError, DomainError) as exc:
        _fail(str(exc))


@main.command()
@click.option("--session", "session_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--measurements", "measurements_path", required=True, type=click.Path(exists=True))
def tell(session_dir, measurements_path):
    """Report measurements for the pending proposal."""
    session_dir = Path(session_dir)
    spec, config, target_names, ranks = _load_session(session_dir)
    state_path = session_dir / SESSION_STATE
    if not state_path.exists():
        _fail("no session state; run suggest first")
    try:
        engine = load_checkpoint(state_path, spec, pool_ranks=ranks)
    except LogFormatError as exc:
        _fail(str(exc))
    if engine.pending is None and engine.pending_init is None:
        _fail("no pending proposal; run suggest first")

    frame = pd.read_csv(measurements_path, float_precision="round_trip")
    columns = [c for c in target_names if c in frame.columns]
    if len(columns) != len(target_names):
        fallback = [f"y_{t}" for t in range(len(target_names))]
        if all(c in frame.columns for c in fallback):
            columns = fallback
        else:
            _fail(f"measurements need columns {target_names} (or y_0..), got {list(frame.columns)}")
    numeric = frame[columns].apply(pd.to_numeric, errors="coerce")
    bad_rows = [int(i) + 1 for i in np.where(numeric.isna().any(axis=1))[0]]
    if bad_rows:
        _fail(f"non-numeric measurement rows: {bad_rows}")
    expected = engine.pending.X.shape[0] if engine.pending is not None else engine.pending_init[0].shape[0]
    if len(numeric) != expected:
        _fail(f"expected {expected} measurement rows, got {len(numeric)}")
    Y = numeric.to_numpy(dtype=float)

    try:
        if engine.pending_init is not None:
            X, rows = engine.pending_init
            engine.ingest_init(X, Y, pool_rows=rows)
            batch_X = X
        else:
            proposal = engine.pending
            engine.ingest(proposal, Y)
            batch_X = proposal.X
    except SessionStateError as exc:
        _fail(str(exc))

    obs_path = session_dir / SESSION_OBSERVATIONS
    batch = pd.DataFrame(batch_X, columns=[f"f_{j}" for j in range(batch_X.shape[1])])
    for t, name in enumerate(target_names):
        batch[name] = Y[:, t]
    batch["iteration"] = engine.records[-1].iteration
    batch.to_csv(obs_path, mode="a" if obs_path.exists() else "w", header=not obs_path.exists(), index=False)

    (session_dir / SESSION_PROPOSALS).unlink(missing_ok=True)
    save_checkpoint(engine, state_path)
    save_log(engine.finalize(), session_dir / SESSION_LOG)
    click.echo(f"recorded iteration {engine.records[-1].iteration}"
               + (f"; status {engine.status}" if engine.status else ""))


if __name__ == "__main__":
    main()
