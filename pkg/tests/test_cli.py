import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner

from fusebo.cli import main, run_pool_campaign
from fusebo.config import RunConfig
from fusebo.controller import load_log, run_loop
from fusebo.core import ClosedPool, ProblemSpec, TargetSpec
from fusebo.oracles import generate_synthetic_pool, get_benchmark, save_pool


FAST_SETS = [
    "--set", "de.generations=12",
    "--set", "n.sobol=32",
    "--set", "ensemble.b_boot=6",
    "--set", "ensemble.families=linear-L2,k-nearest-neighbors,random-forest",
]


@pytest.fixture()
def runner():
    return CliRunner()


def make_pool_file(tmp_path, n=140, d=3, seed=0, noise=0.0):
    bench = get_benchmark("ackley", d)
    pool = generate_synthetic_pool(bench, n, noise, np.random.default_rng(seed))
    path = tmp_path / "pool.csv"
    save_pool(pool, path)
    return path, pool


class TestBench:
    def test_two_runs_reproducible_and_distinct(self, runner, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        args = ["bench", "--function", "ackley", "--dims", "3", "--runs", "2",
                "--seed", "7", "--iters", "1", "--batch", "4", "--init", "8",
                "--set", "init.mode=uniform", "--no-figures", *FAST_SETS]
        res1 = runner.invoke(main, args + ["--out", str(out1)])
        assert res1.exit_code == 0, res1.output
        res2 = runner.invoke(main, args + ["--out", str(out2)])
        assert res2.exit_code == 0
        log_a0 = load_log(out1 / "run_000.jsonl")
        log_b0 = load_log(out2 / "run_000.jsonl")
        log_a1 = load_log(out1 / "run_001.jsonl")
        assert log_a0.digest() == log_b0.digest()
        assert log_a0.digest() != log_a1.digest()

    def test_summary_row_count_and_tables(self, runner, tmp_path):
        out = tmp_path / "camp"
        res = runner.invoke(main, [
            "bench", "--function", "rastrigin", "--dims", "3", "--runs", "2",
            "--seed", "1", "--iters", "1", "--batch", "4", "--init", "8",
            "--set", "init.mode=uniform", "--no-figures", *FAST_SETS,
            "--out", str(out),
        ])
        assert res.exit_code == 0, res.output
        summary = pd.read_csv(out / "summary.csv")
        assert len(summary) == 2
        curves = pd.read_csv(out / "curves.csv")
        assert set(curves["run"]) == {0, 1}
        assert (out / "curves_aggregate.csv").exists()

    def test_figures_rendered(self, runner, tmp_path):
        out = tmp_path / "figs"
        res = runner.invoke(main, [
            "bench", "--function", "ackley", "--dims", "3", "--runs", "1",
            "--seed", "3", "--iters", "1", "--batch", "4", "--init", "8",
            "--set", "init.mode=uniform", *FAST_SETS, "--out", str(out),
        ])
        assert res.exit_code == 0, res.output
        assert (out / "convergence.png").stat().st_size > 0
        assert (out / "diagnostics.png").stat().st_size > 0

    def test_unknown_function_fails(self, runner, tmp_path):
        res = runner.invoke(main, ["bench", "--function", "nope", "--out", str(tmp_path)])
        assert res.exit_code != 0

    def test_config_file_precedence(self, runner, tmp_path):
        config = tmp_path / "fusebo.cfg"
        config.write_text("de.generations=11\nn.sobol=16\n")
        out = tmp_path / "camp"
        res = runner.invoke(main, [
            "bench", "--function", "ackley", "--dims", "3", "--runs", "1",
            "--seed", "0", "--iters", "0", "--batch", "4", "--init", "8",
            "--config", str(config), "--set", "n.sobol=24",
            "--set", "init.mode=uniform", "--no-figures", "--out", str(out),
        ])
        assert res.exit_code == 0, res.output
        log = load_log(out / "run_000.jsonl")
        assert log.config["de_generations"] == 11  # from file
        assert log.config["n_sobol"] == 24  # flag overrides file


class TestPoolRun:
    def test_campaign_with_success_rule(self, runner, tmp_path):
        path, pool = make_pool_file(tmp_path)
        out = tmp_path / "out"
        res = runner.invoke(main, [
            "pool-run", "--pool", str(path), "--features", "prefix:f_",
            "--targets", "y_0", "--mode", "min", "--runs", "1", "--seed", "0",
            "--iters", "3", "--batch", "5", "--init", "10", "--no-figures",
            *FAST_SETS, "--out", str(out),
        ])
        assert res.exit_code == 0, res.output
        log = load_log(out / "run_000.jsonl")
        assert log.status in ("success-criterion", "budget-exhausted", "pool-exhausted")
        summary = pd.read_csv(out / "summary.csv")
        assert "success" in summary.columns

    def test_pool_too_small_fails(self, runner, tmp_path):
        path, _ = make_pool_file(tmp_path, n=100)
        res = runner.invoke(main, [
            "pool-run", "--pool", str(path), "--features", "prefix:f_",
            "--targets", "y_0", "--mode", "min", "--init", "98", "--batch", "5",
            "--out", str(tmp_path / "o"),
        ])
        assert res.exit_code != 0

    def test_early_success_status(self, tmp_path):
        # seed the init with near-best rows excluded, then iterate until success
        bench = get_benchmark("ackley", 3)
        pool = generate_synthetic_pool(bench, 150, 0.0, np.random.default_rng(5))
        targets = (TargetSpec("y_0", "minimize"),)
        config = RunConfig(
            seed=2, de_generations=10, n_sobol=16, ensemble_b_boot=6,
            ensemble_families="linear-L2,k-nearest-neighbors,random-forest",
        )
        logs, _ = run_pool_campaign(pool, targets, config, runs=1, seed=2,
                                    iters=30, batch=5, init=10)
        log = logs[0]
        if log.status == "success-criterion":
            assert log.records[-1].iteration <= 30


class TestAskTell:
    def _write_session(self, tmp_path, pool_path, batch=5, init=10, iters=4, seed=0):
        session = tmp_path / "session"
        session.mkdir()
        (session / "session.cfg").write_text(
            "problem.kind=pool\n"
            f"problem.pool={pool_path.name}\n"
            "problem.features=prefix:f_\n"
            "problem.targets=y_0\n"
            "problem.mode=min\n"
            f"problem.batch={batch}\nproblem.init={init}\nproblem.iters={iters}\n"
            f"seed={seed}\n"
            "de.generations=12\nn.sobol=32\nensemble.b_boot=6\n"
            "ensemble.families=linear-L2,k-nearest-neighbors,random-forest\n"
        )
        (tmp_path / "session" / pool_path.name).write_bytes(pool_path.read_bytes())
        return session

    def test_suggest_tell_loop_matches_in_process(self, runner, tmp_path):
        pool_path, pool = make_pool_file(tmp_path, seed=3)
        session = self._write_session(tmp_path, pool_path, seed=11)

        targets = (TargetSpec("y_0", "minimize"),)
        config = RunConfig(
            seed=11, de_generations=12, n_sobol=32, ensemble_b_boot=6,
            ensemble_families="linear-L2,k-nearest-neighbors,random-forest",
        )
        spec = ProblemSpec(3, ClosedPool(pool.X, known_Y=pool.Y), targets,
                           batch_size=5, max_iterations=4, init_count=10)
        ranks = pool.ranks(targets)

        def oracle(X):
            out = np.empty((X.shape[0], 1))
            for i, row in enumerate(X):
                out[i] = pool.Y[np.all(pool.X == row, axis=1)][0]
            return out

        reference = run_loop(spec, config, oracle, pool_ranks=ranks)

        for _ in range(5):  # init + up to 4 iterations
            res = runner.invoke(main, ["suggest", "--session", str(session)])
            if res.exit_code == 3:
                break
            assert res.exit_code == 0, res.output
            proposals = pd.read_csv(session / "proposals.csv", float_precision="round_trip")
            X = proposals[[f"f_{j}" for j in range(3)]].to_numpy()
            measurements = pd.DataFrame({"y_0": oracle(X)[:, 0]})
            meas_path = session / "measurements.csv"
            measurements.to_csv(meas_path, index=False, float_format="%.17g")
            res = runner.invoke(main, ["tell", "--session", str(session),
                                       "--measurements", str(meas_path)])
            assert res.exit_code == 0, res.output

        session_log = load_log(session / "log.jsonl")
        assert session_log.digest() == reference.digest()

    def test_suggest_twice_refused(self, runner, tmp_path):
        pool_path, _ = make_pool_file(tmp_path, seed=4)
        session = self._write_session(tmp_path, pool_path)
        assert runner.invoke(main, ["suggest", "--session", str(session)]).exit_code == 0
        res = runner.invoke(main, ["suggest", "--session", str(session)])
        assert res.exit_code == 1
        assert "pending" in res.output

    def test_tell_without_suggest_refused(self, runner, tmp_path):
        pool_path, _ = make_pool_file(tmp_path, seed=5)
        session = self._write_session(tmp_path, pool_path)
        meas = session / "m.csv"
        meas.write_text("y_0\n1.0\n")
        res = runner.invoke(main, ["tell", "--session", str(session),
                                   "--measurements", str(meas)])
        assert res.exit_code == 1

    def test_tell_rejects_malformed_rows(self, runner, tmp_path):
        pool_path, _ = make_pool_file(tmp_path, seed=6)
        session = self._write_session(tmp_path, pool_path, init=10)
        assert runner.invoke(main, ["suggest", "--session", str(session)]).exit_code == 0
        meas = session / "m.csv"
        meas.write_text("y_0\n" + "\n".join(["1.0"] * 9 + ["not-a-number"]) + "\n")
        res = runner.invoke(main, ["tell", "--session", str(session),
                                   "--measurements", str(meas)])
        assert res.exit_code == 1
        assert "10" in res.output  # offending row number reported

    def test_tell_rejects_wrong_row_count(self, runner, tmp_path):
        pool_path, _ = make_pool_file(tmp_path, seed=7)
        session = self._write_session(tmp_path, pool_path, init=10)
        assert runner.invoke(main, ["suggest", "--session", str(session)]).exit_code == 0
        meas = session / "m.csv"
        meas.write_text("y_0\n1.0\n2.0\n")
        res = runner.invoke(main, ["tell", "--session", str(session),
                                   "--measurements", str(meas)])
        assert res.exit_code == 1
        assert "expected 10" in res.output
