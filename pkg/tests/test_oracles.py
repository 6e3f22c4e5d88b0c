import math

import numpy as np
import pytest

from fusebo.core import DomainError, TargetSpec
from fusebo.oracles import (
    SCHWEFEL_OPT,
    eval_benchmark,
    generate_synthetic_pool,
    get_benchmark,
    load_pool,
    save_pool,
)


def ref_ackley(x):
    d = len(x)
    s1 = sum(v * v for v in x) / d
    s2 = sum(math.cos(2 * math.pi * v) for v in x) / d
    return -20.0 * math.exp(-0.2 * math.sqrt(s1)) - math.exp(s2) + 20.0 + math.e


def ref_rastrigin(x):
    return 10.0 * len(x) + sum(v * v - 10.0 * math.cos(2 * math.pi * v) for v in x)


def ref_schwefel(x):
    return 418.9829 * len(x) - sum(v * math.sin(math.sqrt(abs(v))) for v in x)


REFS = {"ackley": ref_ackley, "rastrigin": ref_rastrigin, "schwefel": ref_schwefel}


class TestBenchmarks:
    @pytest.mark.parametrize("name", ["ackley", "rastrigin"])
    def test_optimum_at_origin(self, name):
        bench = get_benchmark(name, 20)
        assert eval_benchmark(bench, np.zeros((1, 20)))[0] == pytest.approx(0.0, abs=1e-9)

    def test_schwefel_optimum(self):
        bench = get_benchmark("schwefel", 20)
        x = np.full((1, 20), SCHWEFEL_OPT)
        assert abs(eval_benchmark(bench, x)[0]) < 1e-3

    @pytest.mark.parametrize("name", ["ackley", "rastrigin", "schwefel"])
    def test_matches_reference_at_random_points(self, name):
        bench = get_benchmark(name, 6)
        lo, hi = bench.bounds
        rng = np.random.default_rng(11)
        X = rng.uniform(lo, hi, size=(100, 6))
        ours = eval_benchmark(bench, X)
        ref = np.array([REFS[name](row) for row in X])
        assert np.allclose(ours, ref, rtol=1e-10, atol=1e-12)

    def test_out_of_bounds_clipped(self):
        bench = get_benchmark("rastrigin", 3)
        far = np.full((1, 3), 100.0)
        clipped = np.full((1, 3), 5.12)
        assert eval_benchmark(bench, far)[0] == pytest.approx(eval_benchmark(bench, clipped)[0])

    def test_dimension_mismatch(self):
        bench = get_benchmark("ackley", 4)
        with pytest.raises(DomainError):
            eval_benchmark(bench, np.zeros((1, 5)))

    def test_unknown_name(self):
        with pytest.raises(DomainError):
            get_benchmark("rosenbrock")


class TestPoolIO:
    def test_basic_parse(self, tmp_path):
        path = tmp_path / "pool.csv"
        path.write_text("a,b,t\n1,2,3\n4,5,6\n7,8,9\n")
        pool = load_pool(path, ["a", "b"], ["t"])
        assert pool.size == 3 and pool.dimension == 2
        assert pool.Y[:, 0].tolist() == [3.0, 6.0, 9.0]

    def test_gap_row_dropped_with_count(self, tmp_path):
        path = tmp_path / "pool.csv"
        path.write_text("a,b,t\n1,2,3\n4,,6\n7,8,9\n")
        pool = load_pool(path, ["a", "b"], ["t"])
        assert pool.size == 2
        assert pool.n_dropped == 1

    def test_duplicate_headers_rejected(self, tmp_path):
        path = tmp_path / "pool.csv"
        path.write_text("a,a,t\n1,2,3\n")
        with pytest.raises(DomainError):
            load_pool(path, ["a"], ["t"])

    def test_missing_column(self, tmp_path):
        path = tmp_path / "pool.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(DomainError):
            load_pool(path, ["a"], ["t"])

    def test_all_rows_dropped_is_error(self, tmp_path):
        path = tmp_path / "pool.csv"
        path.write_text("a,t\nx,1\ny,2\n")
        with pytest.raises(DomainError):
            load_pool(path, ["a"], ["t"])

    def test_roundtrip_identity(self, tmp_path):
        bench = get_benchmark("ackley", 4)
        pool = generate_synthetic_pool(bench, 128, 0.0, np.random.default_rng(0))
        path = tmp_path / "pool.csv"
        save_pool(pool, path)
        again = load_pool(path, [f"f_{j}" for j in range(4)], ["y_0"])
        assert np.array_equal(again.X, pool.X)
        assert np.array_equal(again.Y, pool.Y)


class TestSyntheticPool:
    def test_zero_noise_ranks_match_noisy(self):
        bench = get_benchmark("rastrigin", 5)
        pool = generate_synthetic_pool(bench, 200, 0.0, np.random.default_rng(1))
        targets = [TargetSpec("y", "minimize")]
        noiseless = pool.ranks(targets)
        pool_no_clean = type(pool)(X=pool.X, Y=pool.Y)
        assert np.array_equal(noiseless, pool_no_clean.ranks(targets))

    def test_determinism(self):
        bench = get_benchmark("ackley", 5)
        a = generate_synthetic_pool(bench, 150, 0.5, np.random.default_rng(9))
        b = generate_synthetic_pool(bench, 150, 0.5, np.random.default_rng(9))
        assert np.array_equal(a.X, b.X)
        assert np.array_equal(a.Y, b.Y)

    def test_min_size_enforced(self):
        bench = get_benchmark("ackley", 5)
        with pytest.raises(DomainError):
            generate_synthetic_pool(bench, 50, 0.0, np.random.default_rng(0))

    def test_success_threshold_for_large_pool(self):
        from fusebo.core import success_threshold

        assert success_threshold(5000) == 10
