import numpy as np
import pytest

from fusebo.core import (
    Box,
    ClosedPool,
    DomainError,
    ObservationSet,
    ProblemSpec,
    SystemState,
    TargetSpec,
    UnsupportedModeError,
    aggregate_pool_ranks,
    normalize_targets,
    pareto_non_dominated,
    substream,
    success_check,
    success_threshold,
    update_state,
)


def make_state(n=0, d=3, q=1, seed=0, pool=False):
    obs = ObservationSet.empty(d, q)
    return SystemState(observations=obs, t=0, rng_root_seed=seed,
                       pool_indices=() if pool else None)


class TestTargetSpec:
    def test_interval_needs_bounds(self):
        with pytest.raises(DomainError):
            TargetSpec("t", "interval")

    def test_interval_needs_lo_lt_hi(self):
        with pytest.raises(DomainError):
            TargetSpec("t", "interval", (2.0, 1.0))

    def test_bounds_rejected_outside_interval_mode(self):
        with pytest.raises(DomainError):
            TargetSpec("t", "maximize", (0.0, 1.0))


class TestNormalizeTargets:
    def test_minimize_negates(self):
        out = normalize_targets(np.array([[3.0]]), [TargetSpec("t", "minimize")])
        assert out[0, 0] == -3.0

    def test_interval_center_scores_zero(self):
        out = normalize_targets(np.array([[1.50]]), [TargetSpec("t", "interval", (1.45, 1.55))])
        assert out[0, 0] == pytest.approx(0.0)

    def test_maximize_is_identity(self):
        out = normalize_targets(np.array([[-7.0]]), [TargetSpec("t", "maximize")])
        assert out[0, 0] == -7.0

    def test_interval_bounds_score_minus_one(self):
        spec = [TargetSpec("t", "interval", (1.0, 3.0))]
        out = normalize_targets(np.array([[1.0], [3.0], [4.0]]), spec)
        assert out[0, 0] == pytest.approx(-1.0)
        assert out[1, 0] == pytest.approx(-1.0)
        assert out[2, 0] < -1.0

    def test_monotone_in_each_mode(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=(50, 1))
        for mode in ("maximize", "minimize"):
            scores = normalize_targets(y, [TargetSpec("t", mode)])
            order_y = np.argsort(y[:, 0])
            order_s = np.argsort(scores[:, 0])
            if mode == "maximize":
                assert np.array_equal(order_y, order_s)
            else:
                assert np.array_equal(order_y, order_s[::-1])

    def test_interval_strictly_decreasing_from_center(self):
        spec = [TargetSpec("t", "interval", (0.0, 2.0))]
        offsets = np.linspace(0, 3, 30)
        scores = normalize_targets((1.0 + offsets)[:, None], spec)[:, 0]
        assert np.all(np.diff(scores) < 0)

    def test_wrong_column_count(self):
        with pytest.raises(DomainError):
            normalize_targets(np.ones((2, 2)), [TargetSpec("t", "maximize")])


class TestUpdateState:
    def test_empty_batch_is_noop(self):
        state = make_state()
        out = update_state(state, np.empty((0, 3)), np.empty((0, 1)), [TargetSpec("t")])
        assert out is state
        assert out.t == 0

    def test_rows_appended_and_counter_advances(self):
        state = make_state()
        X = np.arange(30, dtype=float).reshape(10, 3)
        out = update_state(state, X, np.ones((10, 1)), [TargetSpec("t")])
        assert out.t == 1
        assert out.observations.n == 10
        assert np.all(out.observations.iteration_tag == 1)

    def test_determinism_of_repeated_updates(self):
        targets = [TargetSpec("t", "minimize")]
        X = np.arange(6, dtype=float).reshape(2, 3)
        outs = []
        for _ in range(2):
            state = make_state()
            state = update_state(state, X, np.array([[1.0], [2.0]]), targets)
            outs.append(state.observations.Y_score.tobytes())
        assert outs[0] == outs[1]

    def test_history_never_mutated(self):
        state = make_state()
        X = np.ones((2, 3))
        s1 = update_state(state, X, np.ones((2, 1)), [TargetSpec("t")])
        before = s1.observations.X.copy()
        update_state(s1, 2 * X, 2 * np.ones((2, 1)), [TargetSpec("t")])
        assert np.array_equal(s1.observations.X, before)

    def test_dimension_mismatch(self):
        state = make_state()
        state = update_state(state, np.ones((1, 3)), np.ones((1, 1)), [TargetSpec("t")])
        with pytest.raises(DomainError):
            update_state(state, np.ones((1, 4)), np.ones((1, 1)), [TargetSpec("t")])


class TestSuccessCheck:
    def test_threshold_small_pool(self):
        assert success_threshold(600) == 6

    def test_threshold_large_pool(self):
        assert success_threshold(5000) == 10

    def test_rank_one_member_succeeds(self):
        state = make_state(pool=True)
        state = update_state(state, np.ones((1, 3)), np.ones((1, 1)), [TargetSpec("t")],
                             new_pool_indices=[4])
        ranks = np.array([10, 9, 8, 7, 1, 6, 5, 4, 3, 2] + list(range(11, 101)))
        assert success_check(state, ranks)

    def test_box_mode_unsupported(self):
        state = make_state(pool=False)
        with pytest.raises(UnsupportedModeError):
            success_check(state, np.arange(10))

    def test_no_success_when_all_low_rank(self):
        state = make_state(pool=True)
        state = update_state(state, np.ones((1, 3)), np.ones((1, 1)), [TargetSpec("t")],
                             new_pool_indices=[0])
        ranks = np.arange(600) + 1
        ranks[0] = 600
        ranks[-1] = 1
        assert not success_check(state, ranks)


class TestPoolRanks:
    def test_single_target_orders_by_score(self):
        ranks = aggregate_pool_ranks(np.array([[0.1], [0.9], [0.5]]))
        assert ranks.tolist() == [3, 1, 2]

    def test_multi_target_front_precedes_dominated(self):
        Y = np.array([[1.0, 0.0], [0.0, 1.0], [0.4, 0.4], [-1.0, -1.0]])
        ranks = aggregate_pool_ranks(Y)
        assert set(ranks[:3]) == {1, 2, 3}
        assert ranks[3] == 4

    def test_pareto_mask(self):
        Y = np.array([[1.0, 1.0], [2.0, 0.0], [0.5, 0.5]])
        mask = pareto_non_dominated(Y)
        assert mask.tolist() == [True, True, False]


class TestDomainTypes:
    def test_box_validation(self):
        with pytest.raises(DomainError):
            Box(np.array([0.0, 1.0]), np.array([1.0, 1.0]))

    def test_pool_needs_room_for_init_and_batch(self):
        pool = ClosedPool(np.zeros((10, 2)))
        with pytest.raises(DomainError):
            ProblemSpec(2, pool, (TargetSpec("t"),), batch_size=6, max_iterations=5, init_count=5)


class TestSubstream:
    def test_same_key_same_stream(self):
        a = substream(42, 1, 2, 3).integers(1 << 30, size=5)
        b = substream(42, 1, 2, 3).integers(1 << 30, size=5)
        assert np.array_equal(a, b)

    def test_different_keys_differ(self):
        a = substream(42, 1, 2, 3).integers(1 << 30, size=5)
        b = substream(42, 1, 2, 4).integers(1 << 30, size=5)
        assert not np.array_equal(a, b)
