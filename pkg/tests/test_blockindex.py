import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import brute_block_score, brute_rep_keys, brute_select
from trimkv.blockindex import (
    LocalQueryWindow,
    PruneSchedule,
    build_rep_keys,
    parse_schedule,
    partition_blocks,
    score_blocks,
    select_candidates,
)
from trimkv.errors import ConfigError, InvalidInputError


class TestPartition:
    def test_exact_division(self):
        table = partition_blocks(32768, 64)
        assert len(table) == 512
        assert all(s.tokens == 64 for s in table.spans)

    def test_partial_last_block(self):
        table = partition_blocks(100, 64)
        assert [s.tokens for s in table.spans] == [64, 36]

    def test_single_block(self):
        assert len(partition_blocks(64, 64)) == 1

    def test_zero_length_rejected(self):
        with pytest.raises(InvalidInputError):
            partition_blocks(0, 64)

    @settings(max_examples=100, deadline=None)
    @given(prompt_len=st.integers(1, 5000), block_size=st.integers(1, 128))
    def test_covering_ordered_partition(self, prompt_len, block_size):
        table = partition_blocks(prompt_len, block_size)
        assert table.spans[0].start == 0
        assert table.spans[-1].end == prompt_len
        for a, b in zip(table.spans, table.spans[1:]):
            assert a.end == b.start
            assert a.tokens == block_size  # only the last may be partial
        assert table.spans[-1].tokens <= block_size


class TestRepKeys:
    def test_identical_keys_mean_is_value(self, rng):
        row = rng.standard_normal((2, 1, 4)).astype(np.float32)
        keys = np.repeat(row, 8, axis=1)
        reps = build_rep_keys(0, {0: keys}, unit_size=4)
        for m in range(2):
            np.testing.assert_allclose(reps.means[0][m], row[:, 0, :], atol=1e-7)

    def test_unit_size_one_keeps_rows(self, rng):
        keys = rng.standard_normal((2, 5, 4)).astype(np.float32)
        reps = build_rep_keys(0, {0: keys}, unit_size=1)
        assert reps.means[0].shape == (5, 2, 4)
        for t in range(5):
            np.testing.assert_allclose(reps.means[0][t], keys[:, t, :], atol=0)

    def test_random_block_matches_mean_oracle(self, rng):
        keys = rng.standard_normal((4, 64, 8)).astype(np.float32)
        reps = build_rep_keys(0, {3: keys}, unit_size=8)
        want = brute_rep_keys(keys, 8)
        assert reps.means[3].shape == (8, 4, 8)
        np.testing.assert_allclose(reps.means[3], want, atol=1e-6)

    def test_partial_trailing_unit_averages_members(self, rng):
        keys = rng.standard_normal((1, 10, 4)).astype(np.float32)
        reps = build_rep_keys(0, {0: keys}, unit_size=4)
        np.testing.assert_allclose(
            reps.means[0][2], keys[:, 8:10, :].mean(axis=1), atol=1e-6
        )

    def test_missing_rows_rejected(self):
        with pytest.raises(InvalidInputError):
            build_rep_keys(0, {0: np.zeros((2, 0, 4), dtype=np.float32)}, unit_size=2)


class TestQueryWindow:
    def test_single_push(self, rng):
        win = LocalQueryWindow(4)
        q = rng.standard_normal((2, 4)).astype(np.float32)
        win.push(q)
        np.testing.assert_allclose(win.mean(), q, atol=0)

    def test_identical_pushes(self, rng):
        win = LocalQueryWindow(4)
        q = rng.standard_normal((2, 4)).astype(np.float32)
        for _ in range(4):
            win.push(q)
        np.testing.assert_allclose(win.mean(), q, atol=1e-7)

    def test_ring_keeps_last_w(self, rng):
        win = LocalQueryWindow(4)
        queries = [rng.standard_normal((2, 4)).astype(np.float32) for _ in range(5)]
        win.seed(queries)
        want = np.mean(np.stack(queries[1:]), axis=0)
        np.testing.assert_allclose(win.mean(), want, atol=1e-6)

    def test_empty_window_rejected(self):
        with pytest.raises(InvalidInputError):
            LocalQueryWindow(2).mean()


class TestScoring:
    def test_single_head_single_unit_is_dot(self, rng):
        probe = rng.standard_normal((1, 8)).astype(np.float32)
        keys = rng.standard_normal((1, 3, 8)).astype(np.float32)
        reps = build_rep_keys(0, {0: keys}, unit_size=3)
        scores = score_blocks(probe, reps, [0])
        want = float(keys.mean(axis=1)[0] @ probe[0])
        assert abs(scores[0] - want) < 1e-6

    def test_orthogonal_probe_scores_zero(self):
        probe = np.array([[1.0, 0.0]], dtype=np.float32)
        keys = np.array([[[0.0, 3.0], [0.0, -2.0]]], dtype=np.float32)
        reps = build_rep_keys(0, {0: keys}, unit_size=1)
        assert score_blocks(probe, reps, [0])[0] == 0.0

    def test_random_case_matches_triple_loop(self, rng):
        keys = {
            b: rng.standard_normal((4, 64, 8)).astype(np.float32) for b in range(6)
        }
        reps = build_rep_keys(0, keys, unit_size=8)
        probe = rng.standard_normal((4, 8)).astype(np.float32)
        scores = score_blocks(probe, reps, range(6))
        for b in range(6):
            want = brute_block_score(probe, brute_rep_keys(keys[b], 8))
            assert abs(scores[b] - want) < 1e-6

    def test_eligible_without_reps_rejected(self, rng):
        keys = {0: rng.standard_normal((1, 4, 4)).astype(np.float32)}
        reps = build_rep_keys(0, keys, unit_size=2)
        with pytest.raises(InvalidInputError):
            score_blocks(np.zeros((1, 4), dtype=np.float32), reps, [0, 1])

    def test_avg_pooling_degeneracy(self, rng):
        # unit_size == block tokens collapses to single mean-pooled rep
        keys = rng.standard_normal((2, 16, 4)).astype(np.float32)
        reps = build_rep_keys(0, {0: keys}, unit_size=16)
        probe = rng.standard_normal((2, 4)).astype(np.float32)
        got = score_blocks(probe, reps, [0])[0]
        pooled = keys.mean(axis=1)  # [H, d]
        want = float(np.mean([pooled[h] @ probe[h] for h in range(2)]))
        assert reps.means[0].shape[0] == 1
        assert abs(got - want) < 1e-6


class TestSelection:
    def test_sink_kept_despite_lowest_score(self):
        scores = {0: -100.0, 1: 5.0, 2: 3.0}
        assert select_candidates(scores, 2) == (0, 1)

    def test_tie_breaks_toward_lower_id(self):
        scores = {b: 1.0 for b in range(6)}
        assert select_candidates(scores, 3) == (0, 1, 2)

    def test_matches_full_sort_oracle(self, rng):
        scores = {b: float(rng.standard_normal()) for b in range(64)}
        assert select_candidates(scores, 16) == brute_select(scores, 16)

    def test_small_universe_takes_all(self):
        scores = {0: 0.0, 1: 1.0}
        assert select_candidates(scores, 10) == (0, 1)

    def test_budget_below_one_rejected(self):
        with pytest.raises(InvalidInputError):
            select_candidates({0: 1.0}, 0)

    def test_sink_missing_rejected(self):
        with pytest.raises(InvalidInputError):
            select_candidates({1: 1.0}, 1)

    @pytest.mark.parametrize("scale", [0.5, 2.0, 7.5])
    def test_scale_invariance_of_selection(self, rng, scale):
        keys = {b: rng.standard_normal((2, 32, 4)).astype(np.float32) for b in range(12)}
        reps = build_rep_keys(0, keys, unit_size=4)
        probe = rng.standard_normal((2, 4)).astype(np.float32)
        base = select_candidates(score_blocks(probe, reps, range(12)), 5)
        scaled = select_candidates(
            score_blocks((probe * scale).astype(np.float32), reps, range(12)), 5
        )
        assert base == scaled

    def test_candidate_size_rule(self, rng):
        for n_blocks in (1, 3, 8):
            scores = {b: float(rng.standard_normal()) for b in range(n_blocks)}
            for budget in (1, 2, 5, 9):
                got = select_candidates(scores, budget)
                assert len(got) == min(budget, n_blocks)

    def test_deterministic(self, rng):
        scores = {b: float(rng.standard_normal()) for b in range(20)}
        assert select_candidates(scores, 7) == select_candidates(dict(scores), 7)


class TestSchedule:
    def test_block_budget_derivation(self):
        sched = PruneSchedule((2, 4), (100, 30), block_size=64)
        assert sched.block_budget(0) == 2
        assert sched.block_budget(1) == 1

    def test_validation(self):
        with pytest.raises(ConfigError):
            PruneSchedule((4, 2), (100, 50)).validate()
        with pytest.raises(ConfigError):
            PruneSchedule((1, 2), (50, 100)).validate()
        with pytest.raises(ConfigError):
            PruneSchedule((1, 8), (100, 50)).validate(n_layers=6)
        PruneSchedule((1, 2), (100, 50)).validate(n_layers=4)

    def test_parse_schedule(self):
        assert parse_schedule("2:2048,4:1024") == ((2, 4), (2048, 1024))
        assert parse_schedule("") == ((), ())
        with pytest.raises(ConfigError):
            parse_schedule("2-2048")
