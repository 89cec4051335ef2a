import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hiergeo.rerank as rr
from hiergeo.errors import ConfigError, InputError, ShapeError
from hiergeo.rerank import (KSchedule, MSRerankTrace, RerankConfig, compute_k_schedule,
                            jaccard_distance, k_reciprocal_rerank, ms_rerank, rank_shift_profile,
                            ranking_from_distances, rerank_queries, round_half_up,
                            shift_profile_csv)

from oracles import jaccard_rerank_oracle, ms_rerank_oracle


def random_matrix(rng, n, dim=4):
    x = rng.standard_normal((n, dim))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    D = 1.0 - x @ x.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


class TestKReciprocal:
    def test_fusion_identity(self, rng):
        D = random_matrix(rng, 8)
        out = k_reciprocal_rerank(D, RerankConfig(k=3, lambda_fuse=1.0))
        assert np.array_equal(out, D[0, 1:])

    def test_identical_rows_give_zero_jaccard(self):
        pts = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
        D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        dj = jaccard_distance(D, 2, 1)
        assert dj[1] == pytest.approx(0.0, abs=1e-15)

    def test_six_point_matrix_matches_loop_oracle(self):
        pts = np.array([[0, 0], [0.1, 0.0], [0.0, 0.3], [1.0, 1.0], [1.1, 0.9], [0.5, 0.4]])
        D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        out = k_reciprocal_rerank(D, RerankConfig(k=2))
        assert np.allclose(out, jaccard_rerank_oracle(D, 2, 1, 0.3), atol=1e-9, rtol=0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(5, 14), st.integers(1, 4))
    def test_random_matrices_match_loop_oracle(self, seed, n, k):
        rng = np.random.default_rng(seed)
        D = random_matrix(rng, n)
        cfg = RerankConfig(k=k)
        assert np.allclose(k_reciprocal_rerank(D, cfg),
                           jaccard_rerank_oracle(D, k, cfg.expand, cfg.lambda_fuse),
                           atol=1e-9, rtol=0)

    def test_errors(self, rng):
        D = random_matrix(rng, 4)
        with pytest.raises(ConfigError):
            k_reciprocal_rerank(D, RerankConfig(k=4))
        with pytest.raises(ShapeError):
            k_reciprocal_rerank(np.zeros((3, 4)), RerankConfig(k=1))
        with pytest.raises(InputError):
            k_reciprocal_rerank(np.zeros((1, 1)), RerankConfig(k=1))

    def test_config_invariants(self):
        assert RerankConfig(k=20).expand == 10
        assert RerankConfig(k=1).expand == 1
        for bad in [dict(k=0), dict(lambda_fuse=1.5), dict(mu=0.0), dict(k_expand=0)]:
            with pytest.raises(ConfigError):
                RerankConfig(**bad)


class TestSchedule:
    def test_floor_case(self):
        # mu / C * sum = 0.1 / 2 * 122 = 6.1
        assert compute_k_schedule([[61], [61]], RerankConfig()).ks == (20,)

    def test_sixty_one(self):
        counts = np.zeros((450, 3), dtype=np.int64)
        counts[:, 2] = 610                           # 450 * 610 = 274,500
        counts[:, 0], counts[:, 1] = 9, 90
        assert compute_k_schedule(counts, RerankConfig()).ks == (20, 20, 61)

    def test_round_half_up(self):
        assert round_half_up(20.5) == 21 and round_half_up(20.4999) == 20
        assert compute_k_schedule([[205]], RerankConfig(mu=0.1, k_floor=1)).ks == (21,)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            RerankConfig(mu=0)
        with pytest.raises(ConfigError):
            compute_k_schedule([], RerankConfig())
        with pytest.raises(ConfigError):
            KSchedule(())


def fake_stage(table):
    def stage(D, config):
        return np.array(table[config.k], dtype=np.float64)
    return stage


class TestMSRerank:
    def test_written_trace(self, monkeypatch):
        """Schedule [2, 4] on a 5-item gallery, stage outputs fixed by hand.

        stage k=2: d = [0.5, 0.25, 0.875, 0.375, 0.625]
          (b) all active:   d* = [0.5, 0.25, 0.875, 0.375, 0.625]
          (c) two smallest: items 1 (0.25) and 3 (0.375); (d) freeze them
        stage k=4: d = [0.25, 0.125, 0.25, 0.75, 0.125]
          (b) items 0, 2, 4: d* = [0.75, 0.25, 1.125, 0.375, 0.75]
          (c) four smallest over the whole gallery: 1, 3, 0, 4 (0 before 4 on the tie)
        """
        monkeypatch.setattr(rr, "k_reciprocal_rerank", fake_stage({
            2: [0.5, 0.25, 0.875, 0.375, 0.625],
            4: [0.25, 0.125, 0.25, 0.75, 0.125]}))
        trace = MSRerankTrace([], [], [])
        out = ms_rerank(np.zeros((6, 6)), [2, 4], RerankConfig(), trace)
        assert out.tolist() == [0.75, 0.25, 1.125, 0.375, 0.75]
        assert trace.accumulated[0].tolist() == [0.5, 0.25, 0.875, 0.375, 0.625]
        assert [s.tolist() for s in trace.selected] == [[1, 3], [1, 3, 0, 4]]

    def test_real_pipeline_matches_oracle(self, rng):
        D = random_matrix(rng, 6)
        out = ms_rerank(D, [2, 4], RerankConfig())
        assert np.allclose(out, ms_rerank_oracle(D, [2, 4], lambda k: max(1, k // 2), 0.3),
                           atol=1e-9, rtol=0)

    @pytest.mark.parametrize("seed", range(100))
    def test_masking_stability(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(8, 20))
        D = random_matrix(rng, n)
        ks = sorted(rng.integers(1, n - 1, size=int(rng.integers(2, 4))).tolist())
        trace = MSRerankTrace([], [], [])
        out = ms_rerank(D, ks, RerankConfig(), trace)
        frozen = set()
        for l, sel in enumerate(trace.selected):
            new = [j for j in sel.tolist() if j not in frozen]
            for j in new:
                # once frozen, the value never changes again (bitwise)
                for later in trace.accumulated[l:]:
                    assert later[j] == out[j]
            frozen |= set(new)

    def test_single_stage_is_standard(self, rng):
        D = random_matrix(rng, 12)
        cfg = RerankConfig(k=5)
        assert np.array_equal(ms_rerank(D, [5], cfg), k_reciprocal_rerank(D, cfg))

    def test_schedule_too_large(self, rng):
        with pytest.raises(ConfigError):
            ms_rerank(random_matrix(rng, 5), [2, 5], RerankConfig())


class TestBatch:
    def test_matches_per_query_matrices(self, rng):
        X = rng.standard_normal((13, 5))
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        q, g = X[:3], X[3:]
        dqg, dgg = 1 - q @ g.T, 1 - g @ g.T
        cfg = RerankConfig(k=3)
        out = rerank_queries(dqg, dgg, cfg)
        for i in range(3):
            D = np.zeros((11, 11))
            D[0, 1:] = D[1:, 0] = dqg[i]
            D[1:, 1:] = dgg
            assert np.array_equal(out[i], k_reciprocal_rerank(D, cfg))
        ms = rerank_queries(dqg, dgg, cfg, KSchedule((2, 4)))
        assert np.array_equal(ms, rerank_queries(dqg, dgg, cfg, KSchedule((2, 4)), threads=3))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rerank_queries(np.zeros((2, 4)), np.zeros((3, 3)), RerankConfig(k=1))


def shift_oracle(before, after):
    nq, n = before.shape
    out = np.zeros(n)
    for q in range(nq):
        for p in range(n):
            out[p] += abs(list(after[q]).index(before[q, p]) - p)
    return out / nq


class TestShiftProfile:
    def test_identity(self):
        o = np.array([[3, 1, 2, 0]])
        assert not rank_shift_profile(o, o).any()

    def test_reversal(self):
        n = 7
        o = np.arange(n)[None]
        prof = rank_shift_profile(o, o[:, ::-1])
        assert prof.tolist() == [abs(n + 1 - 2 * p) for p in range(1, n + 1)]

    def test_random_permutations(self, rng):
        before = np.stack([rng.permutation(9) for _ in range(6)])
        after = np.stack([rng.permutation(9) for _ in range(6)])
        assert np.allclose(rank_shift_profile(before, after), shift_oracle(before, after))

    def test_mismatched_galleries(self):
        with pytest.raises(InputError):
            rank_shift_profile(np.array([[0, 1]]), np.array([[0, 2]]))

    def test_csv_and_ranking(self):
        assert ranking_from_distances(np.array([[0.3, 0.1, 0.3]])).tolist() == [[1, 0, 2]]
        assert shift_profile_csv(np.array([0.0, 1.5])) == "position,shift\n1,0.0\n2,1.5\n"
