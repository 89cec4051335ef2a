from dataclasses import replace

import numpy as np
import pytest

from hiergeo.embeddings import DRONE, SATELLITE, EmbeddingSet, l2_normalize
from hiergeo.errors import ConfigError, InputError, TrainingDivergedError
from hiergeo.geo import ScaleConfig, build_scale_partition, level_matrix, pairwise_distances
from hiergeo.losses import LossConfig, MarginSchedule
from hiergeo.synth import (EncoderState, Objective, SynthConfig, TrainerConfig,
                           batch_loss_and_grads, central_difference, encode,
                           finite_difference_check, generate_campus, margin_satisfaction_report,
                           relative_error, train, train_log_csv)

SHORT = TrainerConfig(epochs=3, steps_per_epoch=10)


@pytest.fixture(scope="module")
def campus():
    return generate_campus(SynthConfig(seed=3))


def latent_cos(latent):
    u = latent / np.linalg.norm(latent, axis=1, keepdims=True)
    return u @ u.T


class TestGenerate:
    def test_shape(self, campus):
        reg = campus.registry
        assert len(reg) == 100
        assert len(reg.subset("train")) == 60 and len(reg.subset("test")) == 40
        assert len(campus.raw) == 100 * 9
        assert int(np.sum(campus.raw.views == SATELLITE)) == 100
        assert not campus.raw.normalized.any()
        d = pairwise_distances(reg)
        assert d[np.triu_indices(100, 1)].min() >= 10.0

    def test_deterministic(self):
        a, b = generate_campus(SynthConfig(seed=9)), generate_campus(SynthConfig(seed=9))
        assert a.registry == b.registry
        assert a.raw.vectors.tobytes() == b.raw.vectors.tobytes()
        assert np.array_equal(a.latent, b.latent)

    def test_no_context_means_uncorrelated_buildings(self):
        c = generate_campus(SynthConfig(n_buildings_train=100, n_buildings_test=50,
                                        context_strength=0.0, seed=1))
        s = latent_cos(c.latent)[np.triu_indices(150, 1)]
        assert len(s) >= 10_000
        assert abs(s.mean()) < 3 * s.std() / np.sqrt(len(s))

    def test_context_dominant_gives_spatial_decay(self):
        c = generate_campus(SynthConfig(identity_strength=0.1, context_strength=3.0, seed=2))
        d = pairwise_distances(c.registry)
        s = latent_cos(c.latent)
        iu = np.triu_indices(len(d), 1)
        near, far = s[iu][d[iu] <= 200], s[iu][d[iu] > 500]
        assert near.mean() > far.mean()

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_cross_view_signal_level1_above_level3(self, seed):
        c = generate_campus(SynthConfig(seed=seed))
        cfg = ScaleConfig()
        lv = level_matrix(c.registry, cfg)
        raw = c.raw.normalized_copy()
        dr, sa = raw.view(DRONE), raw.view(SATELLITE)
        sim = dr.vectors.astype(np.float64) @ sa.vectors.astype(np.float64).T
        pair_lv = lv[np.ix_(dr.building_ids.astype(int), sa.building_ids.astype(int))]
        assert sim[pair_lv == 1].mean() > sim[pair_lv == 3].mean()

    def test_placement_failure(self):
        with pytest.raises(InputError):
            generate_campus(SynthConfig(area_side=20.0))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_buildings_test=0)
        with pytest.raises(ConfigError):
            SynthConfig(context_length_scale=0.0)
        with pytest.raises(ConfigError):
            TrainerConfig(batch_buildings=1)


class TestEncode:
    def test_constant_map(self, campus):
        st = EncoderState.initialize(128, 4, [0], 0)
        st.weight[:] = 0
        st.bias[:] = [1.0, 2.0, 2.0, 0.0]
        out = encode(st, campus.raw)
        assert np.allclose(out.vectors, [1 / 3, 2 / 3, 2 / 3, 0], atol=1e-7)

    def test_identity_map(self, campus):
        st = EncoderState.initialize(128, 128, [0], 0)
        st.weight = np.eye(128)
        st.bias[:] = 0
        out = encode(st, campus.raw)
        assert np.allclose(out.vectors, campus.raw.normalized_copy().vectors, atol=1e-6)

    def test_matches_matmul_oracle(self, campus):
        st = EncoderState.initialize(128, 16, [0], 5)
        out = encode(st, campus.raw)
        for i in (0, 17, 899):
            y = st.weight @ campus.raw.vectors[i].astype(np.float64) + st.bias
            assert np.allclose(out.vectors[i], y / np.linalg.norm(y), atol=1e-6)
        assert out.normalized.all()

    def test_dimension_mismatch(self, campus):
        with pytest.raises(InputError):
            encode(EncoderState.initialize(64, 8, [0], 0), campus.raw)

    def test_state_round_trip(self):
        st = EncoderState.initialize(8, 4, [3, 5], 1)
        back = EncoderState.from_dict(st.to_dict())
        assert np.array_equal(back.weight, st.weight)
        assert np.array_equal(back.proxies.vectors, st.proxies.vectors)
        assert back.proxies.building_ids.tolist() == [3, 5]


class TestTrain:
    def test_zero_learning_rate_is_noop(self, campus):
        tc = replace(SHORT, learning_rate=0.0)
        init = EncoderState.initialize(128, tc.embed_dim, campus.split_ids("train"), tc.seed)
        res = train(tc, campus)
        assert np.array_equal(res.state.weight, init.weight)
        assert np.array_equal(res.state.bias, init.bias)
        assert np.allclose(res.state.proxies.vectors, init.proxies.vectors, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases(self, seed):
        c = generate_campus(SynthConfig(seed=seed))
        res = train(TrainerConfig(seed=seed), c)
        assert res.log[-1].mean_total < res.log[0].mean_total

    def test_deterministic(self, campus):
        a, b = train(SHORT, campus), train(SHORT, campus)
        assert a.state.weight.tobytes() == b.state.weight.tobytes()
        assert train_log_csv(a.log) == train_log_csv(b.log)

    def test_single_and_multi_scale_runs(self, campus):
        single = train(SHORT, campus, LossConfig(margin_schedule=MarginSchedule((0.3,))),
                       ScaleConfig((0.0,)))
        multi = train(SHORT, campus)
        assert len(single.log) == len(multi.log) == SHORT.epochs
        assert train_log_csv(single.log).splitlines()[0] == train_log_csv(multi.log).splitlines()[0]

    def test_margin_count_must_match_scales(self, campus):
        with pytest.raises(ConfigError):
            train(SHORT, campus, LossConfig(), ScaleConfig((0.0, 200.0)))

    def test_divergence_reports_step(self, campus):
        bad = Objective(third_term=lambda sim, lv: (float("nan"), np.zeros_like(sim)))
        with pytest.raises(TrainingDivergedError) as info:
            train(SHORT, campus, LossConfig(third_term=True), objective=bad)
        assert info.value.step == 0
        assert "step 0" in str(info.value)

    @pytest.mark.parametrize("kind", ["dycl", "triplet"])
    def test_small_step_descends(self, campus, kind):
        rng = np.random.default_rng(4)
        ids = campus.split_ids("train")
        st = EncoderState.initialize(128, 32, ids, 0)
        pick = np.sort(rng.choice(len(ids), 8, replace=False))
        raw = campus.raw
        xd = np.stack([raw.vectors[(raw.building_ids == ids[i]) & (raw.views == DRONE)][0] for i in pick])
        xs = np.stack([raw.vectors[(raw.building_ids == ids[i]) & (raw.views == SATELLITE)][0]
                       for i in pick]).astype(np.float64)
        xd = xd.astype(np.float64)
        lv = level_matrix(campus.registry.subset("train"), ScaleConfig())[np.ix_(pick, pick)]
        obj = Objective() if kind == "dycl" else Objective("triplet", (0, 1, 2))
        args = (lv, pick, LossConfig(), obj)
        l0, _, gw, gb, gp = batch_loss_and_grads(st, xd, xs, *args)
        st.weight -= 1e-4 * gw
        st.bias -= 1e-4 * gb
        st.proxies.vectors -= 1e-4 * gp
        l1 = batch_loss_and_grads(st, xd, xs, *args)[0]
        assert l1 <= l0 + 1e-8


class TestGradientCheck:
    def test_harness_on_quadratic(self, rng):
        A = rng.standard_normal((5, 5))
        A = A @ A.T
        x = rng.standard_normal(5)
        assert relative_error(A @ x, central_difference(lambda v: 0.5 * v @ A @ v, x)) < 1e-9

    @pytest.mark.parametrize("kind", ["dycl", "clustering", "triplet"])
    def test_kinds(self, kind):
        assert finite_difference_check(kind, trial_count=20, seed=11) < 1e-6

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            finite_difference_check("arcface", 1)


class TestMarginReport:
    def test_one_hot_embeddings(self, campus):
        reg = campus.registry
        n = len(reg)
        bids = np.repeat(np.arange(n), 2)
        es = EmbeddingSet(np.arange(2 * n), bids, np.tile([DRONE, SATELLITE], n),
                          np.eye(n, dtype=np.float32)[bids], np.ones(2 * n, bool))
        rep = margin_satisfaction_report(es, reg, ScaleConfig(), (0.9, 0.5, 0.1))
        assert rep["rates"][0] == 1.0
        assert all(t > 0 for t in rep["triples"])

    def test_matches_brute_force(self, campus, rng):
        reg = campus.registry.subset("train")
        small = campus.raw.for_buildings(reg.ids[:12]).normalized_copy()
        cfg = ScaleConfig()
        margins = (0.3, 0.2, 0.1)
        rep = margin_satisfaction_report(small, reg, cfg, margins)
        lv = level_matrix(reg, cfg)
        sat = np.zeros(3)
        tot = np.zeros(3)
        V = small.vectors.astype(np.float64)
        b = [reg.index_of(int(x)) for x in small.building_ids]
        for a in range(len(small)):
            refs = [r for r in range(len(small)) if small.views[r] != small.views[a]]
            for l in range(3):
                for p in refs:
                    if lv[b[a], b[p]] > l:
                        continue
                    for q in refs:
                        if lv[b[a], b[q]] == 3:
                            tot[l] += 1
                            sat[l] += V[a] @ V[p] - V[a] @ V[q] >= margins[l]
        assert rep["triples"] == tot.astype(int).tolist()
        assert np.allclose(rep["rates"], sat / tot, atol=1e-12)

    def test_untrained_rate_reported(self, campus):
        st = EncoderState.initialize(128, 64, campus.split_ids("train"), 0)
        emb = encode(st, campus.raw).for_buildings(campus.split_ids("train"))
        rep = margin_satisfaction_report(emb, campus.registry.subset("train"), ScaleConfig(),
                                         (0.3, 0.2, 0.1))
        print("untrained margin satisfaction:", rep["rates"])
        assert all(0 <= r <= 1 for r in rep["rates"])
