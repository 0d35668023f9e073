import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surroflow.config import RunConfig
from surroflow.dataset import Normalization
from surroflow.errors import DataError, NumericalError
from surroflow.grf import FieldSampler, GridSpec
from surroflow.network import NetworkConfig, build_network
from surroflow.simulator import SimConfig, simulate
from surroflow.uq import (
    FIELD_NAMES,
    MomentFields,
    PdfEstimate,
    RunningMoments,
    compare_uq,
    ensemble_pass,
    estimate_pdf,
    freedman_diaconis_bins,
    mc_moments,
    mc_pdf,
    pdf_l1_distance,
    relative_l2,
    simulator_evaluator,
    surrogate_evaluator,
)


def fake_evaluator(n_fail=()):
    """Deterministic stand-in for a simulator: maps an int id to maps."""

    def evaluate(realization, times_s):
        if realization in n_fail:
            raise NumericalError(f"synthetic failure for {realization}")
        rng = np.random.default_rng(1000 + realization)
        return rng.normal(size=(len(times_s), 2, 4, 5))

    return evaluate


class TestRunningMoments:
    def test_matches_two_pass_oracle(self, rng):
        draws = rng.normal(size=(17, 3, 4))
        acc = RunningMoments((3, 4))
        for row in draws:
            acc.update(row)
        np.testing.assert_allclose(acc.mean, draws.mean(axis=0), atol=1e-13)
        np.testing.assert_allclose(acc.variance, draws.var(axis=0, ddof=1), atol=1e-13)
        assert acc.count == 17

    @given(n=st.integers(2, 40), seed=st.integers(0, 99))
    @settings(max_examples=50, deadline=None)
    def test_two_pass_agreement_property(self, n, seed):
        draws = np.random.default_rng(seed).normal(size=(n, 5)) * 3.0 + 1.0
        acc = RunningMoments((5,))
        for row in draws:
            acc.update(row)
        np.testing.assert_allclose(acc.mean, draws.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(acc.variance, draws.var(axis=0, ddof=1), atol=1e-12)

    def test_variance_needs_two_samples(self):
        acc = RunningMoments((2,))
        acc.update(np.array([1.0, 2.0]))
        np.testing.assert_array_equal(acc.variance, np.zeros(2))

    def test_shape_mismatch_rejected(self):
        acc = RunningMoments((2, 2))
        with pytest.raises(DataError):
            acc.update(np.zeros(3))

    def test_constant_stream_has_zero_variance(self):
        acc = RunningMoments((3,))
        for _ in range(9):
            acc.update(np.full(3, 7.25))
        np.testing.assert_array_equal(acc.variance, np.zeros(3))
        np.testing.assert_array_equal(acc.mean, np.full(3, 7.25))


class TestFreedmanDiaconisBins:
    def test_matches_hand_rule(self, rng):
        samples = rng.normal(size=2000)
        q75, q25 = np.percentile(samples, [75, 25])
        width = 2.0 * (q75 - q25) / 2000 ** (1 / 3)
        expected = int(np.ceil((samples.max() - samples.min()) / width))
        assert freedman_diaconis_bins(samples) == np.clip(expected, 20, 512)

    def test_floor_applies_to_small_samples(self, rng):
        assert freedman_diaconis_bins(rng.normal(size=8)) >= 20

    def test_constant_sample_collapses_to_one_bin(self):
        assert freedman_diaconis_bins(np.full(50, 3.3)) == 1

    def test_cap_with_extreme_outlier(self, rng):
        samples = np.concatenate([rng.normal(size=4000), [1e6]])
        assert freedman_diaconis_bins(samples) == 512

    def test_zero_iqr_with_spread_falls_back_to_floor(self):
        samples = np.concatenate([np.zeros(100), [1.0]])
        assert freedman_diaconis_bins(samples) == 20


class TestEstimatePdf:
    def test_density_integrates_to_one(self, rng):
        samples = rng.normal(size=500)
        est = estimate_pdf(samples, (1, 2), 100.0, "saturation")
        mass = float(np.sum(est.density * np.diff(est.edges)))
        assert mass == pytest.approx(1.0, abs=1e-9)
        assert est.count == 500
        assert not est.degenerate

    def test_degenerate_constant_sample(self):
        est = estimate_pdf(np.full(64, 0.0), (0, 0), 50.0, "saturation")
        assert est.degenerate
        assert est.modes == 1
        mass = float(np.sum(est.density * np.diff(est.edges)))
        assert mass == pytest.approx(1.0, abs=1e-9)

    def test_empty_sample_rejected(self):
        with pytest.raises(DataError):
            estimate_pdf(np.array([]), (0, 0), 1.0, "pressure")

    def test_two_cluster_sample_is_bimodal(self, rng):
        low = rng.normal(0.02, 0.004, size=300)
        high = rng.normal(0.8, 0.01, size=300)
        est = estimate_pdf(np.concatenate([low, high]), (3, 3), 10.0, "saturation")
        assert est.bimodal

    def test_uniform_sample_is_unimodal(self, rng):
        est = estimate_pdf(rng.uniform(size=600), (3, 3), 10.0, "pressure")
        assert est.modes == 1
        assert not est.bimodal


class TestModeCounting:
    def _estimate(self, density):
        density = np.asarray(density, dtype=np.float64)
        edges = np.linspace(0.0, 1.0, density.size + 1)
        return PdfEstimate(
            location=(0, 0),
            time_s=0.0,
            field="saturation",
            edges=edges,
            density=density,
            count=10,
        )

    def test_single_run(self):
        assert self._estimate([0, 1, 2, 1, 0]).modes == 1

    def test_two_separated_runs(self):
        est = self._estimate([3, 0, 0, 1, 2])
        assert est.modes == 2
        assert est.bimodal

    def test_occupied_edges_count_once(self):
        assert self._estimate([1, 1, 1]).modes == 1

    def test_three_runs(self):
        assert self._estimate([1, 0, 1, 0, 1]).modes == 3


class TestRelativeL2:
    def test_known_value(self):
        a = np.array([3.0, 4.0])
        b = np.array([0.0, 4.0])
        assert relative_l2(a, b) == pytest.approx(3.0 / 4.0)

    def test_zero_reference_zero_candidate(self):
        assert relative_l2(np.zeros(4), np.zeros(4)) == 0.0

    def test_zero_reference_nonzero_candidate(self):
        assert relative_l2(np.ones(4), np.zeros(4)) == 1.0


class TestPdfL1Distance:
    def _rect(self, lo, hi):
        edges = np.array([lo, hi])
        return PdfEstimate(
            location=(0, 0),
            time_s=0.0,
            field="saturation",
            edges=edges,
            density=np.array([1.0 / (hi - lo)]),
            count=10,
        )

    def test_identical_distance_zero(self):
        a = self._rect(0.0, 1.0)
        assert pdf_l1_distance(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_supports_distance_two(self):
        d = pdf_l1_distance(self._rect(0.0, 1.0), self._rect(2.0, 3.0))
        assert d == pytest.approx(2.0, abs=0.01)

    def test_half_overlap_known_value(self):
        # both uniform height 1, overlap on [0.5, 1]: |a-b| is 1 on [0, 0.5]
        # and on [1, 1.5], zero between
        d = pdf_l1_distance(self._rect(0.0, 1.0), self._rect(0.5, 1.5))
        assert d == pytest.approx(1.0, abs=0.01)

    def test_symmetric(self, rng):
        a = estimate_pdf(rng.normal(size=300), (0, 0), 1.0, "pressure")
        b = estimate_pdf(rng.normal(1.0, 2.0, size=300), (0, 0), 1.0, "pressure")
        assert pdf_l1_distance(a, b) == pytest.approx(pdf_l1_distance(b, a))

    def test_zero_width_supports(self):
        est = PdfEstimate(
            location=(0, 0),
            time_s=0.0,
            field="saturation",
            edges=np.array([0.5, 0.5]),
            density=np.array([0.0]),
            count=1,
        )
        assert pdf_l1_distance(est, est) == 0.0


class TestEnsemblePass:
    def test_moments_match_two_pass_oracle(self):
        fields = list(range(9))
        times = (10.0, 20.0)
        moments, probes = ensemble_pass(
            fake_evaluator(), fields, times, probes=((1, 2),), tag="ids-0-8"
        )
        stacked = np.stack([fake_evaluator()(i, times) for i in fields])
        np.testing.assert_allclose(moments.mean, stacked.mean(axis=0), atol=1e-13)
        np.testing.assert_allclose(
            moments.variance, stacked.var(axis=0, ddof=1), atol=1e-13
        )
        assert moments.count == 9
        assert moments.failures == 0
        assert moments.realization_tag == "ids-0-8"
        np.testing.assert_allclose(
            probes[(1, 2)], np.moveaxis(stacked[:, :, :, 1, 2], 0, -1), atol=0
        )

    def test_failed_realizations_excluded_and_counted(self):
        fields = list(range(6))
        with pytest.warns(UserWarning, match="excluded"):
            moments, _ = ensemble_pass(fake_evaluator(n_fail={2, 4}), fields, (5.0,))
        assert moments.count == 4
        assert moments.failures == 2
        survivors = [i for i in fields if i not in {2, 4}]
        stacked = np.stack([fake_evaluator()(i, (5.0,)) for i in survivors])
        np.testing.assert_allclose(moments.mean, stacked.mean(axis=0), atol=1e-13)

    def test_too_few_survivors_rejected(self):
        with pytest.raises(NumericalError):
            with pytest.warns(UserWarning):
                ensemble_pass(fake_evaluator(n_fail={0, 1}), [0, 1, 2], (5.0,))

    def test_bad_evaluator_shape_rejected(self):
        def evaluate(realization, times_s):
            return np.zeros((len(times_s), 3, 4, 5))

        with pytest.raises(DataError):
            ensemble_pass(evaluate, [0, 1], (1.0,))

    def test_grid_shape_enforced(self):
        with pytest.raises(DataError):
            ensemble_pass(fake_evaluator(), [0, 1], (1.0,), grid_shape=(8, 8))

    def test_mc_moments_wrapper(self):
        direct, _ = ensemble_pass(fake_evaluator(), range(4), (1.0, 2.0))
        wrapped = mc_moments(fake_evaluator(), range(4), (1.0, 2.0))
        np.testing.assert_array_equal(direct.mean, wrapped.mean)
        np.testing.assert_array_equal(direct.variance, wrapped.variance)

    def test_mc_pdf_one_estimate_per_time(self):
        times = (1.0, 2.0, 3.0)
        estimates = mc_pdf(fake_evaluator(), range(8), times, (2, 3))
        assert [e.time_s for e in estimates] == list(times)
        assert all(e.location == (2, 3) for e in estimates)
        assert all(e.field == "saturation" for e in estimates)
        assert all(e.count == 8 for e in estimates)

    def test_mc_pdf_unknown_field_rejected(self):
        with pytest.raises(DataError):
            mc_pdf(fake_evaluator(), range(4), (1.0,), (0, 0), field_name="porosity")


class TestCompareUq:
    def _moments(self, seed, count=8, tag="shared"):
        rng = np.random.default_rng(seed)
        return MomentFields(
            times_s=(10.0, 20.0),
            mean=rng.normal(size=(2, 2, 4, 4)),
            variance=rng.uniform(0.1, 1.0, size=(2, 2, 4, 4)),
            count=count,
            realization_tag=tag,
        )

    def test_identical_moments_give_zero_errors(self):
        m = self._moments(0)
        cmp = compare_uq(m, m)
        for name in FIELD_NAMES:
            assert cmp.mean_rel_l2[name] == [0.0, 0.0]
            assert cmp.variance_rel_l2[name] == [0.0, 0.0]
        assert cmp.worst("pressure") == 0.0

    def test_errors_match_direct_norms(self):
        a, b = self._moments(1), self._moments(2)
        cmp = compare_uq(a, b)
        for c, name in enumerate(FIELD_NAMES):
            for j in range(2):
                expected = relative_l2(a.mean[j, c], b.mean[j, c])
                assert cmp.mean_rel_l2[name][j] == pytest.approx(expected)

    def test_count_mismatch_rejected(self):
        with pytest.raises(DataError, match="size"):
            compare_uq(self._moments(0, count=8), self._moments(0, count=9))

    def test_tag_mismatch_rejected(self):
        with pytest.raises(DataError, match="realisation"):
            compare_uq(self._moments(0, tag="a"), self._moments(0, tag="b"))

    def test_time_grid_mismatch_rejected(self):
        a = self._moments(0)
        b = self._moments(0)
        b.times_s = (10.0, 30.0)
        with pytest.raises(DataError, match="time"):
            compare_uq(a, b)

    def test_pdf_distances_for_shared_keys(self, rng):
        m = self._moments(3)
        est_a = estimate_pdf(rng.normal(size=200), (1, 1), 10.0, "saturation")
        est_b = estimate_pdf(rng.normal(size=200), (1, 1), 10.0, "saturation")
        cmp = compare_uq(
            m,
            m,
            surrogate_pdfs={("p", 10.0): est_a},
            oracle_pdfs={("p", 10.0): est_b, ("q", 20.0): est_b},
        )
        assert set(cmp.pdf_distances) == {("p", 10.0)}
        assert cmp.pdf_distances[("p", 10.0)] >= 0.0


@pytest.fixture(scope="module")
def tiny_setup():
    cfg = RunConfig(
        grid_height=8,
        grid_width=8,
        n_train=2,
        n_test=2,
        train_times_d=(100.0, 200.0),
        test_extra_times_d=(150.0,),
        uq_times_d=(100.0, 200.0),
        uq_probes=((4, 4),),
        injection_rate=1.13e-5 / 4.0,
    )
    sampler = FieldSampler(cfg.grid(), cfg.grf_params(), k_ref=cfg.k_ref)
    fields = [sampler.sample(seed) for seed in (11, 12, 13)]
    return cfg, fields


class TestEvaluatorAdapters:
    def test_simulator_evaluator_matches_direct_run(self, tiny_setup):
        cfg, fields = tiny_setup
        evaluate = simulator_evaluator(cfg)
        maps = evaluate(fields[0], cfg.uq_times_s)
        assert maps.shape == (2, 2, 8, 8)
        snaps = simulate(fields[0], cfg.sim_config(cfg.uq_times_s))
        np.testing.assert_array_equal(maps[1, 0], snaps[1].rescaled_pressure)
        np.testing.assert_array_equal(maps[0, 1], snaps[0].saturation)

    def test_simulator_ensemble_runs(self, tiny_setup):
        cfg, fields = tiny_setup
        moments, probes = ensemble_pass(
            simulator_evaluator(cfg),
            fields,
            cfg.uq_times_s,
            probes=((4, 4),),
            grid_shape=(8, 8),
        )
        assert moments.count == 3
        assert moments.mean.shape == (2, 2, 8, 8)
        assert probes[(4, 4)].shape == (2, 2, 3)
        # saturation mean must lie in the physically admissible band
        assert float(moments.mean[:, 1].min()) >= 0.0
        assert float(moments.mean[:, 1].max()) <= 1.0

    def test_surrogate_evaluator_matches_forward(self, tiny_setup):
        cfg, fields = tiny_setup
        net = build_network(
            NetworkConfig(
                height=8,
                width=8,
                initial_features=8,
                growth_rate=4,
                block_layers=(1, 1, 1),
                seed=5,
            )
        )
        norm = Normalization(time_scale_s=cfg.time_scale_s)
        evaluate = surrogate_evaluator(net, norm)
        maps = evaluate(fields[0], cfg.uq_times_s)
        assert maps.shape == (2, 2, 8, 8)
        x = fields[0].log_values[None, None].astype(np.float32)
        t = norm.normalize_time(np.array([cfg.uq_times_s[1]])).astype(np.float32)
        direct = net.forward(x, t, train=False)
        np.testing.assert_allclose(maps[1], direct[0, :2], atol=1e-6)

    def test_paired_comparison_end_to_end(self, tiny_setup):
        cfg, fields = tiny_setup
        sim_m, _ = ensemble_pass(
            simulator_evaluator(cfg), fields, cfg.uq_times_s, tag="t"
        )
        net = build_network(
            NetworkConfig(
                height=8,
                width=8,
                initial_features=8,
                growth_rate=4,
                block_layers=(1, 1, 1),
                seed=5,
            )
        )
        sur_m, _ = ensemble_pass(
            surrogate_evaluator(net, Normalization(time_scale_s=cfg.time_scale_s)),
            fields,
            cfg.uq_times_s,
            tag="t",
        )
        cmp = compare_uq(sur_m, sim_m)
        assert set(cmp.mean_rel_l2) == set(FIELD_NAMES)
        assert all(len(v) == 2 for v in cmp.mean_rel_l2.values())
        assert all(e >= 0.0 for errs in cmp.variance_rel_l2.values() for e in errs)
