import math

import numpy as np
import pytest

from windrecon.errors import MetricError
from windrecon.fields import FieldStatistics, GridSpec, VelocityField
from windrecon.metrics import (
    aggregate_reports,
    evaluate,
    evaluate_batch,
    fac2,
    mg,
    nmse,
    spatial_features,
    speed_class_counts,
    ssim,
)

from conftest import make_realization, random_field


# --- independent naive oracles ------------------------------------------------


def naive_mg(observed, predicted):
    logs = []
    for o, p in zip(observed, predicted):
        if o * p > 0:
            logs.append(math.log(o / p))
    if not logs:
        raise ValueError("empty")
    return math.exp(sum(logs) / len(logs)), len(logs)


def naive_nmse(observed, predicted):
    n = len(observed)
    num = sum((o - p) ** 2 for o, p in zip(observed, predicted)) / n
    den = (sum(observed) / n) * (sum(predicted) / n)
    return num / den


def naive_fac2(observed, predicted, w=0.005):
    hits = 0
    for o, p in zip(observed, predicted):
        ok = False
        if o != 0 and 0.5 <= p / o <= 2.0:
            ok = True
        if abs(o) <= w and abs(p) <= w:
            ok = True
        hits += ok
    return hits / len(observed)


def naive_ssim(a, b, data_range):
    size, sigma = 7, 1.5
    ax = np.arange(size) - 3.0
    g1 = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g1, g1)
    k /= k.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    ny, nx = a.shape
    vals = []
    for i in range(ny - size + 1):
        for j in range(nx - size + 1):
            wa = a[i : i + size, j : j + size]
            wb = b[i : i + size, j : j + size]
            mua = (k * wa).sum()
            mub = (k * wb).sum()
            va = (k * wa * wa).sum() - mua**2
            vb = (k * wb * wb).sum() - mub**2
            cov = (k * wa * wb).sum() - mua * mub
            vals.append(
                ((2 * mua * mub + c1) * (2 * cov + c2))
                / ((mua**2 + mub**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))


class TestMG:
    def test_identity(self):
        val, n = mg(np.array([1.0, 2.0, -3.0]), np.array([1.0, 2.0, -3.0]))
        assert val == pytest.approx(1.0)
        assert n == 3

    def test_hand_value(self):
        val, _ = mg(np.array([2.0, 2.0]), np.array([1.0, 1.0]))
        assert val == pytest.approx(2.0)

    def test_sign_filter(self):
        val, n = mg(np.array([1.0, -1.0]), np.array([1.0, 1.0]))
        assert val == pytest.approx(1.0)
        assert n == 1

    def test_empty_filter_raises(self):
        with pytest.raises(MetricError):
            mg(np.array([1.0, -2.0]), np.array([-1.0, 2.0]))

    def test_scale_property(self):
        rng = np.random.default_rng(0)
        o = rng.uniform(0.1, 2.0, size=50)
        val, _ = mg(3.0 * o, o)
        assert val == pytest.approx(3.0, rel=1e-12)


class TestNMSE:
    def test_perfect(self):
        assert nmse(np.ones(5), np.ones(5)) == 0.0

    def test_hand_value(self):
        assert nmse(np.array([1.0, 1.0]), np.array([2.0, 2.0])) == pytest.approx(0.5)

    def test_denominator_inflation(self):
        # Same +/-1 absolute errors; halving the means quadruples NMSE.
        big = nmse(np.array([3.0, 1.0]), np.array([2.0, 2.0]))
        small = nmse(np.array([2.0, 0.0]), np.array([1.0, 1.0]))
        assert small == pytest.approx(4.0 * big)

    def test_zero_mean_raises(self):
        with pytest.raises(MetricError):
            nmse(np.array([1.0, -1.0]), np.array([1.0, 1.0]))

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        o = rng.uniform(0.5, 2.0, 40)
        p = rng.uniform(0.5, 2.0, 40)
        assert nmse(7.0 * o, 7.0 * p) == pytest.approx(nmse(o, p), rel=1e-12)


class TestFAC2:
    def test_perfect(self):
        o = np.array([1.0, 2.0, -1.0])
        assert fac2(o, o) == 1.0

    def test_threshold_branch(self):
        # Ratio branch fails (4x) but both magnitudes sit inside W.
        assert fac2(np.array([0.001]), np.array([0.004])) == 1.0
        assert fac2(np.array([0.003]), np.array([0.004])) == 1.0  # inside W either way

    def test_ratio_too_large(self):
        assert fac2(np.array([1.0]), np.array([3.0])) == 0.0

    def test_zero_observation_uses_threshold_only(self):
        assert fac2(np.array([0.0]), np.array([0.004])) == 1.0
        assert fac2(np.array([0.0]), np.array([0.1])) == 0.0

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(2)
        o = rng.standard_normal(60)
        p = rng.standard_normal(60)
        perm = rng.permutation(60)
        assert fac2(o, p) == pytest.approx(fac2(o[perm], p[perm]))


class TestSSIM:
    def test_self_similarity(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((15, 15))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_shift_penalized(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((15, 15))
        assert ssim(a, a + 5.0) < 1.0

    def test_symmetry_with_fixed_range(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((15, 15))
        b = rng.standard_normal((15, 15))
        span = float(max(a.max(), b.max()) - min(a.min(), b.min()))
        assert ssim(a, b, span) == pytest.approx(ssim(b, a, span), abs=1e-12)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = rng.standard_normal((15, 15))
            b = a + 0.3 * rng.standard_normal((15, 15))
            span = float(a.max() - a.min())
            assert ssim(a, b, span) == pytest.approx(naive_ssim(a, b, span), abs=1e-10)


class TestOracleSweep:
    """Every metric equals its naive loop oracle on many random pairs."""

    def test_thousand_random_pairs(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            o = rng.standard_normal(30)
            p = o + rng.standard_normal(30) * rng.uniform(0.01, 2.0)
            assert nmse(o, p) == pytest.approx(naive_nmse(o, p), abs=1e-8, rel=1e-8)
            assert fac2(o, p) == pytest.approx(naive_fac2(o, p), abs=1e-12)
            try:
                want = naive_mg(o, p)
            except ValueError:
                with pytest.raises(MetricError):
                    mg(o, p)
            else:
                got = mg(o, p)
                assert got[0] == pytest.approx(want[0], abs=1e-8, rel=1e-8)
                assert got[1] == want[1]


class TestEvaluate:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(8)
        f = random_field(rng)
        rep = evaluate(f, f)
        assert rep.ssim == pytest.approx(1.0, abs=1e-12)
        assert rep.mg == pytest.approx(1.0)
        assert rep.nmse == 0.0
        assert rep.fac2 == 1.0

    def test_component_averaging_contract(self):
        grid = GridSpec()
        truth = np.ones((15, 15, 2))
        pred = np.ones((15, 15, 2))
        pred[:, :, 1].flat[:112] = 10.0  # fail the ratio branch on 112 v-cells
        rep = evaluate(VelocityField(grid, pred), VelocityField(grid, truth))
        assert rep.fac2_u == 1.0
        assert rep.fac2_v == pytest.approx(113 / 225)
        assert rep.fac2 == pytest.approx(0.5 * (1.0 + 113 / 225))

    def test_matches_manual_composition(self):
        rng = np.random.default_rng(9)
        truth = random_field(rng)
        pred = random_field(rng)
        rep = evaluate(pred, truth)
        assert rep.nmse_u == pytest.approx(nmse(truth.u, pred.u))
        assert rep.fac2_v == pytest.approx(fac2(truth.v, pred.v))
        assert rep.mg_u == pytest.approx(mg(truth.u, pred.u)[0])
        assert rep.ssim_v == pytest.approx(ssim(truth.v, pred.v))

    def test_batch_matches_per_snapshot(self):
        rng = np.random.default_rng(10)
        truths = rng.standard_normal((5, 15, 15, 2))
        preds = truths + 0.2 * rng.standard_normal((5, 15, 15, 2))
        grid = GridSpec()
        batch = evaluate_batch(preds, truths)
        for i in range(5):
            single = evaluate(VelocityField(grid, preds[i]), VelocityField(grid, truths[i]))
            for key, val in single.as_dict().items():
                assert batch[i].as_dict()[key] == pytest.approx(val, abs=1e-10), key

    def test_aggregate_means(self):
        rng = np.random.default_rng(11)
        truths = rng.standard_normal((4, 15, 15, 2))
        preds = truths + 0.1
        reports = evaluate_batch(preds, truths)
        agg = aggregate_reports(reports)
        assert agg["ssim"] == pytest.approx(np.mean([r.ssim for r in reports]))
        assert agg["n_snapshots"] == 4


class TestSpatialFeatures:
    def _stats(self, ws):
        ws = np.asarray(ws, dtype=float)
        return FieldStatistics(ws_mean=ws, ws_std=np.zeros_like(ws), variance_map=np.zeros_like(ws))

    def test_uniform_field_is_featureless(self):
        feats = spatial_features(self._stats(np.full((15, 15), 0.8)))
        assert feats.boundary_center_diff == pytest.approx(0.0, abs=1e-14)
        assert feats.cv == pytest.approx(0.0, abs=1e-14)
        assert feats.spatial_gradient_mean == pytest.approx(0.0, abs=1e-14)

    def test_linear_ramp_gradient(self):
        x = np.arange(15) / 14.0
        ws = np.tile(x, (15, 1))
        feats = spatial_features(self._stats(ws))
        np.testing.assert_allclose(feats.spatial_gradient, 1 / 14, atol=1e-12)
        assert feats.spatial_gradient_mean == pytest.approx(1 / 14)

    def test_checkerboard_cv(self):
        # Even-sized grid so the 0/1 split is exact: mean 0.5, std 0.5.
        ii, jj = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        ws = ((ii + jj) % 2).astype(float)
        feats = spatial_features(self._stats(ws))
        assert feats.cv == pytest.approx(1.0)

    def test_boundary_center_difference(self):
        ws = np.zeros((15, 15))
        ws[0, :] = ws[-1, :] = ws[:, 0] = ws[:, -1] = 2.0
        feats = spatial_features(self._stats(ws))
        assert feats.boundary_center_diff == pytest.approx(2.0)


class TestSpeedClasses:
    def test_all_zero(self):
        r = make_realization(np.zeros((3, 15, 15, 2)))
        assert speed_class_counts(r) == (0, 3 * 225)

    def test_zero_threshold(self):
        r = make_realization(np.zeros((2, 15, 15, 2)))
        assert speed_class_counts(r, threshold=0.0) == (2 * 225, 0)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(12)
        values = rng.standard_normal((4, 15, 15, 2))
        high = 0
        for t in range(4):
            for y in range(15):
                for x in range(15):
                    u, v = values[t, y, x]
                    high += math.sqrt(u * u + v * v) >= 0.6
        got = speed_class_counts(make_realization(values))
        assert got == (high, 4 * 225 - high)
