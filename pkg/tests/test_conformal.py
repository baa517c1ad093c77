import math
from fractions import Fraction

import numpy as np
import pytest

from doseband.assignment import NormalAssignment, WeightConfig
from doseband.conformal import (
    ConformalConfig,
    Interval,
    PredictionBand,
    WeightedScores,
    calibration_scores,
    prediction_band,
    score_interval,
    split_conformal_interval,
    weighted_conformal_quantile,
    weighted_cqr_interval,
    weighted_point_interval,
)
from doseband.data import Dataset, split
from doseband.dist import NormalParams, Rng
from doseband.outcome import LinearPinballModel, OracleMeanModel, OracleQuantileModel
from doseband.propensity import CallableGps, OracleGaussianGps


def oracle_weighted_quantile(scores, weights, w_new, alpha):
    """Brute-force reference: enumerate the discrete distribution in exact
    dyadic-rational arithmetic and take its (1 - alpha)-quantile.

    Equivalent formulation used here: the quantile is the smallest value
    whose strict upper-tail mass (always counting the infinity atom) is
    at most alpha of the total.
    """
    atoms: dict[float, Fraction] = {}
    for v, w in zip(scores, weights):
        atoms[float(v)] = atoms.get(float(v), Fraction(0)) + Fraction(float(w))
    total = sum(atoms.values(), Fraction(0)) + Fraction(float(w_new))
    target = Fraction(float(alpha)) * total
    tail = Fraction(float(w_new))
    best = math.inf
    for v in sorted(atoms, reverse=True):
        if tail <= target:
            best = v
            tail += atoms[v]
        else:
            break
    return best


def _mean_model(fn=lambda x, t: x[:, 0] + t):
    return OracleMeanModel(mean_fn=fn)


def _flat_gps():
    return CallableGps(fn=lambda t, x: np.ones_like(t))


class TestWeightedQuantile:
    def test_uniform_weights_example(self):
        ws = WeightedScores([1.0, 2.0, 3.0, 4.0], [1.0] * 4)
        assert weighted_conformal_quantile(ws, 1.0, 0.2) == 4.0

    def test_infinity_mass_dominance(self):
        ws = WeightedScores([1.0], [1.0])
        assert weighted_conformal_quantile(ws, 9.0, 0.1) == math.inf

    def test_small_random_instances_match_oracle(self):
        gen = Rng(17).gen
        for _ in range(200):
            n = int(gen.integers(1, 21))
            scores = gen.normal(size=n)
            weights = gen.gamma(1.0, 2.0, size=n) + 1e-3
            w_new = float(gen.gamma(1.0, 2.0))
            alpha = float(gen.uniform(0.02, 0.5))
            ws = WeightedScores(scores, weights)
            got = weighted_conformal_quantile(ws, w_new, alpha)
            want = oracle_weighted_quantile(scores, weights, w_new, alpha)
            assert got == want

    def test_tied_scores_merge(self):
        scores = [1.0, 1.0, 2.0, 2.0, 3.0]
        weights = [0.3, 0.3, 0.2, 0.1, 0.1]
        ws = WeightedScores(scores, weights)
        for alpha in (0.05, 0.21, 0.4, 0.61):
            got = weighted_conformal_quantile(ws, 0.25, alpha)
            assert got == oracle_weighted_quantile(scores, weights, 0.25, alpha)

    def test_monotone_in_w_new(self):
        gen = Rng(3).gen
        ws = WeightedScores(gen.normal(size=40), gen.random(40) + 0.1)
        prev = -math.inf
        for w_new in np.linspace(0.0, 20.0, 50):
            eta = weighted_conformal_quantile(ws, float(w_new), 0.1)
            assert eta >= prev
            prev = eta

    def test_monotone_in_alpha(self):
        gen = Rng(4).gen
        ws = WeightedScores(gen.normal(size=40), gen.random(40) + 0.1)
        prev = math.inf
        for alpha in np.linspace(0.02, 0.9, 40):
            eta = weighted_conformal_quantile(ws, 0.7, float(alpha))
            assert eta <= prev
            prev = eta

    def test_scaling_invariance_powers_of_two(self):
        # exact invariance for exact (power-of-two) rescalings
        gen = Rng(5).gen
        scores = gen.normal(size=30)
        weights = gen.random(30) + 0.05
        base = weighted_conformal_quantile(WeightedScores(scores, weights), 0.8, 0.13)
        for k in (-40, -7, 3, 25):
            c = 2.0**k
            scaled = weighted_conformal_quantile(
                WeightedScores(scores, weights * c), 0.8 * c, 0.13
            )
            assert scaled == base

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError, match="not all be zero"):
            WeightedScores([1.0, 2.0], [0.0, 0.0])

    def test_zero_w_new_always_finite(self):
        ws = WeightedScores([5.0], [1.0])
        assert weighted_conformal_quantile(ws, 0.0, 0.05) == 5.0


class TestSplitConformal:
    def _dataset(self, n=120, seed=0, noise=1.0):
        gen = Rng(seed).gen
        x = gen.normal(size=(n, 1))
        t = gen.normal(size=n)
        y = x[:, 0] + t + noise * gen.normal(size=n)
        return Dataset(y, t, x)

    def test_perfect_model_zero_width(self):
        d = self._dataset(noise=0.0)
        sp = split(d, 0.5, Rng(1))
        iv = split_conformal_interval(d, sp, _mean_model(), 0.1, np.array([0.5]), 1.0)
        assert iv.length == pytest.approx(0.0, abs=1e-12)

    def test_rank_on_1_to_99(self):
        # residuals 1..99 at alpha=0.1: the threshold is the 90th order statistic
        from doseband.data import SplitIndices

        gen = Rng(2).gen
        resid = np.arange(1.0, 100.0)
        y = resid * np.where(gen.random(99) < 0.5, 1.0, -1.0)  # model predicts 0
        big = Dataset(np.r_[np.zeros(9), y], np.zeros(108), np.zeros((108, 1)))
        sp = SplitIndices(np.arange(9), np.arange(9, 108))
        model = _mean_model(lambda xx, tt: np.zeros(len(tt)))
        iv = split_conformal_interval(big, sp, model, 0.1, np.array([0.0]), 0.0)
        assert iv.upper == pytest.approx(90.0)
        assert iv.lower == pytest.approx(-90.0)

    def test_too_small_calibration_gives_infinite(self):
        d = self._dataset(n=10)
        from doseband.data import SplitIndices

        sp = SplitIndices(np.arange(5), np.arange(5, 10))
        iv = split_conformal_interval(d, sp, _mean_model(), 0.05, np.array([0.0]), 0.0)
        assert iv.lower == -math.inf and iv.upper == math.inf

    def test_equal_weights_reduction_exact(self):
        # the weighted path with unit weights reproduces the split threshold
        d = self._dataset(n=200, seed=5)
        sp = split(d, 0.5, Rng(6))
        model = _mean_model()
        for alpha in (0.05, 0.1, 0.2, 0.25):
            split_iv = split_conformal_interval(d, sp, model, alpha, np.array([0.3]), 0.7)
            cfg = ConformalConfig(alpha, "absolute-residual")
            h = NormalAssignment(NormalParams(0.0, 1.0))
            gps = CallableGps(fn=lambda t, x: np.array(
                [h.density(float(v)) for v in np.atleast_1d(t)]
            ))
            w_iv = weighted_point_interval(d, sp, model, gps, h, cfg, np.array([0.3]), 0.7)
            assert w_iv.lower == split_iv.lower
            assert w_iv.upper == split_iv.upper


class TestWeightedIntervals:
    def _setup(self, n=300, seed=7):
        gen = Rng(seed).gen
        x = gen.normal(size=(n, 1))
        t = gen.normal(size=n)
        y = x[:, 0] + t + gen.normal(size=n)
        d = Dataset(y, t, x)
        sp = split(d, 0.5, Rng(seed + 1))
        return d, sp

    def test_cqr_interval_contains_quantile_pair_when_eta_positive(self):
        d, sp = self._setup()
        model = OracleQuantileModel(
            mean_fn=lambda x, t: x[:, 0] + t, variance=1.0, levels=(0.05, 0.95)
        )
        cfg = ConformalConfig(0.1, "cqr")
        h = NormalAssignment(NormalParams(0.0, 1.0))
        gps = _flat_gps()
        from doseband.assignment import stabilized_weight

        V = calibration_scores(model, cfg, d, sp.cal)
        W = stabilized_weight(h, gps, WeightConfig(), d.t[sp.cal], d.x[sp.cal])
        w_new = stabilized_weight(h, gps, WeightConfig(), 0.4, np.array([0.2]))
        eta = weighted_conformal_quantile(WeightedScores(V, W), w_new, cfg.alpha)
        iv = weighted_cqr_interval(d, sp, model, gps, h, cfg, np.array([0.2]), 0.4)
        lo = model.quantile(np.array([0.2]), 0.4, 0.05)
        hi = model.quantile(np.array([0.2]), 0.4, 0.95)
        assert iv.lower == lo - eta and iv.upper == hi + eta
        if eta >= 0:
            assert iv.lower <= lo and iv.upper >= hi
        assert iv.length == pytest.approx((hi - lo) + 2 * eta)

    def test_one_sided_upper(self):
        d, sp = self._setup()
        model = OracleQuantileModel(
            mean_fn=lambda x, t: x[:, 0] + t, variance=1.0, levels=(0.9,)
        )
        cfg = ConformalConfig(0.1, "one-sided-upper")
        h = NormalAssignment(NormalParams(0.0, 1.0))
        iv = weighted_cqr_interval(d, sp, model, _flat_gps(), h, cfg, np.array([0.2]), 0.4)
        assert iv.lower == -math.inf
        assert iv.sided == "upper-only"
        # signed score: V = y - q_{0.9}; threshold shifts the fitted quantile
        scores = calibration_scores(model, cfg, d, sp.cal)
        np.testing.assert_allclose(
            scores,
            d.y[sp.cal] - model.quantile(d.x[sp.cal], d.t[sp.cal], 0.9),
        )

    def test_one_sided_lower(self):
        d, sp = self._setup()
        model = OracleQuantileModel(
            mean_fn=lambda x, t: x[:, 0] + t, variance=1.0, levels=(0.1,)
        )
        cfg = ConformalConfig(0.1, "one-sided-lower")
        h = NormalAssignment(NormalParams(0.0, 1.0))
        iv = weighted_cqr_interval(d, sp, model, _flat_gps(), h, cfg, np.array([0.2]), 0.4)
        assert iv.upper == math.inf and iv.sided == "lower-only"

    def test_infinite_eta_gives_whole_line(self):
        ws_scores = np.array([0.5, 1.0])
        d = Dataset(
            np.array([0.0, 0.0, 0.5, -1.0]),
            np.array([0.0, 0.0, 0.0, 0.0]),
            np.zeros((4, 1)),
        )
        from doseband.data import SplitIndices

        sp = SplitIndices(np.arange(2), np.arange(2, 4))
        model = OracleQuantileModel(
            mean_fn=lambda x, t: np.zeros(len(t)), variance=1.0, levels=(0.05, 0.95)
        )
        cfg = ConformalConfig(0.1, "cqr")
        h = NormalAssignment(NormalParams(0.0, 1.0))
        # gps tiny at the test point -> enormous test weight -> p_inf > alpha
        gps = CallableGps(fn=lambda t, x: np.where(np.abs(t) < 1e-9, 1e-12, 1.0))
        iv = weighted_cqr_interval(d, sp, model, gps, h, cfg, np.array([0.0]), 0.0)
        assert iv.lower == -math.inf and iv.upper == math.inf


class TestPredictionBand:
    def _pieces(self, seed=11):
        gen = Rng(seed).gen
        n = 200
        x = gen.normal(size=(n, 1))
        t = gen.normal(size=n)
        y = x[:, 0] + t + gen.normal(size=n)
        d = Dataset(y, t, x)
        sp = split(d, 0.5, Rng(seed + 1))
        model = OracleQuantileModel(
            mean_fn=lambda xx, tt: xx[:, 0] + tt, variance=1.0, levels=(0.05, 0.95)
        )
        return d, sp, model

    def test_two_point_band_matches_direct_calls(self):
        d, sp, model = self._pieces()
        cfg = ConformalConfig(0.1, "cqr")
        h = NormalAssignment(NormalParams(0.0, 1.0))
        gps = _flat_gps()
        band = prediction_band(
            d, sp, model, gps, lambda t: h, cfg, np.array([0.5]), -1.0, 1.0, 2
        )
        assert len(band.intervals) == 2
        np.testing.assert_array_equal(band.t_grid, [-1.0, 1.0])
        for t_k, iv in zip(band.t_grid, band.intervals):
            direct = weighted_cqr_interval(
                d, sp, model, gps, h, cfg, np.array([0.5]), float(t_k)
            )
            assert iv.lower == direct.lower and iv.upper == direct.upper

    def test_constant_model_constant_weights_identical_intervals(self):
        from doseband.assignment import UniformAssignment

        d, sp, _ = self._pieces()
        model = OracleQuantileModel(
            mean_fn=lambda xx, tt: np.zeros(len(tt)), variance=1.0, levels=(0.05, 0.95)
        )
        cfg = ConformalConfig(0.1, "cqr")
        # uniform numerator over a range containing all data and the grid,
        # flat gps: every weight (calibration and test) is the same constant
        h = UniformAssignment(-50.0, 50.0)
        band = prediction_band(
            d, sp, model, _flat_gps(), lambda t: h, cfg, np.array([0.5]), 0.0, 3.0, 5
        )
        first = band.intervals[0]
        for iv in band.intervals[1:]:
            assert iv.lower == first.lower and iv.upper == first.upper

    def test_threads_bit_identical(self):
        d, sp, model = self._pieces()
        cfg = ConformalConfig(0.1, "cqr")
        h = NormalAssignment(NormalParams(0.0, 1.0))
        b1 = prediction_band(
            d, sp, model, _flat_gps(), lambda t: h, cfg, np.array([0.5]), -2.0, 2.0, 7, threads=1
        )
        b2 = prediction_band(
            d, sp, model, _flat_gps(), lambda t: h, cfg, np.array([0.5]), -2.0, 2.0, 7, threads=4
        )
        for a, b in zip(b1.intervals, b2.intervals):
            assert a.lower == b.lower and a.upper == b.upper

    def test_grid_validation(self):
        d, sp, model = self._pieces()
        cfg = ConformalConfig(0.1, "cqr")
        with pytest.raises(ValueError):
            prediction_band(
                d, sp, model, _flat_gps(), lambda t: None, cfg, np.array([0.5]), 0.0, 1.0, 1
            )
        with pytest.raises(ValueError):
            prediction_band(
                d, sp, model, _flat_gps(), lambda t: None, cfg, np.array([0.5]), 2.0, 1.0, 5
            )


class TestIntervalType:
    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            Interval(2.0, 1.0)
        with pytest.raises(ValueError):
            Interval(0.0, float("nan"))

    def test_contains_and_length(self):
        iv = Interval(-1.0, 3.0)
        assert iv.contains(0.0) and not iv.contains(4.0)
        assert iv.length == 4.0

    def test_band_grid_must_increase(self):
        with pytest.raises(ValueError):
            PredictionBand(
                t_grid=np.array([1.0, 0.5]),
                intervals=(Interval(0, 1), Interval(0, 1)),
                x=np.array([0.0]),
            )
