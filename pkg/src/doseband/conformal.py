"""Weighted split-conformal intervals and dose-response prediction bands.

The engine is a weighted empirical quantile over calibration
non-conformity scores plus a point mass at +infinity carried by the
test-point weight: with calibration weights W_i and test weight w,

    p_i = W_i / (sum_j W_j + w),    p_inf = w / (sum_j W_j + w),

the threshold eta is the (1 - alpha)-quantile of
sum_i p_i * delta_{V_i} + p_inf * delta_{inf}. When the finite mass
cannot reach 1 - alpha the threshold is +infinity and the interval is
the whole line.

Two threshold constructions coexist on purpose. The plain split path
uses the (1 - alpha)(1 + 1/n)-th order statistic of the calibration
scores; the weighted path replaces that finite-sample correction with
the test-weight atom. With equal weights the two coincide (the atom
contributes exactly the +1), and they agree asymptotically in general.

Atoms at tied score values merge their mass before the cumulative scan,
which keeps the quantile well defined for arbitrary inputs; mergeing
never changes the result because the scan already accumulates mass in
score order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .assignment import WeightConfig, stabilized_weight
from .data import Dataset, SplitIndices
from ._parallel import ordered_map

__all__ = [
    "WeightedScores",
    "Interval",
    "PredictionBand",
    "ConformalConfig",
    "SCORE_KINDS",
    "weighted_conformal_quantile",
    "calibration_scores",
    "score_interval",
    "split_conformal_interval",
    "weighted_point_interval",
    "weighted_cqr_interval",
    "prediction_band",
]

SCORE_KINDS = ("absolute-residual", "cqr", "one-sided-upper", "one-sided-lower")


@dataclass(frozen=True)
class WeightedScores:
    """Calibration non-conformity scores with their positive weights."""

    scores: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=float)
        weights = np.array(self.weights, dtype=float)
        if scores.ndim != 1 or weights.ndim != 1 or len(scores) != len(weights):
            raise ValueError("scores and weights must be equal-length vectors")
        if len(scores) == 0:
            raise ValueError("need at least one calibration score")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0.0):
            raise ValueError("weights must be finite and nonnegative")
        if not np.any(weights > 0.0):
            raise ValueError("weights must not all be zero")
        scores.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "weights", weights)

    @cached_property
    def _atoms(self):
        """Tie-merged atoms, max-normalized to keep the ratios overflow-safe.

        Returns (values ascending, suffix mass strictly above each value,
        total calibration mass, normalization scale).
        """
        scale = float(self.weights.max())
        w = self.weights / scale
        values, inverse = np.unique(self.scores, return_inverse=True)
        grouped = np.bincount(inverse, weights=w)
        rev = np.cumsum(grouped[::-1])
        total = float(rev[-1])
        suffix = np.zeros_like(grouped)
        if len(grouped) > 1:
            suffix[:-1] = rev[-2::-1]
        return values, suffix, total, scale


def weighted_conformal_quantile(ws: WeightedScores, w_new: float, alpha: float) -> float:
    """(1 - alpha)-quantile of the weighted score distribution with the
    +infinity atom of mass w_new / (sum(W) + w_new).

    Returns the smallest score whose cumulative probability reaches
    1 - alpha, or +inf when the finite atoms cannot reach it (i.e. the
    infinity atom alone exceeds alpha). Equivalently, and this is how
    the scan is implemented, it is the smallest value whose strict
    upper-tail mass, always including the infinity atom, is at most
    alpha times the total.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    if not (math.isfinite(w_new) and w_new >= 0.0):
        raise ValueError("w_new must be finite and nonnegative")
    values, suffix, total, scale = ws._atoms
    w = w_new / scale
    if not math.isfinite(w):
        return math.inf
    ok = suffix + w <= alpha * (total + w)
    hits = np.nonzero(ok)[0]
    if hits.size == 0:
        return math.inf
    return float(values[hits[0]])


@dataclass(frozen=True)
class Interval:
    """Prediction interval; bounds may be infinite, and a one-sided
    interval carries the corresponding infinite bound."""

    lower: float
    upper: float
    sided: str = "two-sided"

    def __post_init__(self):
        if self.sided not in ("two-sided", "upper-only", "lower-only"):
            raise ValueError(f"unknown sidedness {self.sided!r}")
        if math.isnan(self.lower) or math.isnan(self.upper):
            raise ValueError("interval bounds must not be NaN")
        if self.lower > self.upper:
            raise ValueError("need lower <= upper")

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper


@dataclass(frozen=True)
class PredictionBand:
    """Pointwise prediction intervals over a treatment grid, one
    covariate profile."""

    t_grid: np.ndarray
    intervals: tuple[Interval, ...]
    x: np.ndarray

    def __post_init__(self):
        grid = np.array(self.t_grid, dtype=float)
        if grid.ndim != 1 or len(grid) != len(self.intervals):
            raise ValueError("grid and intervals must have matching lengths")
        if len(grid) >= 2 and not np.all(np.diff(grid) > 0):
            raise ValueError("t_grid must be strictly increasing")
        grid.flags.writeable = False
        object.__setattr__(self, "t_grid", grid)
        object.__setattr__(self, "intervals", tuple(self.intervals))


@dataclass(frozen=True)
class ConformalConfig:
    alpha: float
    score_kind: str = "cqr"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly inside (0, 1)")
        if self.score_kind not in SCORE_KINDS:
            raise ValueError(f"score_kind must be one of {SCORE_KINDS}")


def _quantile_pair_levels(model) -> tuple[float, float]:
    if len(model.levels) != 2:
        raise ValueError("two-sided quantile scoring needs a model with two levels")
    return model.levels[0], model.levels[1]


def calibration_scores(model, cfg: ConformalConfig, data: Dataset, idx) -> np.ndarray:
    """Non-conformity scores on the given rows under cfg.score_kind."""
    idx = np.asarray(idx)
    x, t, y = data.x[idx], data.t[idx], data.y[idx]
    kind = cfg.score_kind
    if kind == "absolute-residual":
        return np.abs(model.mean(x, t) - y)
    if kind == "cqr":
        lo_level, hi_level = _quantile_pair_levels(model)
        lo = model.quantile(x, t, lo_level)
        hi = model.quantile(x, t, hi_level)
        lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
        return np.maximum(lo - y, y - hi)
    if kind == "one-sided-upper":
        return y - model.quantile(x, t, max(model.levels))
    # one-sided-lower
    return model.quantile(x, t, min(model.levels)) - y


def score_interval(model, cfg: ConformalConfig, x_new, t_new, eta: float) -> Interval:
    """Interval at (x_new, t_new) from a conformal threshold eta.

    If an inverted pair ever arises (possible only for strongly negative
    eta under heteroskedastic quantile widths) it collapses to its
    midpoint, which is empty for a continuous response.
    """
    kind = cfg.score_kind
    if kind == "absolute-residual":
        m = model.mean(x_new, t_new)
        return Interval(m - eta, m + eta)
    if kind == "cqr":
        lo_level, hi_level = _quantile_pair_levels(model)
        lo = model.quantile(x_new, t_new, lo_level)
        hi = model.quantile(x_new, t_new, hi_level)
        lo, hi = min(lo, hi), max(lo, hi)
        lower, upper = lo - eta, hi + eta
        if lower > upper:
            mid = 0.5 * (lower + upper)
            lower = upper = mid
        return Interval(lower, upper)
    if kind == "one-sided-upper":
        hi = model.quantile(x_new, t_new, max(model.levels))
        return Interval(-math.inf, hi + eta, sided="upper-only")
    lo = model.quantile(x_new, t_new, min(model.levels))
    return Interval(lo - eta, math.inf, sided="lower-only")


def _split_rank(n_cal: int, alpha: float) -> int:
    """Order-statistic rank of the (1-alpha)(1 + 1/n) empirical quantile.

    Computed from the alpha side, n+1 - floor(alpha*(n+1)), which equals
    ceil((1-alpha)(n+1)) but avoids the catastrophic rounding of
    (1-alpha)*(n+1) landing just above an integer.
    """
    return n_cal + 1 - int(math.floor(alpha * (n_cal + 1)))


def split_conformal_interval(
    data: Dataset,
    sp: SplitIndices,
    mean_model,
    alpha: float,
    x_new,
    t_new,
) -> Interval:
    """Plain split-conformal interval around a conditional-mean prediction.

    The threshold is the (1-alpha)(1 + 1/n)-th empirical quantile of the
    calibration absolute residuals. A calibration set too small for the
    requested level yields the infinite interval rather than an error.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly inside (0, 1)")
    cfg = ConformalConfig(alpha, "absolute-residual")
    scores = calibration_scores(mean_model, cfg, data, sp.cal)
    n = len(scores)
    rank = _split_rank(n, alpha)
    if rank > n:
        return Interval(-math.inf, math.inf)
    eta = float(np.partition(scores, rank - 1)[rank - 1])
    return score_interval(mean_model, cfg, x_new, t_new, eta)


def _weighted_interval(
    data, sp, model, gps, h, cfg, x_new, t_new, weight_cfg
) -> Interval:
    scores = calibration_scores(model, cfg, data, sp.cal)
    weights = stabilized_weight(
        h, gps, weight_cfg, data.t[sp.cal], data.x[sp.cal]
    )
    w_new = stabilized_weight(h, gps, weight_cfg, float(t_new), np.asarray(x_new, dtype=float))
    eta = weighted_conformal_quantile(WeightedScores(scores, weights), w_new, cfg.alpha)
    return score_interval(model, cfg, x_new, t_new, eta)


def weighted_point_interval(
    data: Dataset,
    sp: SplitIndices,
    mean_model,
    gps,
    h,
    cfg: ConformalConfig,
    x_new,
    t_new,
    weight_cfg: WeightConfig = WeightConfig(),
) -> Interval:
    """Weighted conformal interval around a conditional-mean prediction
    (absolute-residual scores, likelihood-ratio weights)."""
    if cfg.score_kind != "absolute-residual":
        raise ValueError("point intervals use the absolute-residual score")
    return _weighted_interval(data, sp, mean_model, gps, h, cfg, x_new, t_new, weight_cfg)


def weighted_cqr_interval(
    data: Dataset,
    sp: SplitIndices,
    quantile_model,
    gps,
    h,
    cfg: ConformalConfig,
    x_new,
    t_new,
    weight_cfg: WeightConfig = WeightConfig(),
) -> Interval:
    """Weighted conformalized quantile-regression interval.

    Two-sided: scores max(q_lo - Y, Y - q_hi), interval
    [q_lo - eta, q_hi + eta] (eta may be negative, shrinking the pair).
    One-sided kinds use the signed score against the single fitted level
    and leave the other side unbounded.
    """
    if cfg.score_kind == "absolute-residual":
        raise ValueError("use weighted_point_interval for absolute-residual scores")
    return _weighted_interval(data, sp, quantile_model, gps, h, cfg, x_new, t_new, weight_cfg)


def prediction_band(
    data: Dataset,
    sp: SplitIndices,
    model,
    gps,
    h_factory,
    cfg: ConformalConfig,
    x_new,
    t_min: float,
    t_max: float,
    n_grid: int,
    weight_cfg: WeightConfig = WeightConfig(),
    threads: int = 1,
) -> PredictionBand:
    """Pointwise band over an inclusive, evenly spaced treatment grid.

    ``h_factory`` maps each grid treatment to its assignment
    distribution, covering both a fixed shift (ignore the argument) and
    treatment-tracking numerators such as the decile-midpoint weights.
    Grid points are independent; results are identical for any thread
    count.
    """
    if n_grid < 2:
        raise ValueError("need at least 2 grid points")
    if not t_min < t_max:
        raise ValueError("need t_min < t_max")
    grid = np.linspace(t_min, t_max, n_grid)

    def one(t_k: float) -> Interval:
        h = h_factory(float(t_k))
        if cfg.score_kind == "absolute-residual":
            return weighted_point_interval(
                data, sp, model, gps, h, cfg, x_new, float(t_k), weight_cfg
            )
        return weighted_cqr_interval(
            data, sp, model, gps, h, cfg, x_new, float(t_k), weight_cfg
        )

    intervals = ordered_map(one, [float(t) for t in grid], threads)
    return PredictionBand(t_grid=grid, intervals=tuple(intervals), x=np.asarray(x_new, dtype=float))
