"""Performance and risk statistics over equity curves and return series.

Conventions: geometric annualization at 252 trading days or 12 months,
empirical (historical) VaR with lower interpolation, Sortino downside
target of zero, percentile bootstrap. Undefined ratios raise typed errors
instead of returning NaN.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import date

import numpy as np
from scipy import stats as sps

PERIODS_PER_YEAR = {"daily": 252, "monthly": 12}


class MetricsError(ValueError):
    pass


class SharpeUndefinedError(MetricsError):
    """Zero return variance makes the Sharpe ratio undefined."""


class CalmarUndefinedError(MetricsError):
    """Zero drawdown makes the Calmar ratio undefined."""


class DegenerateTestError(MetricsError):
    """Constant nonzero differences admit no t statistic."""


@dataclass(frozen=True)
class ReturnSeries:
    periodicity: str
    points: tuple  # (date, simple return) pairs, dates strictly increasing

    def __init__(self, periodicity: str, points):
        if periodicity not in PERIODS_PER_YEAR:
            raise MetricsError(f"periodicity must be one of {sorted(PERIODS_PER_YEAR)}")
        pts = tuple((d, float(r)) for d, r in points)
        for (d1, _), (d2, _) in zip(pts, pts[1:]):
            if d2 <= d1:
                raise MetricsError(f"dates not strictly increasing at {d2}")
        for _, r in pts:
            if r <= -1.0:
                raise MetricsError(f"return {r} is not greater than -1")
        object.__setattr__(self, "periodicity", periodicity)
        object.__setattr__(self, "points", pts)

    @property
    def periods_per_year(self) -> int:
        return PERIODS_PER_YEAR[self.periodicity]

    def values(self) -> np.ndarray:
        return np.array([r for _, r in self.points], dtype=float)

    def dates(self) -> list:
        return [d for d, _ in self.points]

    @classmethod
    def from_curve(cls, curve, periodicity: str = "daily") -> "ReturnSeries":
        """Simple returns from an equity curve of values or (date, value) pairs."""
        curve = list(curve)
        if len(curve) < 2:
            raise MetricsError("need at least 2 curve points")
        if isinstance(curve[0], (tuple, list)):
            dates = [d for d, _ in curve]
            values = [float(v) for _, v in curve]
        else:
            dates = [date.fromordinal(date(2000, 1, 3).toordinal() + i) for i in range(len(curve))]
            values = [float(v) for v in curve]
        rets = [(dates[i], values[i] / values[i - 1] - 1.0) for i in range(1, len(values))]
        return cls(periodicity, rets)


def _coerce(series_or_curve, periodicity: str = "daily") -> ReturnSeries:
    if isinstance(series_or_curve, ReturnSeries):
        return series_or_curve
    return ReturnSeries.from_curve(series_or_curve, periodicity)


# ---------------------------------------------------------------------------
# Individual statistics

def annualized_return(series: ReturnSeries) -> float:
    r = series.values()
    growth = float(np.prod(1.0 + r))
    return growth ** (series.periods_per_year / len(r)) - 1.0


def sharpe_ratio(series: ReturnSeries, risk_free_rate: float = 0.0) -> float:
    r = series.values()
    excess = r - risk_free_rate / series.periods_per_year
    sd = float(np.std(excess, ddof=1))
    # Constant series leave femto-scale rounding residue, not an exact zero.
    if sd == 0.0 or sd <= abs(float(np.mean(excess))) * 1e-13:
        raise SharpeUndefinedError("zero return variance")
    return float(np.mean(excess)) / sd * math.sqrt(series.periods_per_year)


def sortino_ratio(series: ReturnSeries, risk_free_rate: float = 0.0) -> float:
    r = series.values()
    downside = np.minimum(r, 0.0)
    dd = math.sqrt(float(np.mean(downside ** 2)))
    if dd == 0.0:
        raise MetricsError("no downside periods; Sortino undefined")
    excess_mean = float(np.mean(r)) - risk_free_rate / series.periods_per_year
    return excess_mean / dd * math.sqrt(series.periods_per_year)


def drawdown_curve(series: ReturnSeries) -> np.ndarray:
    wealth = np.cumprod(1.0 + series.values())
    peaks = np.maximum.accumulate(np.concatenate(([1.0], wealth)))
    return np.concatenate(([1.0], wealth)) / peaks - 1.0


def max_drawdown(series: ReturnSeries) -> float:
    return float(drawdown_curve(series).min())


def average_drawdown(series: ReturnSeries) -> float:
    """Mean depth over the periods spent in drawdown; 0 when never under water."""
    dd = drawdown_curve(series)
    under = dd[dd < 0]
    return float(under.mean()) if under.size else 0.0


def calmar_ratio(series: ReturnSeries) -> float:
    mdd = max_drawdown(series)
    if mdd == 0.0:
        raise CalmarUndefinedError("zero drawdown")
    return annualized_return(series) / abs(mdd)


def value_at_risk(series: ReturnSeries, level: float = 0.95) -> float:
    """Empirical per-period VaR: the (1 - level) quantile, lower interpolation."""
    r = series.values()
    return float(np.percentile(r, (1.0 - level) * 100.0, method="lower"))


def expected_shortfall(series: ReturnSeries, level: float = 0.95) -> float:
    r = series.values()
    var = value_at_risk(series, level)
    tail = r[r <= var]
    return float(tail.mean())


def win_rate(series: ReturnSeries) -> float:
    r = series.values()
    return float(np.mean(r > 0))


# ---------------------------------------------------------------------------
# Report

REPORT_LABELS = (
    ("annualized_return", "Annual Return"),
    ("sharpe", "Sharpe Ratio"),
    ("sortino", "Sortino Ratio"),
    ("max_drawdown", "Maximum Drawdown"),
    ("average_drawdown", "Average Drawdown"),
    ("var_95", "Value at Risk (95%)"),
    ("expected_shortfall", "Expected Shortfall"),
    ("calmar", "Calmar Ratio"),
    ("win_rate", "Win Rate"),
)


@dataclass
class MetricsReport:
    annualized_return: float
    sharpe: float
    sortino: float
    calmar: float
    max_drawdown: float
    average_drawdown: float
    var_95: float
    expected_shortfall: float
    win_rate: float
    intervals: dict = field(default_factory=dict)  # field -> (low, high)

    def to_payload(self) -> dict:
        payload = {}
        for attr, label in REPORT_LABELS:
            payload[label] = getattr(self, attr)
            if attr in self.intervals:
                low, high = self.intervals[attr]
                payload[label + " 95% CI"] = [low, high]
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), indent=2)

    def render_text(self) -> str:
        width = max(len(label) for _, label in REPORT_LABELS) + 2
        lines = []
        for attr, label in REPORT_LABELS:
            value = getattr(self, attr)
            if attr in ("sharpe", "sortino", "calmar"):
                text = f"{value:.2f}"
            else:
                text = f"{value:+.2%}"
            if attr in self.intervals:
                low, high = self.intervals[attr]
                text += f"  [{low:+.4f}, {high:+.4f}]"
            lines.append(f"{label:<{width}}{text}")
        return "\n".join(lines)


def compute_metrics(series_or_curve, risk_free_rate: float = 0.0,
                    periodicity: str = "daily") -> MetricsReport:
    """Full metric set; raises the corresponding typed error for any
    undefined ratio (zero variance, zero drawdown, no downside)."""
    series = _coerce(series_or_curve, periodicity)
    if len(series.points) < 2:
        raise MetricsError("need at least 2 return points")
    return MetricsReport(
        annualized_return=annualized_return(series),
        sharpe=sharpe_ratio(series, risk_free_rate),
        sortino=sortino_ratio(series, risk_free_rate),
        calmar=calmar_ratio(series),
        max_drawdown=max_drawdown(series),
        average_drawdown=average_drawdown(series),
        var_95=value_at_risk(series),
        expected_shortfall=expected_shortfall(series),
        win_rate=win_rate(series),
    )


# ---------------------------------------------------------------------------
# Statistical machinery

def bootstrap_ci(values, statistic, iterations: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for statistic(values).

    Resamples i.i.d. with replacement. Each iteration derives its own child
    seed, so results are identical however the loop is scheduled.
    """
    if isinstance(values, ReturnSeries):
        values = values.values()
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise MetricsError("bootstrap needs a non-empty series")
    children = np.random.SeedSequence(seed).spawn(iterations)
    stats_out = np.empty(iterations)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        sample = values[rng.integers(0, values.size, size=values.size)]
        stats_out[i] = statistic(sample)
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(stats_out, [alpha * 100.0, (1.0 - alpha) * 100.0])
    return float(low), float(high)


def paired_t_test(series_a, series_b) -> tuple[float, float, float]:
    """Classic paired t test; returns (mean difference, t, two-sided p).

    All-zero differences are the exact null: (0, 0, 1). Constant nonzero
    differences raise DegenerateTestError.
    """
    if isinstance(series_a, ReturnSeries) and isinstance(series_b, ReturnSeries):
        if series_a.dates() != series_b.dates():
            raise MetricsError("paired series must be date-aligned")
        a, b = series_a.values(), series_b.values()
    else:
        a = np.asarray(list(series_a), dtype=float)
        b = np.asarray(list(series_b), dtype=float)
    if a.size != b.size:
        raise MetricsError("paired series must have equal length")
    if a.size < 2:
        raise MetricsError("need at least 2 paired observations")
    diff = a - b
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    degenerate = sd == 0.0 or sd < abs(mean) * 1e-12
    if degenerate:
        if mean == 0.0:
            return 0.0, 0.0, 1.0
        raise DegenerateTestError("constant nonzero differences")
    n = diff.size
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * float(sps.t.sf(abs(t), n - 1))
    return mean, t, p


@dataclass(frozen=True)
class RiskAversionConfig:
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise MetricsError("gamma must be positive")


def crra_certainty_equivalent(values, config: RiskAversionConfig) -> float:
    """Constant-return equivalent of a risky series under CRRA utility.

    Utility of the wealth relative w = 1 + r is w**(1-gamma) / (1-gamma),
    log(w) at gamma = 1. The certainty equivalent inverts mean utility.
    """
    if isinstance(values, ReturnSeries):
        values = values.values()
    w = 1.0 + np.asarray(list(values), dtype=float)
    if np.any(w <= 0):
        raise MetricsError("returns must stay above -100%")
    g = config.gamma
    if g == 1.0:
        return float(np.exp(np.mean(np.log(w))) - 1.0)
    mean_u = float(np.mean(w ** (1.0 - g) / (1.0 - g)))
    return float(((1.0 - g) * mean_u) ** (1.0 / (1.0 - g)) - 1.0)
