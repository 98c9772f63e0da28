"""Lognormal (Black-Scholes) option pricing and related market arithmetic.

The backtester has no real option quotes, so premiums and marks come from
European-style lognormal pricing fed with trailing realized volatility.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm

DAYS_PER_YEAR = 365.0
TRADING_DAYS_PER_YEAR = 252
REALIZED_VOL_WINDOW = 21


class PricingError(ValueError):
    """Domain violation in pricing inputs."""


def price_option_premium(spot: float, strike: float, vol: float,
                         days_to_expiry: float, rate: float = 0.0,
                         option_type: str = "put") -> float:
    """European option value per share.

    Args:
        spot: Current underlying price (> 0).
        strike: Option strike (> 0).
        vol: Annualized volatility (>= 0).
        days_to_expiry: Calendar days until expiry (> 0).
        rate: Continuously compounded risk-free rate.
        option_type: "put" or "call".

    Returns:
        Nonnegative premium, never below discounted intrinsic value.
    """
    if option_type not in ("put", "call"):
        raise PricingError(f"option_type must be put or call, got {option_type!r}")
    if spot <= 0 or strike <= 0:
        raise PricingError("spot and strike must be positive")
    if vol < 0:
        raise PricingError("volatility must be nonnegative")
    if days_to_expiry <= 0:
        raise PricingError("days_to_expiry must be positive")

    t = days_to_expiry / DAYS_PER_YEAR
    discounted_strike = strike * math.exp(-rate * t)
    if vol == 0.0:
        intrinsic = spot - discounted_strike
        return max(intrinsic, 0.0) if option_type == "call" else max(-intrinsic, 0.0)

    sqrt_t = math.sqrt(t)
    d1 = (math.log(spot / strike) + (rate + 0.5 * vol * vol) * t) / (vol * sqrt_t)
    d2 = d1 - vol * sqrt_t
    if option_type == "call":
        return spot * norm.cdf(d1) - discounted_strike * norm.cdf(d2)
    return discounted_strike * norm.cdf(-d2) - spot * norm.cdf(-d1)


def realized_volatility(closes, window: int = REALIZED_VOL_WINDOW) -> float:
    """Annualized close-to-close volatility over the trailing window.

    Needs at least two closes; returns 0.0 otherwise. Uses sample standard
    deviation of log returns times sqrt(252).
    """
    closes = list(closes)[-(window + 1):]
    if len(closes) < 2:
        return 0.0
    rets = np.diff(np.log(np.asarray(closes, dtype=float)))
    if len(rets) < 2:
        return 0.0
    return float(np.std(rets, ddof=1) * math.sqrt(TRADING_DAYS_PER_YEAR))


def round_strike(value: float) -> float:
    """Snap to the exchange-style grid: 0.50 ticks below 25, 1.00 above."""
    if value <= 0:
        raise PricingError("strike must be positive")
    step = 0.5 if value < 25.0 else 1.0
    snapped = math.floor(value / step + 0.5) * step
    return max(snapped, step)
