"""Event-driven backtester for the rolling options wheel strategy.

Daily loop: settle or roll open short puts, manage covered calls on
assigned stock, then let the decision engine open new cash-secured puts
for flat tickers. Premiums come from the lognormal pricer fed with
trailing realized volatility (the central fidelity gap versus real option
quotes, since none are available). Probability inputs are restricted to
bars and trade records dated before the decision date; execution prices
use the decision date's close. A per-run audit proves both constraints.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from datetime import date

from . import cpt_engine, data_io, inference, pricing, structure_gen
from .cpt_engine import (SelectionPolicy, SmoothingPolicy, TradeRecord,
                         discretize_volatility)
from .data_io import BarSeries, next_friday_at_least
from .inference import DecisionConfig, TradeDecision
from .structure_gen import (GenerationConfig, MarketContext, MockLlmClient,
                            PsychologicalState, generate_with_fallback)

logger = logging.getLogger(__name__)

EXPIRY_CYCLE_DAYS = {"weekly": 7, "monthly": 28}
SHARES_PER_CONTRACT = 100
ACCOUNTING_TOL = 0.01


class DataGapError(ValueError):
    """A bar is missing for a ticker with an open position."""


class BacktestError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    commission_per_contract: float = 0.65
    exchange_fee_per_contract: float = 0.10
    min_commission: float = 1.00
    slippage_put: float = 0.0015
    slippage_call: float = 0.0012

    def __post_init__(self):
        for name in ("commission_per_contract", "exchange_fee_per_contract",
                     "min_commission", "slippage_put", "slippage_call"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def zero(cls) -> "CostModel":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def commission(self, contracts: int) -> float:
        fee = contracts * (self.commission_per_contract + self.exchange_fee_per_contract)
        return max(fee, self.min_commission)

    def slippage(self, gross_premium: float, option_type: str) -> float:
        rate = self.slippage_put if option_type == "put" else self.slippage_call
        return gross_premium * rate


@dataclass(frozen=True)
class OptionPosition:
    ticker: str
    kind: str  # put | call; always short
    strike: float
    expiry: date
    contracts: int
    open_premium: float  # per share
    open_date: date
    roll_blocked: bool = False
    # Decision context at entry; replayed on lifecycle events so closures
    # carry the indicators that produced them.
    factors: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.kind not in ("put", "call"):
            raise ValueError(f"kind must be put or call, got {self.kind!r}")
        if self.expiry <= self.open_date:
            raise ValueError("expiry must be after the open date")
        if self.contracts < 1:
            raise ValueError("contracts must be at least 1")

    @property
    def collateral(self) -> float:
        return self.strike * SHARES_PER_CONTRACT * self.contracts if self.kind == "put" else 0.0


@dataclass
class StockPosition:
    ticker: str
    shares: int
    cost_basis: float  # per share


@dataclass
class PortfolioState:
    cash: float
    options: list = field(default_factory=list)
    stock: dict = field(default_factory=dict)  # ticker -> StockPosition
    equity_curve: list = field(default_factory=list)  # (date, value)
    trade_log: list = field(default_factory=list)  # TradeRecord
    # Ledger tallies maintained independently of cash mutations; the
    # accounting audit cross-checks the two.
    premium_received: float = 0.0
    premium_paid: float = 0.0
    costs_paid: float = 0.0
    realized_stock_pnl: float = 0.0

    def collateral_required(self) -> float:
        return sum(p.collateral for p in self.options)

    def put_for(self, ticker: str):
        for p in self.options:
            if p.ticker == ticker and p.kind == "put":
                return p
        return None

    def call_for(self, ticker: str):
        for p in self.options:
            if p.ticker == ticker and p.kind == "call":
                return p
        return None


@dataclass(frozen=True)
class BacktestConfig:
    tickers: tuple
    start: date
    end: date
    initial_capital: float = 100_000.0
    put_otm_pct: float = 0.10
    roll_trigger_pct: float = 0.05
    position_size_limit: float = 0.10
    adv_cap: float = 0.05
    expiry_cycle: str = "weekly"
    retrain_months: int = 6
    risk_free_rate: float = 0.02
    seed: int = 0
    rolling_enabled: bool = True
    premium_threshold: float = 0.0  # min per-cycle premium / collateral to open
    min_pricing_vol: float = 0.0
    risk_aversion: float = 1.0
    candidate_otm: tuple = ()        # defaults to (put_otm_pct,)
    candidate_fractions: tuple = ()  # defaults to (position_size_limit,)
    costs: CostModel = CostModel()
    train_end: date | None = None     # walk-forward split boundaries, audited
    validate_end: date | None = None
    llm_temperature: float = 0.1

    def __post_init__(self):
        if not self.tickers:
            raise ValueError("need at least one ticker")
        for name in ("put_otm_pct", "roll_trigger_pct", "position_size_limit", "adv_cap"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must be in (0, 1]")
        if self.expiry_cycle not in EXPIRY_CYCLE_DAYS:
            raise ValueError(f"expiry_cycle must be one of {sorted(EXPIRY_CYCLE_DAYS)}")
        if self.end < self.start:
            raise ValueError("end before start")

    def candidates(self) -> list:
        otms = self.candidate_otm or (self.put_otm_pct,)
        fracs = self.candidate_fractions or (self.position_size_limit,)
        return [(o, f) for o in otms for f in fracs]

    def to_payload(self) -> dict:
        payload = {
            "tickers": list(self.tickers),
            "start": self.start.isoformat(),
            "end": self.end.isoformat(),
            "initial_capital": self.initial_capital,
            "put_otm_pct": self.put_otm_pct,
            "roll_trigger_pct": self.roll_trigger_pct,
            "position_size_limit": self.position_size_limit,
            "adv_cap": self.adv_cap,
            "expiry_cycle": self.expiry_cycle,
            "retrain_months": self.retrain_months,
            "risk_free_rate": self.risk_free_rate,
            "seed": self.seed,
            "rolling_enabled": self.rolling_enabled,
            "premium_threshold": self.premium_threshold,
            "min_pricing_vol": self.min_pricing_vol,
            "risk_aversion": self.risk_aversion,
            "candidate_otm": list(self.candidate_otm),
            "candidate_fractions": list(self.candidate_fractions),
            "costs": {
                "commission_per_contract": self.costs.commission_per_contract,
                "exchange_fee_per_contract": self.costs.exchange_fee_per_contract,
                "min_commission": self.costs.min_commission,
                "slippage_put": self.costs.slippage_put,
                "slippage_call": self.costs.slippage_call,
            },
            "train_end": self.train_end.isoformat() if self.train_end else None,
            "validate_end": self.validate_end.isoformat() if self.validate_end else None,
            "llm_temperature": self.llm_temperature,
        }
        return payload


@dataclass
class LookAheadAudit:
    """Machine-checkable record of temporal discipline for one run."""

    checks: int = 0
    violations: list = field(default_factory=list)
    retrain_dates: list = field(default_factory=list)
    accounting_max_error: float = 0.0

    def record_decision(self, decision_date, latest_record_date, prob_basis_date):
        self.checks += 1
        if latest_record_date is not None and latest_record_date >= decision_date:
            self.violations.append(
                f"{decision_date}: trade record dated {latest_record_date} used for probabilities"
            )
        if prob_basis_date is not None and prob_basis_date >= decision_date:
            self.violations.append(
                f"{decision_date}: bar dated {prob_basis_date} used for probabilities"
            )

    def record_accounting(self, day, error: float):
        self.accounting_max_error = max(self.accounting_max_error, abs(error))
        if abs(error) > ACCOUNTING_TOL:
            self.violations.append(f"{day}: accounting identity off by {error:.6f}")

    def record_collateral(self, day, collateral: float, cash: float):
        if collateral > cash + ACCOUNTING_TOL:
            self.violations.append(
                f"{day}: collateral {collateral:.2f} exceeds cash {cash:.2f}"
            )

    def to_payload(self) -> dict:
        return {
            "checks": self.checks,
            "violations": list(self.violations),
            "retrain_dates": [d.isoformat() for d in self.retrain_dates],
            "accounting_max_error": self.accounting_max_error,
        }


@dataclass
class BacktestResult:
    config: BacktestConfig
    final_equity: float
    final_cash: float
    counts: dict
    premium_received: float
    premium_paid: float
    costs_paid: float
    equity_curve: list
    trade_log: list
    yearly: list
    audit: LookAheadAudit
    diagnostics: list

    def trade_log_jsonl(self) -> str:
        lines = [json.dumps(r.to_payload(), sort_keys=True) for r in self.trade_log]
        return "\n".join(lines) + ("\n" if lines else "")

    def summary_payload(self) -> dict:
        """Headline numbers under the conventional report labels."""
        puts_sold = self.counts.get("sell_put", 0)
        rolled = self.counts.get("roll_put", 0)
        expired = self.counts.get("expire_worthless_put", 0)
        assigned = self.counts.get("assign", 0)
        years = max(len(self.yearly), 1)
        n_trades = len(self.trade_log)

        def pct_of_sold(n):
            return n / puts_sold if puts_sold else 0.0

        annual = None
        if self.equity_curve:
            growth = self.final_equity / self.config.initial_capital
            n_days = len(self.equity_curve)
            annual = growth ** (252.0 / n_days) - 1.0 if n_days else None
        return {
            "Average Annual Return": annual,
            "Final Portfolio Value": round(self.final_equity, 2),
            "Total Premium Collected": round(self.premium_received, 2),
            "Number of Trades": n_trades,
            "Trades per Year": round(n_trades / years, 1),
            "Average Premium/Trade": round(self.premium_received / n_trades, 2) if n_trades else 0.0,
            "Put Trades Sold": puts_sold,
            "Puts Expired Worthless": {"count": expired, "ratio_of_puts_sold": pct_of_sold(expired)},
            "Puts Rolled": {"count": rolled, "ratio_of_puts_sold": pct_of_sold(rolled)},
            "Puts Assigned": {"count": assigned, "ratio_of_puts_sold": pct_of_sold(assigned)},
            # Two labeled conventions, since the headline figure is ambiguous.
            "Average Premium Rate": {
                "per_cycle_premium_over_strike": self._mean_cycle_premium_rate(),
                "annualized_premium_over_collateral": self._annualized_premium_rate(),
            },
            "Winning Years": f"{sum(1 for y in self.yearly if y['return'] > 0)}/{len(self.yearly)}",
            "Look-Ahead Violations": len(self.audit.violations),
        }

    def _mean_cycle_premium_rate(self) -> float:
        rates = [
            r.premium / r.strike
            for r in self.trade_log
            if r.action in ("sell_put", "roll_put") and r.strike > 0
        ]
        return sum(rates) / len(rates) if rates else 0.0

    def _annualized_premium_rate(self) -> float:
        cycle = EXPIRY_CYCLE_DAYS[self.config.expiry_cycle]
        return self._mean_cycle_premium_rate() * (365.0 / cycle)

    def to_json(self) -> str:
        payload = dict(self.summary_payload())
        payload["Yearly"] = self.yearly
        payload["Audit"] = self.audit.to_payload()
        payload["Diagnostics"] = list(self.diagnostics)
        return json.dumps(payload, indent=2, default=str)


# ---------------------------------------------------------------------------
# Cost-aware position arithmetic

def open_put(state: PortfolioState, ticker: str, spot: float, vol: float,
             day: date, expiry: date, strike_otm_pct: float,
             position_fraction: float, equity: float, adv_shares: float,
             config: BacktestConfig, factors: dict | None = None,
             max_contracts: int | None = None) -> tuple:
    """Sell a cash-secured put; returns (position, record, leftover_contracts).

    Sizing: floor(min(fraction * equity, adv-capped notional) / collateral
    per contract), bounded by free cash (cash-secured). The per-day share
    cap is adv_cap * average daily volume; any remainder above it is
    returned as leftover for execution on later days. Returns
    (None, None, 0) when nothing is affordable or the premium rate misses
    the threshold.
    """
    strike = pricing.round_strike(spot * (1.0 - strike_otm_pct))
    premium = pricing.price_option_premium(
        spot, strike, max(vol, config.min_pricing_vol),
        (expiry - day).days, config.risk_free_rate, "put")
    if config.premium_threshold > 0 and premium / strike < config.premium_threshold:
        return None, None, 0

    per_contract = strike * SHARES_PER_CONTRACT
    target = int(position_fraction * equity // per_contract)
    if max_contracts is not None:
        target = min(target, max_contracts)
    free_cash = state.cash - state.collateral_required()
    target = min(target, int(free_cash // per_contract))
    contracts = target
    if adv_shares > 0:
        # Daily execution cap, in both the notional and share conventions.
        day_cap = min(int(adv_shares * config.adv_cap * spot // per_contract),
                      int(adv_shares * config.adv_cap // SHARES_PER_CONTRACT))
        contracts = min(contracts, day_cap)
    if contracts < 1:
        return None, None, 0
    leftover = target - contracts

    gross = premium * SHARES_PER_CONTRACT * contracts
    slip = config.costs.slippage(gross, "put")
    comm = config.costs.commission(contracts)
    state.cash += gross - slip - comm
    state.premium_received += gross
    state.costs_paid += slip + comm
    position = OptionPosition(ticker, "put", strike, expiry, contracts, premium,
                              day, factors=dict(factors or {}))
    state.options.append(position)
    record = _log(state, day, ticker, "sell_put", strike, premium, contracts,
                  None, factors or {})
    return position, record, leftover


def roll_put(state: PortfolioState, position: OptionPosition, spot: float,
             vol: float, day: date, config: BacktestConfig,
             factors: dict | None = None) -> list:
    """Buy back a threatened put and re-strike below the current spot.

    Two trade events: a close of the old position and a roll_put open of
    the new one. If cash cannot cover the buyback, the position is marked
    hold-to-expiry instead and no events are logged.
    """
    close_premium = pricing.price_option_premium(
        spot, position.strike, max(vol, config.min_pricing_vol),
        max((position.expiry - day).days, 1), config.risk_free_rate, "put")
    gross_close = close_premium * SHARES_PER_CONTRACT * position.contracts
    slip_close = config.costs.slippage(gross_close, "put")
    comm_close = config.costs.commission(position.contracts)
    if gross_close + slip_close + comm_close > state.cash:
        logger.warning("%s %s: cannot afford roll buyback; holding to expiry",
                       day, position.ticker)
        state.options.remove(position)
        state.options.append(replace(position, roll_blocked=True))
        return []

    state.cash -= gross_close + slip_close + comm_close
    state.premium_paid += gross_close
    state.costs_paid += slip_close + comm_close
    state.options.remove(position)
    events = [_log(state, day, position.ticker, "close", position.strike,
                   close_premium, position.contracts,
                   _outcome_label(position.open_premium - close_premium),
                   factors or {})]

    new_strike = pricing.round_strike(spot * (1.0 - config.put_otm_pct))
    new_expiry = next_friday_at_least(day, EXPIRY_CYCLE_DAYS[config.expiry_cycle])
    new_premium = pricing.price_option_premium(
        spot, new_strike, max(vol, config.min_pricing_vol),
        (new_expiry - day).days, config.risk_free_rate, "put")
    gross_open = new_premium * SHARES_PER_CONTRACT * position.contracts
    slip_open = config.costs.slippage(gross_open, "put")
    comm_open = config.costs.commission(position.contracts)
    state.cash += gross_open - slip_open - comm_open
    state.premium_received += gross_open
    state.costs_paid += slip_open + comm_open
    state.options.append(OptionPosition(position.ticker, "put", new_strike,
                                        new_expiry, position.contracts,
                                        new_premium, day,
                                        factors=dict(factors or {})))
    events.append(_log(state, day, position.ticker, "roll_put", new_strike,
                       new_premium, position.contracts, None, factors or {}))
    return events


def _outcome_label(delta: float) -> str:
    if delta > 0:
        return "Profit"
    if delta < 0:
        return "Loss"
    return "Breakeven"


def _log(state: PortfolioState, day: date, ticker: str, action: str,
         strike: float, premium: float, contracts: int, outcome, factors: dict):
    if outcome is not None:
        factors = {**factors, "Trade_Outcome": outcome}
    record = TradeRecord(trade_id="", date=day, ticker=ticker, action=action,
                         strike=strike, premium=premium, contracts=contracts,
                         outcome=outcome, factors=factors)
    record = replace(record, trade_id=data_io.content_hash(record.to_payload()))
    state.trade_log.append(record)
    return record


# ---------------------------------------------------------------------------
# Market feature extraction (probability inputs: bars before the decision day)

def classify_regime(closes) -> str:
    """Trailing 126-bar return: above +10% Bull, below -10% Bear, else Neutral."""
    if len(closes) < 2:
        return "Neutral"
    window = closes[-126:]
    change = window[-1] / window[0] - 1.0
    if change > 0.10:
        return "Bull"
    if change < -0.10:
        return "Bear"
    return "Neutral"


def classify_trend(closes) -> str:
    if len(closes) < 2:
        return "sideways"
    window = closes[-20:]
    change = window[-1] / window[0] - 1.0
    if change > 0.02:
        return "up"
    if change < -0.02:
        return "down"
    return "sideways"


def classify_technical(closes) -> str:
    if len(closes) < 5:
        return "Neutral"
    window = closes[-20:]
    mean = sum(window) / len(window)
    if window[-1] > mean * 1.02:
        return "Overbought"
    if window[-1] < mean * 0.98:
        return "Oversold"
    return "Neutral"


def build_context(ticker: str, day: date, history: BarSeries,
                  psych: PsychologicalState) -> tuple:
    """(MarketContext, basis_date) from bars strictly before day.

    basis_date is the newest bar date consumed, for the look-ahead audit.
    """
    prior = [b for b in history.bars if b.date < day]
    if not prior:
        raise DataGapError(f"{ticker}: no history before {day}")
    closes = [b.close for b in prior]
    vol = pricing.realized_volatility(closes)
    volumes = [b.volume for b in prior[-21:]]
    context = MarketContext(
        ticker=ticker,
        current_price=closes[-1],
        volatility=vol,
        trend=classify_trend(closes),
        vix=vol * 100.0,
        market_regime=classify_regime(closes),
        avg_daily_volume=sum(volumes) / len(volumes),
        date=day,
    )
    return context, prior[-1].date


def decision_factors(context: MarketContext, psych: PsychologicalState,
                     decision: TradeDecision, premium: float, strike: float,
                     days_to_expiry: int) -> dict:
    """The full factor snapshot recorded with each trade event."""

    def level(x, lo, hi):
        return "Low" if x < lo else ("Medium" if x < hi else "High")

    otm = decision.strike_otm_pct
    rate = premium / strike if strike else 0.0
    factors = {
        "Market_Regime": context.market_regime,
        "Volatility_Level": discretize_volatility(context.volatility),
        "Stock_Fundamentals": "Moderate",  # not derivable from bars
        "Technical_Position": "Neutral",
        "Strike_Selection": inference.strike_state(otm),
        "Premium_Rate": level(rate, 0.005, 0.02),
        "Assignment_Probability": decision.assignment_risk.argmax(),
        "OTM_Percentage": level(otm, 0.05, 0.10),
        "Position_Size": {"Low": "Small", "Medium": "Medium", "High": "Large"}[
            level(decision.position_fraction, 0.05, 0.15)],
        "Risk_Level": level(1.0 - decision.score, 0.5, 1.0),
        "VIX_Level": level(context.vix, 15.0, 25.0),
        "Trend_Direction": {"up": "Up", "down": "Down", "sideways": "Sideways"}[context.trend],
        "Volume_Profile": "Normal",
        "FOMO_Level": level(psych.fomo_level, 1 / 3, 2 / 3),
        "Confidence_Level": level(psych.confidence_level, 1 / 3, 2 / 3),
        "Stress_Level": level(psych.stress_level, 1 / 3, 2 / 3),
        "Tilt_Risk": level(psych.tilt_risk, 1 / 3, 2 / 3),
        "Days_To_Expiry": "Short" if days_to_expiry <= 10 else (
            "Medium" if days_to_expiry <= 35 else "Long"),
        "Premium_Yield": level(rate, 0.005, 0.02),
        "Delta_Exposure": level(otm, 0.05, 0.10),
        "Implied_Volatility": discretize_volatility(context.volatility),
        "Historical_Volatility": discretize_volatility(context.volatility),
        "Earnings_Proximity": "Far",
        "Sector_Momentum": {"Bull": "Strong", "Neutral": "Neutral", "Bear": "Weak"}[
            context.market_regime],
        "Liquidity": "Normal",
        "Drawdown_State": "None",
    }
    return factors


# ---------------------------------------------------------------------------
# Decision engine bundle

class DecisionEngine:
    """Wires structure generation, CPT population, and inference together.

    One structure is generated per retrain; CPTs are repopulated from the
    trade store at every decision with as_of set to the decision date.
    """

    def __init__(self, client: structure_gen.LlmClient | None = None,
                 gen_config: GenerationConfig = GenerationConfig(),
                 selection: SelectionPolicy = SelectionPolicy(),
                 smoothing: SmoothingPolicy = SmoothingPolicy(),
                 psych: PsychologicalState = PsychologicalState(),
                 seed: int = 0):
        self.client = client if client is not None else MockLlmClient(seed=seed)
        self.gen_config = gen_config
        self.selection = selection
        self.smoothing = smoothing
        self.psych = psych
        self.structure = None
        self.structure_provenance = None
        self.feedback: list = []

    def retrain(self, context: MarketContext) -> None:
        self.structure, self.structure_provenance = generate_with_fallback(
            context, self.psych, self.feedback, self.client, self.gen_config)
        logger.info("retrained structure (%s) with %d edges",
                    self.structure_provenance, len(self.structure.edges))

    def add_feedback(self, record) -> None:
        self.feedback.append(record)

    def decide(self, records, context: MarketContext, as_of: date,
               candidates, decision_config: DecisionConfig):
        """Returns (decision, population) for the audit trail."""
        if self.structure is None:
            self.retrain(context)
        population = cpt_engine.populate_network(
            self.structure, records, context, as_of,
            selection=self.selection, smoothing=self.smoothing)
        network = population.network
        evidence = {}
        for name, value in cpt_engine.context_factor_values(context).items():
            if name in network.variables and value in network.variables[name].states:
                evidence[name] = value
        evidence.pop("Strike_Selection", None)
        decision = inference.decide_trade(network, evidence, candidates,
                                          decision_config,
                                          network_ref=population.network_ref)
        return decision, population, evidence


# ---------------------------------------------------------------------------
# The day loop

class WheelBacktester:
    def __init__(self, config: BacktestConfig, bars: dict,
                 engine: DecisionEngine | None = None, initial_records=()):
        self.config = config
        self.bars = bars
        self.engine = engine if engine is not None else DecisionEngine(seed=config.seed)
        self.records = list(initial_records)
        self.state = PortfolioState(cash=config.initial_capital)
        self.audit = LookAheadAudit()
        self.diagnostics: list = []
        self.counts: dict = {}
        self.pending_fills: dict = {}  # ticker -> dict with contracts/otm/fraction
        self._next_retrain: date | None = None
        self._synced = 0  # trade_log entries already mirrored into the store
        missing = [t for t in config.tickers if t not in bars]
        if missing:
            raise BacktestError(f"no bar data for {missing}")

    # -- helpers ----------------------------------------------------------

    def _count(self, key: str):
        self.counts[key] = self.counts.get(key, 0) + 1

    def _vol(self, ticker: str, day: date) -> float:
        closes = self.bars[ticker].closes_through(day)
        return max(pricing.realized_volatility(closes), self.config.min_pricing_vol)

    def _mark_equity(self, day: date, bars_today: dict) -> float:
        value = self.state.cash
        last_close = {}
        for ticker in set([p.ticker for p in self.state.options]) | set(self.state.stock):
            bar = bars_today.get(ticker)
            if bar is None:
                raise DataGapError(f"missing bar for {ticker} on {day}")
            last_close[ticker] = bar.close
        for ticker, pos in self.state.stock.items():
            value += pos.shares * last_close[ticker]
        for p in self.state.options:
            days_left = max((p.expiry - day).days, 1)
            mark = pricing.price_option_premium(
                last_close[p.ticker], p.strike, self._vol(p.ticker, day),
                days_left, self.config.risk_free_rate, p.kind)
            value -= mark * SHARES_PER_CONTRACT * p.contracts
        return value

    def _unrealized_stock(self, bars_today: dict) -> float:
        total = 0.0
        for ticker, pos in self.state.stock.items():
            bar = bars_today.get(ticker)
            if bar is None:
                raise DataGapError(f"missing bar for {ticker}")
            total += pos.shares * (bar.close - pos.cost_basis)
        return total

    def _option_liability(self, day: date, bars_today: dict) -> float:
        total = 0.0
        for p in self.state.options:
            bar = bars_today.get(p.ticker)
            if bar is None:
                raise DataGapError(f"missing bar for {p.ticker} on {day}")
            days_left = max((p.expiry - day).days, 1)
            mark = pricing.price_option_premium(
                bar.close, p.strike, self._vol(p.ticker, day), days_left,
                self.config.risk_free_rate, p.kind)
            total += mark * SHARES_PER_CONTRACT * p.contracts
        return total

    def _check_accounting(self, day: date, bars_today: dict):
        s = self.state
        equity = self._mark_equity(day, bars_today)
        rhs = (self.config.initial_capital
               + s.premium_received - s.premium_paid
               - s.costs_paid
               + s.realized_stock_pnl
               + self._unrealized_stock(bars_today)
               - self._option_liability(day, bars_today))
        self.audit.record_accounting(day, equity - rhs)
        self.audit.record_collateral(day, s.collateral_required(), s.cash)
        return equity

    def _sell_call(self, ticker: str, strike: float, day: date, spot: float,
                   contracts: int, factors: dict):
        expiry = next_friday_at_least(day, EXPIRY_CYCLE_DAYS[self.config.expiry_cycle])
        premium = pricing.price_option_premium(
            spot, strike, self._vol(ticker, day), (expiry - day).days,
            self.config.risk_free_rate, "call")
        gross = premium * SHARES_PER_CONTRACT * contracts
        slip = self.config.costs.slippage(gross, "call")
        comm = self.config.costs.commission(contracts)
        self.state.cash += gross - slip - comm
        self.state.premium_received += gross
        self.state.costs_paid += slip + comm
        self.state.options.append(
            OptionPosition(ticker, "call", strike, expiry, contracts, premium,
                           day, factors=dict(factors)))
        _log(self.state, day, ticker, "sell_call", strike, premium, contracts,
             None, factors)
        self._count("sell_call")

    # -- position lifecycle ------------------------------------------------

    def _process_put(self, position: OptionPosition, day: date, bar, factors: dict):
        spot = bar.close
        config = self.config
        if day < position.expiry:
            trigger = spot <= position.strike * (1.0 + config.roll_trigger_pct)
            if trigger and config.rolling_enabled and not position.roll_blocked:
                events = roll_put(self.state, position, spot,
                                  self._vol(position.ticker, day), day, config, factors)
                if events:
                    self._count("roll_put")
                    self._feedback(events[0])
            return
        # At (or past) expiry.
        if spot > position.strike:
            self.state.options.remove(position)
            record = _log(self.state, day, position.ticker, "expire_worthless",
                          position.strike, position.open_premium,
                          position.contracts, "Profit", factors)
            self._count("expire_worthless_put")
            self._feedback(record)
            return
        # In the money at expiry.
        if config.rolling_enabled and not position.roll_blocked:
            events = roll_put(self.state, position, spot,
                              self._vol(position.ticker, day), day, config, factors)
            if events:
                self._count("roll_put")
                self._feedback(events[0])
                return
        # Assignment: buy shares at the strike, then write the covered call.
        self.state.options.remove(position)
        shares = position.contracts * SHARES_PER_CONTRACT
        self.state.cash -= position.strike * shares
        self.state.stock[position.ticker] = StockPosition(
            position.ticker, shares, position.strike)
        record = _log(self.state, day, position.ticker, "assign",
                      position.strike, position.open_premium,
                      position.contracts, "Loss" if spot < position.strike else "Breakeven",
                      factors)
        self._count("assign")
        self._feedback(record)
        self._sell_call(position.ticker, position.strike, day, spot,
                        position.contracts, factors)

    def _process_call(self, position: OptionPosition, day: date, bar, factors: dict):
        if day < position.expiry:
            return
        spot = bar.close
        stock = self.state.stock.get(position.ticker)
        if spot > position.strike:
            # Called away at the strike.
            self.state.options.remove(position)
            proceeds = position.strike * SHARES_PER_CONTRACT * position.contracts
            self.state.cash += proceeds
            if stock is not None:
                self.state.realized_stock_pnl += (
                    (position.strike - stock.cost_basis) * stock.shares)
                del self.state.stock[position.ticker]
            record = _log(self.state, day, position.ticker, "close",
                          position.strike, position.open_premium,
                          position.contracts, "Profit", factors)
            self._count("called_away")
            self._feedback(record)
            return
        # Expired worthless; keep writing calls at the assignment price.
        self.state.options.remove(position)
        record = _log(self.state, day, position.ticker, "expire_worthless",
                      position.strike, position.open_premium,
                      position.contracts, "Profit", factors)
        self._count("expire_worthless_call")
        self._feedback(record)
        if stock is not None:
            self._sell_call(position.ticker, position.strike, day, spot,
                            position.contracts, factors)

    def _feedback(self, record: TradeRecord):
        if record.outcome is None:
            return
        fb = structure_gen.record_feedback(
            decision=f"{record.action} {record.ticker} strike {record.strike:g}",
            outcome=record.outcome,
            indicators={k: record.factors[k]
                        for k in ("Market_Regime", "Volatility_Level")
                        if k in record.factors},
            trade_id=record.trade_id)
        self.engine.add_feedback(fb)

    # -- entries -----------------------------------------------------------

    def _maybe_retrain(self, day: date, context: MarketContext):
        """Full retrain at the first decision, then on a regular month grid."""
        if self._next_retrain is not None and day < self._next_retrain:
            return
        self.engine.retrain(context)
        self.audit.retrain_dates.append(day)
        boundary = self._next_retrain if self._next_retrain is not None else day
        while boundary <= day:
            boundary = _add_months(boundary, self.config.retrain_months)
        self._next_retrain = boundary

    def _try_entry(self, ticker: str, day: date, bar, equity: float):
        config = self.config
        history = self.bars[ticker]
        try:
            context, basis_date = build_context(ticker, day, history, self.engine.psych)
        except DataGapError:
            return
        self._maybe_retrain(day, context)
        decision_config = DecisionConfig(
            risk_aversion=config.risk_aversion,
            position_cap=max(max(f for _, f in config.candidates()),
                             config.position_size_limit))
        eligible = [r for r in self.records if r.date < day]
        latest_record = max((r.date for r in eligible), default=None)
        decision, population, evidence = self.engine.decide(
            eligible, context, day, config.candidates(), decision_config)
        self.audit.record_decision(day, latest_record, basis_date)
        if decision.action == "skip":
            self.diagnostics.append(f"{day} {ticker}: decision engine skipped entry")
            return

        expiry = next_friday_at_least(day, EXPIRY_CYCLE_DAYS[config.expiry_cycle])
        premium_preview = pricing.price_option_premium(
            bar.close, pricing.round_strike(bar.close * (1 - decision.strike_otm_pct)),
            max(self._vol(ticker, day), config.min_pricing_vol),
            (expiry - day).days, config.risk_free_rate, "put")
        factors = decision_factors(context, self.engine.psych, decision,
                                   premium_preview,
                                   pricing.round_strike(bar.close * (1 - decision.strike_otm_pct)),
                                   (expiry - day).days)
        adv = sum(b.volume for b in history.bars_through(day)[-21:]) / min(
            len(history.bars_through(day)), 21)
        position, record, leftover = open_put(
            self.state, ticker, bar.close, self._vol(ticker, day), day, expiry,
            decision.strike_otm_pct, decision.position_fraction, equity, adv,
            config, factors)
        if record is None:
            self.diagnostics.append(f"{day} {ticker}: no contracts affordable, skipped")
            return
        self._count("sell_put")
        if leftover > 0:
            self.pending_fills[ticker] = {
                "contracts": leftover,
                "otm": decision.strike_otm_pct,
                "fraction": decision.position_fraction,
                "factors": factors,
            }

    def _process_pending(self, ticker: str, day: date, bar, equity: float):
        config = self.config
        fill = self.pending_fills[ticker]
        history = self.bars[ticker]
        adv = sum(b.volume for b in history.bars_through(day)[-21:]) / min(
            len(history.bars_through(day)), 21)
        expiry = next_friday_at_least(day, EXPIRY_CYCLE_DAYS[config.expiry_cycle])
        position, record, leftover = open_put(
            self.state, ticker, bar.close, self._vol(ticker, day), day, expiry,
            fill["otm"], fill["fraction"], equity, adv, config,
            fill["factors"], max_contracts=fill["contracts"])
        if record is not None:
            self._count("sell_put")
        if record is None or leftover == 0:
            del self.pending_fills[ticker]
        else:
            fill["contracts"] = leftover

    # -- main loop ----------------------------------------------------------

    def run(self) -> BacktestResult:
        config = self.config
        calendar = sorted({
            b.date
            for t in config.tickers
            for b in self.bars[t].bars
            if config.start <= b.date <= config.end
        })
        for day in calendar:
            bars_today = {t: self.bars[t].get(day) for t in config.tickers}
            flat_at_open = [
                t for t in config.tickers
                if self.state.put_for(t) is None and self.state.call_for(t) is None
                and t not in self.state.stock and t not in self.pending_fills
            ]
            # 1. Settle, roll, or assign open positions.
            for position in sorted(self.state.options, key=lambda p: (p.ticker, p.kind)):
                if position not in self.state.options:
                    continue  # replaced by a roll this same day
                bar = bars_today.get(position.ticker)
                if bar is None:
                    raise DataGapError(
                        f"missing bar for {position.ticker} on {day} with open position")
                if position.kind == "put":
                    self._process_put(position, day, bar, position.factors)
                else:
                    self._process_call(position, day, bar, position.factors)
            # 2. Work down multi-day fills, then fresh entries.
            equity = self._mark_equity(day, bars_today)
            for ticker in sorted(self.pending_fills):
                bar = bars_today.get(ticker)
                if bar is not None:
                    self._process_pending(ticker, day, bar, equity)
            for ticker in sorted(flat_at_open):
                if ticker in self.pending_fills:
                    continue
                bar = bars_today.get(ticker)
                if bar is None:
                    continue
                if (self.state.put_for(ticker) is None
                        and ticker not in self.state.stock):
                    self._try_entry(ticker, day, bar, equity)
            # 3. Mark and audit, then mirror the day's events into the store
            # so tomorrow's probabilities can use them.
            equity = self._check_accounting(day, bars_today)
            self.state.equity_curve.append((day, equity))
            while self._synced < len(self.state.trade_log):
                self.records.append(self.state.trade_log[self._synced])
                self._synced += 1

        curve = self.state.equity_curve
        final_equity = curve[-1][1] if curve else config.initial_capital
        return BacktestResult(
            config=config,
            final_equity=final_equity,
            final_cash=self.state.cash,
            counts=dict(sorted(self.counts.items())),
            premium_received=self.state.premium_received,
            premium_paid=self.state.premium_paid,
            costs_paid=self.state.costs_paid,
            equity_curve=curve,
            trade_log=list(self.state.trade_log),
            yearly=self._yearly_summary(),
            audit=self.audit,
            diagnostics=self.diagnostics,
        )

    def _yearly_summary(self) -> list:
        years: dict = {}
        for day, value in self.state.equity_curve:
            years.setdefault(day.year, []).append(value)
        out = []
        prev_end = self.config.initial_capital
        for year in sorted(years):
            end = years[year][-1]
            trades = sum(1 for r in self.state.trade_log if r.date.year == year)
            rolls = sum(1 for r in self.state.trade_log
                        if r.date.year == year and r.action == "roll_put")
            out.append({
                "year": year,
                "return": end / prev_end - 1.0,
                "trades": trades,
                "rolls": rolls,
            })
            prev_end = end
        return out


def _add_months(d: date, months: int) -> date:
    month = d.month - 1 + months
    year = d.year + month // 12
    month = month % 12 + 1
    day = min(d.day, [31, 29 if year % 4 == 0 and (year % 100 != 0 or year % 400 == 0)
                      else 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31][month - 1])
    return date(year, month, day)


def run_backtest(config: BacktestConfig, bars: dict,
                 engine: DecisionEngine | None = None,
                 initial_records=()) -> BacktestResult:
    """One full deterministic backtest run.

    bars maps ticker to BarSeries; series should extend far enough before
    config.start to warm up volatility and regime classification.
    """
    return WheelBacktester(config, bars, engine, initial_records).run()
