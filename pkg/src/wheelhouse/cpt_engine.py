"""Populate conditional probability tables from the historical trade store.

Selection is context-relevant and look-ahead safe: for a decision dated
as_of, only records dated as_of minus one day or earlier, inside a trailing
trading-day window, can contribute. Estimation is additive-smoothed
frequency counting; every population run reports the contributing record
ids so probabilities stay traceable to data.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

from . import bn_core
from .bn_core import Cpt, NetworkStructure, Variable
from .data_io import add_trading_days

logger = logging.getLogger(__name__)

TRADE_ACTIONS = ("sell_put", "roll_put", "assign", "sell_call", "expire_worthless", "close")
TRADE_OUTCOMES = ("Profit", "Breakeven", "Loss")

# Annualized realized-volatility cutoffs for the Low/Medium/High buckets.
# No authoritative values exist; these are overridable defaults.
VOL_LOW_MAX = 0.20
VOL_MEDIUM_MAX = 0.40


class EstimationError(ValueError):
    """Raised when a CPT cannot be estimated as requested."""


@dataclass(frozen=True)
class TradeRecord:
    """One lifecycle event of a wheel trade, with discretized decision factors."""

    trade_id: str
    date: date
    ticker: str
    action: str
    strike: float
    premium: float
    contracts: int
    outcome: str | None = None
    factors: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.action not in TRADE_ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.outcome is not None and self.outcome not in TRADE_OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.premium < 0:
            raise ValueError("premium must be nonnegative")
        if self.contracts < 1:
            raise ValueError("contracts must be at least 1")

    def to_payload(self) -> dict:
        payload = {
            "date": self.date.isoformat(),
            "ticker": self.ticker,
            "action": self.action,
            "strike": self.strike,
            "premium": self.premium,
            "contracts": self.contracts,
            "outcome": self.outcome,
            "factors": dict(sorted(self.factors.items())),
        }
        if self.trade_id:
            payload["id"] = self.trade_id
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "TradeRecord":
        return cls(
            trade_id=payload.get("id", ""),
            date=date.fromisoformat(payload["date"]),
            ticker=payload["ticker"],
            action=payload["action"],
            strike=float(payload["strike"]),
            premium=float(payload["premium"]),
            contracts=int(payload["contracts"]),
            outcome=payload.get("outcome"),
            factors=dict(payload.get("factors", {})),
        )


# ---------------------------------------------------------------------------
# Factor schema: the full 27-factor vocabulary. The eight core variables are
# required on every stored record; the rest are documented slots that default
# implementations fill where derivable.

CORE_FACTORS = tuple(bn_core.DEFAULT_VOCABULARY)

_EXTENDED_FACTORS = (
    ("OTM_Percentage", ("Low", "Medium", "High")),
    ("Position_Size", ("Small", "Medium", "Large")),
    ("Risk_Level", ("Low", "Medium", "High")),
    ("VIX_Level", ("Low", "Medium", "High")),
    ("Trend_Direction", ("Up", "Sideways", "Down")),
    ("Volume_Profile", ("Low", "Normal", "High")),
    ("FOMO_Level", ("Low", "Medium", "High")),
    ("Confidence_Level", ("Low", "Medium", "High")),
    ("Stress_Level", ("Low", "Medium", "High")),
    ("Tilt_Risk", ("Low", "Medium", "High")),
    ("Days_To_Expiry", ("Short", "Medium", "Long")),
    ("Premium_Yield", ("Low", "Medium", "High")),
    ("Delta_Exposure", ("Low", "Medium", "High")),
    ("Implied_Volatility", ("Low", "Medium", "High")),
    ("Historical_Volatility", ("Low", "Medium", "High")),
    ("Earnings_Proximity", ("Far", "Near", "Imminent")),
    ("Sector_Momentum", ("Weak", "Neutral", "Strong")),
    ("Liquidity", ("Thin", "Normal", "Deep")),
    ("Drawdown_State", ("None", "Moderate", "Severe")),
)


@dataclass(frozen=True)
class FactorSchema:
    variables: dict  # name -> Variable
    required: tuple[str, ...]

    def variable(self, name: str) -> Variable | None:
        return self.variables.get(name)

    def validate_record(self, record: TradeRecord) -> list[str]:
        """Return violation messages; empty means the record conforms."""
        problems = []
        for name in self.required:
            if name not in record.factors:
                problems.append(f"missing required factor {name!r}")
        for name, value in record.factors.items():
            var = self.variables.get(name)
            if var is None:
                problems.append(f"unknown factor {name!r}")
            elif value not in var.states:
                problems.append(f"factor {name!r} has illegal state {value!r}")
        if record.outcome is not None:
            if record.factors.get("Trade_Outcome") != record.outcome:
                problems.append("Trade_Outcome factor disagrees with outcome")
        return problems


def default_factor_schema() -> FactorSchema:
    variables = dict(bn_core.DEFAULT_VOCABULARY)
    for name, states in _EXTENDED_FACTORS:
        variables[name] = Variable(name, states)
    # Trade_Outcome exists only once a trade closes, so it is validated
    # through the outcome field rather than listed as always-required.
    required = tuple(n for n in CORE_FACTORS if n != "Trade_Outcome")
    return FactorSchema(variables=variables, required=required)


def write_factor_manifest(path, schema: FactorSchema) -> Path:
    path = Path(path)
    payload = {
        "schema": "factor_manifest",
        "version": 1,
        "factors": [
            {"name": v.name, "states": list(v.states), "required": v.name in schema.required}
            for v in schema.variables.values()
        ],
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def read_factor_manifest(path) -> FactorSchema:
    payload = json.loads(Path(path).read_text())
    if payload.get("schema") != "factor_manifest":
        raise ValueError(f"{path}: not a factor manifest")
    variables = {}
    required = []
    for entry in payload["factors"]:
        var = Variable(entry["name"], tuple(entry["states"]))
        variables[var.name] = var
        if entry.get("required"):
            required.append(var.name)
    return FactorSchema(variables=variables, required=tuple(required))


# ---------------------------------------------------------------------------
# Context discretization and relevance selection

def discretize_volatility(vol: float) -> str:
    if vol < VOL_LOW_MAX:
        return "Low"
    if vol < VOL_MEDIUM_MAX:
        return "Medium"
    return "High"


def context_factor_values(context) -> dict:
    """Discretized factor values derivable from a market context."""
    values = {
        "Market_Regime": context.market_regime,
        "Volatility_Level": discretize_volatility(context.volatility),
        "Trend_Direction": {"up": "Up", "down": "Down", "sideways": "Sideways"}[context.trend],
    }
    if context.vix < 15:
        values["VIX_Level"] = "Low"
    elif context.vix < 25:
        values["VIX_Level"] = "Medium"
    else:
        values["VIX_Level"] = "High"
    return values


@dataclass(frozen=True)
class SelectionPolicy:
    window_days: int = 252  # trading days
    match_keys: tuple[str, ...] = ("Market_Regime", "Volatility_Level")
    min_sample: int = 30

    def __post_init__(self):
        if self.window_days < 1:
            raise ValueError("window_days must be at least 1")


@dataclass(frozen=True)
class SmoothingPolicy:
    pseudo_count: float = 1.0

    def __post_init__(self):
        if self.pseudo_count < 0:
            raise ValueError("pseudo_count must be nonnegative")


def select_relevant_trades(records, context, as_of: date,
                           policy: SelectionPolicy = SelectionPolicy(),
                           holidays: frozenset = frozenset()) -> list[TradeRecord]:
    """Context-relevant records dated strictly before as_of, newest first.

    Records matching every match key rank first (all of them are returned).
    When they number fewer than min_sample, the shortfall is filled from the
    window by relaxing one match key at a time, dropping the last key first,
    most recent records first. The final relaxation level matches anything
    in the window.
    """
    window_start = add_trading_days(as_of, -policy.window_days, holidays)
    cutoff = as_of - timedelta(days=1)
    eligible = [r for r in records if window_start <= r.date <= cutoff]
    eligible.sort(key=lambda r: (-r.date.toordinal(), r.trade_id, r.ticker, r.action, r.strike))

    target = context_factor_values(context)
    for key in policy.match_keys:
        if key not in target:
            raise ValueError(f"match key {key!r} is not derivable from the context")

    def matches(record: TradeRecord, keys: tuple[str, ...]) -> bool:
        return all(record.factors.get(k) == target[k] for k in keys)

    selected = [r for r in eligible if matches(r, policy.match_keys)]
    chosen = {id(r) for r in selected}
    for level in range(len(policy.match_keys) - 1, -1, -1):
        if len(selected) >= policy.min_sample:
            break
        keys = policy.match_keys[:level]
        for r in eligible:
            if len(selected) >= policy.min_sample:
                break
            if id(r) not in chosen and matches(r, keys):
                selected.append(r)
                chosen.add(id(r))
    return selected


# ---------------------------------------------------------------------------
# Estimation

def estimate_cpt(records, child: Variable, parents=(),
                 smoothing: SmoothingPolicy = SmoothingPolicy()) -> tuple[Cpt, int]:
    """Additive-smoothed conditional frequencies.

    cell = (count + pseudo) / (row_total + pseudo * n_child_states).
    Records lacking the child or any parent factor are skipped; the skipped
    count is returned alongside the table. Rows with no data and zero
    smoothing fall back to uniform so every row stays a distribution.
    """
    parents = tuple(parents)
    if len(child.states) < 2:
        raise EstimationError(f"child {child.name!r} needs at least 2 states")
    parent_names = tuple(p.name for p in parents)
    parent_states = tuple(p.states for p in parents)
    counts = {
        combo: [0] * len(child.states)
        for combo in itertools.product(*parent_states)
    }
    skipped = 0
    for record in records:
        f = record.factors
        if child.name not in f or any(name not in f for name in parent_names):
            skipped += 1
            continue
        combo = tuple(f[name] for name in parent_names)
        if combo not in counts or f[child.name] not in child.states:
            skipped += 1
            continue
        counts[combo][child.states.index(f[child.name])] += 1

    pc = smoothing.pseudo_count
    k = len(child.states)
    rows = {}
    for combo, row_counts in counts.items():
        total = sum(row_counts)
        denom = total + pc * k
        if denom == 0:
            rows[combo] = tuple(1.0 / k for _ in range(k))
        else:
            rows[combo] = tuple((c + pc) / denom for c in row_counts)
    cpt = Cpt(child.name, parent_names, child.states, parent_states, rows)
    return cpt, skipped


@dataclass
class PopulationResult:
    """A populated network plus the audit trail of how it was built."""

    network: bn_core.BayesianNetwork
    as_of: date
    provenance: list[str]      # contributing trade ids, sorted
    diagnostics: list[str]
    records_used: int

    @property
    def network_ref(self) -> str:
        from .data_io import content_hash
        return content_hash({
            "as_of": self.as_of.isoformat(),
            "provenance": self.provenance,
            "nodes": list(self.network.structure.nodes),
            "edges": [list(e) for e in self.network.structure.edges],
        })


def populate_network(structure: NetworkStructure, records, context, as_of: date,
                     selection: SelectionPolicy = SelectionPolicy(),
                     smoothing: SmoothingPolicy = SmoothingPolicy(),
                     schema: FactorSchema | None = None,
                     holidays: frozenset = frozenset()) -> PopulationResult:
    """Estimate one CPT per structure node from context-relevant records.

    Root nodes get marginal tables estimated the same way. Structure nodes
    absent from the factor schema fall back to a generic Low/Medium/High
    domain with uniform probabilities and are reported in the diagnostics.
    """
    report = bn_core.validate_structure(structure)
    if not report.valid:
        raise bn_core.StructureError(f"cannot populate invalid structure: {report.summary()}")
    schema = schema or default_factor_schema()
    selected = select_relevant_trades(records, context, as_of, selection, holidays)

    diagnostics: list[str] = []
    variables: dict[str, Variable] = {}
    for node in structure.nodes:
        var = schema.variable(node)
        if var is None:
            var = Variable(node, ("Low", "Medium", "High"))
            diagnostics.append(f"node {node!r} not in factor schema; defaulted to Low/Medium/High uniform")
        variables[node] = var

    cpts: dict[str, Cpt] = {}
    for node in structure.nodes:
        parent_names = bn_core.canonical_parents(structure, node)
        parent_vars = tuple(variables[p] for p in parent_names)
        if schema.variable(node) is None:
            cpts[node] = bn_core.uniform_cpt(variables[node], parent_vars)
            continue
        cpt, skipped = estimate_cpt(selected, variables[node], parent_vars, smoothing)
        if skipped:
            diagnostics.append(f"node {node!r}: skipped {skipped} records lacking factors")
        cpts[node] = cpt

    network = bn_core.BayesianNetwork(variables, structure, cpts)
    provenance = sorted({r.trade_id for r in selected if r.trade_id})
    for r in selected:
        if r.date >= as_of:
            raise EstimationError(
                f"look-ahead violation: record {r.trade_id or '(unnamed)'} dated {r.date} used at {as_of}"
            )
    return PopulationResult(network, as_of, provenance, diagnostics, len(selected))
