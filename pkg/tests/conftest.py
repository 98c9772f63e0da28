"""Shared builders for networks, trade stores, and price paths."""
import itertools
import random
from datetime import date, timedelta

import pytest

from wheelhouse import bn_core, data_io
from wheelhouse.cpt_engine import TradeRecord


def make_random_network(rng: random.Random, n_nodes: int = 5, n_states: int = 3):
    """Random DAG with dirichlet-ish CPTs; deterministic per rng state."""
    names = [f"V{i}" for i in range(n_nodes)]
    order = names[:]
    rng.shuffle(order)
    edges = []
    for i in range(n_nodes):
        for j in range(i + 1, n_nodes):
            if rng.random() < 0.4:
                edges.append((order[i], order[j]))
    structure = bn_core.NetworkStructure(sorted(names), edges)
    variables = {
        name: bn_core.Variable(name, tuple(f"s{t}" for t in range(n_states)))
        for name in names
    }
    cpts = {}
    for name in names:
        parents = bn_core.canonical_parents(structure, name)
        parent_states = tuple(variables[p].states for p in parents)
        rows = {}
        for combo in itertools.product(*parent_states):
            weights = [rng.random() + 1e-3 for _ in range(n_states)]
            total = sum(weights)
            rows[combo] = tuple(w / total for w in weights)
        cpts[name] = bn_core.Cpt(name, parents, variables[name].states,
                                 parent_states, rows)
    return bn_core.BayesianNetwork(variables, structure, cpts)


def trading_days_from(start: date, count: int) -> list:
    days = []
    d = start
    while len(days) < count:
        if d.weekday() < 5:
            days.append(d)
        d += timedelta(days=1)
    return days


def make_trade(trade_id, day, factors, ticker="TQQQ", action="sell_put",
               strike=90.0, premium=1.0, contracts=1, outcome=None):
    return TradeRecord(trade_id=trade_id, date=day, ticker=ticker, action=action,
                       strike=strike, premium=premium, contracts=contracts,
                       outcome=outcome, factors=factors)


def engineered_store(cell_counts, start=date(2024, 1, 2)):
    """Trade records realizing exact conditional frequencies.

    cell_counts: mapping (regime, strike_selection) -> mapping
    assignment_state -> count. Records cycle over 230 trading days from
    start, so a 252-day window ending late in the same year keeps all of
    them.
    """
    records = []
    idx = 0
    days = trading_days_from(start, 230)
    for (regime, sel), states in sorted(cell_counts.items()):
        for state, count in sorted(states.items()):
            for _ in range(count):
                day = days[idx % len(days)]
                records.append(make_trade(
                    f"t{idx:06d}", day,
                    {"Market_Regime": regime, "Strike_Selection": sel,
                     "Assignment_Probability": state},
                ))
                idx += 1
    return records


@pytest.fixture
def flat_series():
    return data_io.flat_bars("FLAT", date(2022, 1, 3), 50, 100.0)


@pytest.fixture
def gbm_series():
    return data_io.gbm_bars("GBM", date(2019, 6, 3), 660, 40.0, 0.10, 0.45, seed=11)
