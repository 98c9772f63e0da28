"""Exact inference and explained trade decisions.

posterior() runs variable elimination with a min-degree ordering;
brute_force_posterior() enumerates the full joint as an independent check.
Decision selection scores candidate strikes by profit probability minus a
risk-aversion multiple of assignment probability, and every decision can be
explained through leave-one-out evidence deltas. All operations are pure
over immutable networks.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .bn_core import BayesianNetwork, joint_probability

BRUTE_FORCE_NODE_LIMIT = 12


class InferenceError(ValueError):
    """Bad query or evidence for this network."""


class InconsistentEvidenceError(InferenceError):
    """The supplied evidence has probability zero under the network."""


@dataclass(frozen=True)
class Posterior:
    variable: str
    states: tuple[str, ...]
    probs: tuple[float, ...]

    def __getitem__(self, state: str) -> float:
        try:
            return self.probs[self.states.index(state)]
        except ValueError:
            raise InferenceError(
                f"unknown state {state!r} for {self.variable!r}"
            ) from None

    def as_dict(self) -> dict:
        return dict(zip(self.states, self.probs))

    def argmax(self) -> str:
        return self.states[int(np.argmax(self.probs))]


@dataclass(frozen=True)
class _Factor:
    vars: tuple[str, ...]
    table: np.ndarray


def _check_evidence(network: BayesianNetwork, evidence: dict) -> None:
    for var, state in evidence.items():
        if var not in network.variables:
            raise InferenceError(f"evidence variable {var!r} not in network")
        if state not in network.variables[var].states:
            raise InferenceError(
                f"evidence state {state!r} is not legal for {var!r}")


def _cpt_factor(network: BayesianNetwork, node: str) -> _Factor:
    cpt = network.cpts[node]
    axes = cpt.parents + (node,)
    shape = tuple(len(network.variables[v].states) for v in axes)
    table = np.empty(shape)
    for combo, row in cpt.rows.items():
        idx = tuple(network.variables[p].index(s) for p, s in zip(cpt.parents, combo))
        table[idx] = row
    return _Factor(axes, table)


def _reduce(factor: _Factor, evidence_idx: dict) -> _Factor:
    """Slice out observed variables, dropping their axes."""
    selector = []
    kept = []
    for v in factor.vars:
        if v in evidence_idx:
            selector.append(evidence_idx[v])
        else:
            selector.append(slice(None))
            kept.append(v)
    return _Factor(tuple(kept), factor.table[tuple(selector)])


def _product(factors, cards: dict) -> _Factor:
    union: list[str] = []
    for f in factors:
        for v in f.vars:
            if v not in union:
                union.append(v)
    table = np.ones(tuple(cards[v] for v in union))
    for f in factors:
        order = sorted(range(len(f.vars)), key=lambda i: union.index(f.vars[i]))
        aligned = np.transpose(f.table, order)
        shape = tuple(cards[v] if v in f.vars else 1 for v in union)
        table = table * aligned.reshape(shape)
    return _Factor(tuple(union), table)


def _marginalize(factor: _Factor, var: str) -> _Factor:
    axis = factor.vars.index(var)
    return _Factor(
        factor.vars[:axis] + factor.vars[axis + 1:],
        factor.table.sum(axis=axis),
    )


def _min_degree_order(scopes, to_eliminate: set) -> list[str]:
    """Greedy min-degree elimination order, lexicographic tie-break."""
    neighbors: dict[str, set] = {}
    for scope in scopes:
        for v in scope:
            neighbors.setdefault(v, set())
            neighbors[v].update(set(scope) - {v})
    order = []
    remaining = set(to_eliminate)
    while remaining:
        best = min(remaining, key=lambda v: (len(neighbors.get(v, ())), v))
        order.append(best)
        remaining.discard(best)
        around = neighbors.pop(best, set())
        for a in around:
            neighbors[a].discard(best)
        for a, b in itertools.combinations(sorted(around), 2):
            neighbors[a].add(b)
            neighbors[b].add(a)
    return order


def posterior(network: BayesianNetwork, query: str, evidence: dict | None = None) -> Posterior:
    """Exact P(query | evidence) by variable elimination.

    Deterministic: elimination follows the min-degree heuristic with
    lexicographic tie-breaks. Evidence with zero joint probability raises
    InconsistentEvidenceError rather than returning NaNs.
    """
    evidence = dict(evidence or {})
    if query not in network.variables:
        raise InferenceError(f"query variable {query!r} not in network")
    if query in evidence:
        raise InferenceError(f"query {query!r} is already observed")
    _check_evidence(network, evidence)

    cards = {v: len(var.states) for v, var in network.variables.items()}
    evidence_idx = {v: network.variables[v].index(s) for v, s in evidence.items()}
    factors = [
        _reduce(_cpt_factor(network, node), evidence_idx)
        for node in network.structure.nodes
    ]
    to_eliminate = set(network.variables) - set(evidence) - {query}
    order = _min_degree_order([f.vars for f in factors if f.vars], to_eliminate)
    for var in order:
        involved = [f for f in factors if var in f.vars]
        if not involved:
            continue
        merged = _marginalize(_product(involved, cards), var)
        factors = [f for f in factors if var not in f.vars]
        factors.append(merged)
    final = _product(factors, cards)
    if final.vars != (query,):
        # Possible when a factor became scalar; re-product guarantees shape.
        raise InferenceError(f"elimination left unexpected scope {final.vars!r}")
    z = float(final.table.sum())
    if z <= 0.0:
        raise InconsistentEvidenceError(
            f"evidence {evidence!r} has probability zero"
        )
    states = network.variables[query].states
    probs = tuple(float(x) for x in final.table / z)
    return Posterior(query, states, probs)


def brute_force_posterior(network: BayesianNetwork, query: str,
                          evidence: dict | None = None) -> Posterior:
    """Full-joint enumeration oracle; guarded against large networks."""
    evidence = dict(evidence or {})
    nodes = list(network.structure.nodes)
    if len(nodes) > BRUTE_FORCE_NODE_LIMIT:
        raise InferenceError(
            f"brute force limited to {BRUTE_FORCE_NODE_LIMIT} nodes, got {len(nodes)}"
        )
    if query not in network.variables:
        raise InferenceError(f"query variable {query!r} not in network")
    if query in evidence:
        raise InferenceError(f"query {query!r} is already observed")
    _check_evidence(network, evidence)

    states = network.variables[query].states
    totals = {s: 0.0 for s in states}
    domains = [network.variables[n].states for n in nodes]
    for combo in itertools.product(*domains):
        assignment = dict(zip(nodes, combo))
        if any(assignment[v] != s for v, s in evidence.items()):
            continue
        totals[assignment[query]] += joint_probability(network, assignment)
    z = sum(totals.values())
    if z <= 0.0:
        raise InconsistentEvidenceError(f"evidence {evidence!r} has probability zero")
    return Posterior(query, states, tuple(totals[s] / z for s in states))


# ---------------------------------------------------------------------------
# Decision selection

@dataclass(frozen=True)
class DecisionConfig:
    """Scoring and strike-bucket settings for candidate selection.

    Score = P(Trade_Outcome = Profit) - risk_aversion * P(Assignment = High).
    Candidates at or above conservative_min_otm map to Conservative strikes,
    at or above moderate_min_otm to Moderate, anything tighter is Aggressive.
    """

    risk_aversion: float = 1.0
    conservative_min_otm: float = 0.10
    moderate_min_otm: float = 0.05
    position_cap: float = 0.25
    min_score: float | None = None


def strike_state(strike_otm_pct: float, config: DecisionConfig = DecisionConfig()) -> str:
    if strike_otm_pct >= config.conservative_min_otm:
        return "Conservative"
    if strike_otm_pct >= config.moderate_min_otm:
        return "Moderate"
    return "Aggressive"


@dataclass(frozen=True)
class TradeDecision:
    action: str  # sell_put | roll | hold | sell_call | skip
    strike_otm_pct: float
    position_fraction: float
    expected_outcome: Posterior
    assignment_risk: Posterior
    rationale: tuple  # (factor, state, direction) triples, strongest first
    network_ref: str = ""
    score: float = 0.0

    def to_payload(self) -> dict:
        return {
            "action": self.action,
            "strike_otm_pct": self.strike_otm_pct,
            "position_fraction": self.position_fraction,
            "expected_outcome": self.expected_outcome.as_dict(),
            "assignment_risk": self.assignment_risk.as_dict(),
            "rationale": [list(t) for t in self.rationale],
            "network_ref": self.network_ref,
            "score": self.score,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_payload(), indent=2)


def _influence_deltas(network: BayesianNetwork, evidence: dict) -> list[tuple[str, str, float]]:
    """Leave-one-out change in P(Assignment_Probability = High) per evidence var.

    Positive delta means the observation raises assignment risk relative to
    dropping it. Sorted by absolute size, largest first; name breaks ties.
    """
    if not evidence:
        return []
    baseline = posterior(network, "Assignment_Probability", evidence)["High"]
    deltas = []
    for var in evidence:
        reduced = {k: v for k, v in evidence.items() if k != var}
        without = posterior(network, "Assignment_Probability", reduced)["High"]
        deltas.append((var, evidence[var], baseline - without))
    deltas.sort(key=lambda t: (-abs(t[2]), t[0]))
    return deltas


def decide_trade(network: BayesianNetwork, evidence: dict, candidates,
                 config: DecisionConfig = DecisionConfig(),
                 network_ref: str = "") -> TradeDecision:
    """Pick the best (strike OTM fraction, position fraction) candidate.

    Each candidate is scored under the evidence plus its own strike bucket
    as an observation of Strike_Selection (overriding any caller-supplied
    observation of it). Ties go to the larger OTM fraction, then the
    smaller position fraction. Candidates whose overlay contradicts the
    evidence are infeasible and skipped.
    """
    candidates = list(candidates)
    if not candidates:
        raise InferenceError("empty candidate set")
    for needed in ("Strike_Selection", "Assignment_Probability", "Trade_Outcome"):
        if needed not in network.variables:
            raise InferenceError(f"network lacks required variable {needed!r}")
    for otm, frac in candidates:
        if otm < 0:
            raise InferenceError(f"negative strike OTM fraction {otm!r}")
        if not 0 < frac <= config.position_cap:
            raise InferenceError(
                f"position fraction {frac!r} outside (0, {config.position_cap}]"
            )

    base_evidence = {k: v for k, v in evidence.items() if k != "Strike_Selection"}
    scored = []
    for otm, frac in candidates:
        overlay = dict(base_evidence)
        overlay["Strike_Selection"] = strike_state(otm, config)
        try:
            outcome = posterior(network, "Trade_Outcome", overlay)
            assignment = posterior(network, "Assignment_Probability", overlay)
        except InconsistentEvidenceError:
            continue
        score = outcome["Profit"] - config.risk_aversion * assignment["High"]
        scored.append((score, otm, -frac, outcome, assignment))
    if not scored:
        raise InconsistentEvidenceError(
            "every candidate is inconsistent with the evidence"
        )
    score, otm, neg_frac, outcome, assignment = max(scored, key=lambda t: t[:3])
    action = "sell_put"
    if config.min_score is not None and score < config.min_score:
        action = "skip"
    return TradeDecision(
        action=action,
        strike_otm_pct=otm,
        position_fraction=-neg_frac,
        expected_outcome=outcome,
        assignment_risk=assignment,
        rationale=tuple(
            (var, state, "+" if delta > 0 else ("-" if delta < 0 else "0"))
            for var, state, delta in _influence_deltas(network, base_evidence)
        ),
        network_ref=network_ref,
        score=score,
    )


def explain_decision(network: BayesianNetwork, evidence: dict,
                     decision: TradeDecision) -> str:
    """Human-readable account of how each observation moved assignment risk."""
    header = (
        f"Decision: {decision.action} at {decision.strike_otm_pct:.1%} OTM, "
        f"{decision.position_fraction:.1%} of portfolio "
        f"(score {decision.score:+.3f})."
    )
    if not evidence:
        return header + "\nprior-only decision: no evidence was supplied."
    lines = [header, "Evidence influence on assignment risk (leave-one-out):"]
    for var, state, delta in _influence_deltas(network, evidence):
        lines.append(f"  {var}={state}: {delta:+.3f} assignment risk")
    return "\n".join(lines)
