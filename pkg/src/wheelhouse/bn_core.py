"""Discrete Bayesian network data model.

Variables with named states, a directed acyclic structure, conditional
probability tables keyed by parent-state combinations, and the joint
probability semantics that inference builds on. Networks are immutable
after construction and safe to share across threads.
"""
from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field

PROB_TOL = 1e-9

# Row keys in serialized CPTs join parent states with this separator, so
# state labels may not contain it.
STATE_SEP = "|"


class StructureError(ValueError):
    """Raised when an operation requires a valid DAG and does not get one."""


class CptError(ValueError):
    """Raised when a conditional probability table violates its invariants."""


class AssignmentError(ValueError):
    """Raised for assignments with missing variables or unknown states."""


@dataclass(frozen=True)
class Variable:
    """A discrete variable with an ordered, significant state order."""

    name: str
    states: tuple[str, ...]

    def __post_init__(self):
        if not self.name:
            raise ValueError("variable name must be non-empty")
        if len(self.states) < 2:
            raise ValueError(f"variable {self.name!r} needs at least 2 states")
        if len(set(self.states)) != len(self.states):
            raise ValueError(f"variable {self.name!r} has duplicate states")

    def index(self, state: str) -> int:
        try:
            return self.states.index(state)
        except ValueError:
            raise AssignmentError(
                f"unknown state {state!r} for variable {self.name!r}"
            ) from None


# Canonical trading vocabulary: eight variables, three states each, state
# order significant for CPT indexing.
DEFAULT_VOCABULARY: dict[str, Variable] = {
    v.name: v
    for v in (
        Variable("Market_Regime", ("Bull", "Neutral", "Bear")),
        Variable("Volatility_Level", ("High", "Medium", "Low")),
        Variable("Stock_Fundamentals", ("Strong", "Moderate", "Weak")),
        Variable("Technical_Position", ("Oversold", "Neutral", "Overbought")),
        Variable("Strike_Selection", ("Conservative", "Moderate", "Aggressive")),
        Variable("Premium_Rate", ("High", "Medium", "Low")),
        Variable("Assignment_Probability", ("High", "Medium", "Low")),
        Variable("Trade_Outcome", ("Profit", "Breakeven", "Loss")),
    )
}


@dataclass(frozen=True)
class Finding:
    """One coded validation violation."""

    code: str  # missing-field | unknown-endpoint | self-edge | duplicate-edge | cycle
    detail: str
    witness: tuple[str, ...] = ()


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Finding, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.valid:
            return "valid"
        return "; ".join(f"{f.code}: {f.detail}" for f in self.violations)


@dataclass(frozen=True)
class NetworkStructure:
    """DAG skeleton: node names, directed edges, and free-text reasoning."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    reasoning: str = ""

    def __init__(self, nodes, edges, reasoning: str = ""):
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "edges", tuple((str(p), str(c)) for p, c in edges))
        object.__setattr__(self, "reasoning", reasoning)

    def parents_of(self, node: str) -> tuple[str, ...]:
        return tuple(p for p, c in self.edges if c == node)

    def children_of(self, node: str) -> tuple[str, ...]:
        return tuple(c for p, c in self.edges if p == node)

    def edge_set(self) -> set[tuple[str, str]]:
        return set(self.edges)

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [list(e) for e in self.edges],
            "reasoning": self.reasoning,
        }


def structure_to_json(structure: NetworkStructure) -> str:
    """Canonical JSON form; round-trips byte-for-byte via structure_from_json."""
    return json.dumps(structure.to_dict(), indent=2)


def structure_from_json(text: str) -> NetworkStructure:
    structure, report = structure_from_payload(json.loads(text))
    if structure is None or not report.valid:
        raise StructureError(f"invalid network structure: {report.summary()}")
    return structure


def structure_from_payload(payload) -> tuple[NetworkStructure | None, ValidationReport]:
    """Build and validate a structure from decoded JSON.

    Shape problems (missing nodes/edges keys, malformed edge entries) are
    reported as findings rather than exceptions so callers can surface
    generator defects. Returns (structure, report); structure is None when
    the payload is too malformed to build one.
    """
    findings: list[Finding] = []
    if not isinstance(payload, dict):
        return None, ValidationReport(
            (Finding("missing-field", "payload is not a JSON object"),)
        )
    for key in ("nodes", "edges"):
        if key not in payload:
            findings.append(Finding("missing-field", f"required field {key!r} absent"))
    if findings:
        return None, ValidationReport(tuple(findings))

    nodes_raw = payload["nodes"]
    edges_raw = payload["edges"]
    if not isinstance(nodes_raw, list) or not all(isinstance(n, str) for n in nodes_raw):
        findings.append(Finding("missing-field", "'nodes' must be a list of strings"))
    if not isinstance(edges_raw, list):
        findings.append(Finding("missing-field", "'edges' must be a list"))
    else:
        for e in edges_raw:
            if not (isinstance(e, (list, tuple)) and len(e) == 2):
                findings.append(
                    Finding("missing-field", f"edge {e!r} is not a 2-element pair")
                )
    if findings:
        return None, ValidationReport(tuple(findings))

    reasoning = payload.get("reasoning", "")
    if not isinstance(reasoning, str):
        reasoning = str(reasoning)
    structure = NetworkStructure(nodes_raw, edges_raw, reasoning)
    return structure, validate_structure(structure)


def find_cycle(nodes, edges) -> tuple[str, ...] | None:
    """Return one witness cycle path (first and last element equal), or None.

    Iterative DFS with explicit stack; node and neighbor scans are sorted so
    the witness is deterministic.
    """
    adjacency: dict[str, list[str]] = {n: [] for n in nodes}
    for p, c in edges:
        if p in adjacency and c in adjacency:
            adjacency[p].append(c)
    for n in adjacency:
        adjacency[n].sort()

    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in adjacency}
    for start in sorted(adjacency):
        if color[start] != WHITE:
            continue
        path: list[str] = []
        stack = [(start, iter(adjacency[start]))]
        color[start] = GRAY
        path.append(start)
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == GRAY:
                    return tuple(path[path.index(nxt):] + [nxt])
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    path.append(nxt)
                    stack.append((nxt, iter(adjacency[nxt])))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                path.pop()
                stack.pop()
    return None


def validate_structure(structure: NetworkStructure) -> ValidationReport:
    """Check endpoint membership, self-edges, duplicates, and acyclicity.

    All failures come back as findings; nothing raises. Cycle findings carry
    at least one witness path.
    """
    findings: list[Finding] = []
    node_set = set(structure.nodes)
    seen_edges: set[tuple[str, str]] = set()
    for p, c in structure.edges:
        for endpoint in (p, c):
            if endpoint not in node_set:
                findings.append(
                    Finding("unknown-endpoint", f"edge ({p}, {c}) references unknown node {endpoint!r}")
                )
        if p == c:
            findings.append(Finding("self-edge", f"self-edge on {p!r}"))
        if (p, c) in seen_edges:
            findings.append(Finding("duplicate-edge", f"duplicate edge ({p}, {c})"))
        seen_edges.add((p, c))

    witness = find_cycle(structure.nodes, [e for e in structure.edges if e[0] != e[1]])
    if witness is not None:
        findings.append(
            Finding("cycle", "cycle detected: " + " -> ".join(witness), witness)
        )
    return ValidationReport(tuple(findings))


def topological_order(structure: NetworkStructure) -> list[str]:
    """Kahn's algorithm with a heap: the lexicographically least valid order."""
    report = validate_structure(structure)
    if not report.valid:
        raise StructureError(f"cannot order invalid structure: {report.summary()}")
    indegree = {n: 0 for n in structure.nodes}
    children: dict[str, list[str]] = {n: [] for n in structure.nodes}
    for p, c in structure.edges:
        indegree[c] += 1
        children[p].append(c)
    ready = [n for n, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        node = heapq.heappop(ready)
        order.append(node)
        for child in children[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, child)
    if len(order) != len(set(structure.nodes)):
        raise StructureError("cyclic structure has no topological order")
    return order


@dataclass(frozen=True, eq=True)
class Cpt:
    """P(child | parents) as one distribution row per parent-state combo.

    Parent order is significant and matches the row-key component order.
    Root nodes use a single row keyed by the empty tuple.
    """

    child: str
    parents: tuple[str, ...]
    child_states: tuple[str, ...]
    parent_states: tuple[tuple[str, ...], ...]
    rows: dict[tuple[str, ...], tuple[float, ...]] = field(hash=False)

    def __init__(self, child, parents, child_states, parent_states, rows):
        object.__setattr__(self, "child", child)
        object.__setattr__(self, "parents", tuple(parents))
        object.__setattr__(self, "child_states", tuple(child_states))
        object.__setattr__(self, "parent_states", tuple(tuple(s) for s in parent_states))
        object.__setattr__(
            self, "rows", {tuple(k): tuple(float(x) for x in v) for k, v in rows.items()}
        )
        validate_cpt(self)

    def row_keys(self) -> list[tuple[str, ...]]:
        return [tuple(combo) for combo in itertools.product(*self.parent_states)]

    def prob(self, child_state: str, parent_combo: tuple[str, ...]) -> float:
        try:
            row = self.rows[tuple(parent_combo)]
        except KeyError:
            raise AssignmentError(
                f"no CPT row for {self.child!r} given parents {parent_combo!r}"
            ) from None
        try:
            idx = self.child_states.index(child_state)
        except ValueError:
            raise AssignmentError(
                f"unknown state {child_state!r} for variable {self.child!r}"
            ) from None
        return row[idx]


def validate_cpt(cpt: Cpt) -> None:
    if len(cpt.child_states) < 2:
        raise CptError(f"CPT for {cpt.child!r} needs at least 2 child states")
    if len(cpt.parents) != len(cpt.parent_states):
        raise CptError(f"CPT for {cpt.child!r}: parents and parent_states disagree")
    expected = {tuple(c) for c in itertools.product(*cpt.parent_states)}
    actual = set(cpt.rows)
    if expected != actual:
        missing = sorted(expected - actual)
        extra = sorted(actual - expected)
        raise CptError(
            f"CPT for {cpt.child!r} rows mismatch: missing {missing[:3]}, extra {extra[:3]}"
        )
    n = len(cpt.child_states)
    for key, row in cpt.rows.items():
        if len(row) != n:
            raise CptError(f"CPT for {cpt.child!r} row {key} has {len(row)} entries, want {n}")
        if any(x < 0 for x in row):
            raise CptError(f"CPT for {cpt.child!r} row {key} has negative entries")
        if not math.isclose(sum(row), 1.0, abs_tol=PROB_TOL, rel_tol=0.0):
            raise CptError(
                f"CPT for {cpt.child!r} row {key} sums to {sum(row)!r}, not 1"
            )


def uniform_cpt(child: Variable, parents: tuple[Variable, ...] = ()) -> Cpt:
    n = len(child.states)
    row = tuple(1.0 / n for _ in range(n))
    rows = {
        tuple(combo): row
        for combo in itertools.product(*(p.states for p in parents))
    }
    return Cpt(child.name, tuple(p.name for p in parents), child.states,
               tuple(p.states for p in parents), rows)


@dataclass(frozen=True)
class BayesianNetwork:
    """Validated, immutable network: variables, structure, one CPT per node.

    CPT parent order is canonicalized to the lexicographic order of each
    node's parents in the structure, so row indexing is unambiguous.
    """

    variables: dict[str, Variable]
    structure: NetworkStructure
    cpts: dict[str, Cpt]

    def __post_init__(self):
        report = validate_structure(self.structure)
        if not report.valid:
            raise StructureError(f"invalid structure: {report.summary()}")
        node_set = set(self.structure.nodes)
        if set(self.variables) != node_set:
            raise StructureError("variables map does not cover exactly the structure nodes")
        if set(self.cpts) != node_set:
            raise CptError("need exactly one CPT per node")
        for node in self.structure.nodes:
            var = self.variables[node]
            cpt = self.cpts[node]
            want_parents = canonical_parents(self.structure, node)
            if cpt.parents != want_parents:
                raise CptError(
                    f"CPT for {node!r} has parents {cpt.parents}, structure implies {want_parents}"
                )
            if cpt.child_states != var.states:
                raise CptError(f"CPT for {node!r} does not match variable states")
            for pname, pstates in zip(cpt.parents, cpt.parent_states):
                if self.variables[pname].states != pstates:
                    raise CptError(
                        f"CPT for {node!r}: parent {pname!r} states disagree with variable"
                    )

    def node_names(self) -> list[str]:
        return list(self.structure.nodes)


def canonical_parents(structure: NetworkStructure, node: str) -> tuple[str, ...]:
    return tuple(sorted(set(structure.parents_of(node))))


def joint_probability(network: BayesianNetwork, assignment: dict[str, str]) -> float:
    """Chain-rule product of CPT entries over every node.

    The assignment must give a known state for each node; anything else
    raises AssignmentError.
    """
    for node in network.structure.nodes:
        if node not in assignment:
            raise AssignmentError(f"assignment missing variable {node!r}")
        network.variables[node].index(assignment[node])
    prob = 1.0
    for node in network.structure.nodes:
        cpt = network.cpts[node]
        combo = tuple(assignment[p] for p in cpt.parents)
        prob *= cpt.prob(assignment[node], combo)
        if prob == 0.0:
            return 0.0
    return prob


def network_to_json(network: BayesianNetwork) -> str:
    """Structure keys plus a 'cpts' extension carrying states and rows."""
    cpts_payload = {}
    for node in network.structure.nodes:
        cpt = network.cpts[node]
        for states in (cpt.child_states, *cpt.parent_states):
            for s in states:
                if STATE_SEP in s:
                    raise CptError(f"state label {s!r} contains reserved {STATE_SEP!r}")
        rows = {
            STATE_SEP.join(key): list(cpt.rows[key])
            for key in sorted(cpt.rows)
        }
        cpts_payload[node] = {
            "parents": list(cpt.parents),
            "states": list(cpt.child_states),
            "rows": rows,
        }
    payload = network.structure.to_dict()
    payload["cpts"] = cpts_payload
    return json.dumps(payload, indent=2)


def network_from_json(text: str) -> BayesianNetwork:
    payload = json.loads(text)
    structure, report = structure_from_payload(payload)
    if structure is None or not report.valid:
        raise StructureError(f"invalid network document: {report.summary()}")
    cpts_payload = payload.get("cpts")
    if not isinstance(cpts_payload, dict):
        raise CptError("network document lacks a 'cpts' mapping")
    states_of = {}
    for node in structure.nodes:
        entry = cpts_payload.get(node)
        if entry is None:
            raise CptError(f"no CPT entry for node {node!r}")
        states_of[node] = tuple(entry["states"])
    variables = {n: Variable(n, states_of[n]) for n in structure.nodes}
    cpts = {}
    for node in structure.nodes:
        entry = cpts_payload[node]
        parents = tuple(entry["parents"])
        parent_states = tuple(states_of[p] for p in parents)
        rows = {}
        for key, row in entry["rows"].items():
            combo = tuple(key.split(STATE_SEP)) if key else ()
            rows[combo] = tuple(row)
        cpts[node] = Cpt(node, parents, states_of[node], parent_states, rows)
    return BayesianNetwork(variables, structure, cpts)
