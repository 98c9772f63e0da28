"""Turn trading context plus LLM text output into a validated network structure.

The generation chain is: prompt the client, parse its response (JSON first,
pattern-based text second), validate; retry a bounded number of times; then
fall back to a context-derived template and finally to a fixed per-regime
structure. The chain never hands an invalid structure downstream.
"""
from __future__ import annotations

import json
import logging
import os
import re
import urllib.request
from dataclasses import dataclass, field, asdict
from datetime import date

from . import bn_core, data_io
from .bn_core import NetworkStructure

logger = logging.getLogger(__name__)

TRENDS = ("up", "down", "sideways")
REGIMES = ("Bull", "Neutral", "Bear")

LLM_KEY_ENV = "WHEELHOUSE_LLM_KEY"


class ParseError(ValueError):
    """Response could not be turned into a valid structure by any strategy."""

    def __init__(self, message: str, json_diagnostic: str = "",
                 text_diagnostic: str = "", findings=()):
        super().__init__(message)
        self.json_diagnostic = json_diagnostic
        self.text_diagnostic = text_diagnostic
        self.findings = tuple(findings)


class LlmError(RuntimeError):
    """Transient or configuration failure of the completion client."""


@dataclass(frozen=True)
class MarketContext:
    ticker: str
    current_price: float
    volatility: float
    trend: str
    vix: float
    market_regime: str
    avg_daily_volume: float
    date: date

    def __post_init__(self):
        if self.current_price <= 0:
            raise ValueError("current_price must be positive")
        if self.volatility < 0 or self.vix < 0 or self.avg_daily_volume < 0:
            raise ValueError("volatility, vix, and avg_daily_volume must be nonnegative")
        if self.trend not in TRENDS:
            raise ValueError(f"trend must be one of {TRENDS}")
        if self.market_regime not in REGIMES:
            raise ValueError(f"market_regime must be one of {REGIMES}")


@dataclass(frozen=True)
class PsychologicalState:
    fomo_level: float = 0.0
    confidence_level: float = 0.5
    stress_level: float = 0.0
    tilt_risk: float = 0.0

    def __post_init__(self):
        for name in ("fomo_level", "confidence_level", "stress_level", "tilt_risk"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")


@dataclass(frozen=True)
class GenerationConfig:
    model_id: str = "gpt-4-0613"
    temperature: float = 0.1
    max_tokens: int = 2000
    top_p: float = 0.9
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    max_retries: int = 3

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if self.max_retries < 0:
            raise ValueError("max_retries must be nonnegative")


@dataclass(frozen=True)
class FeedbackRecord:
    trade_id: str
    decision: str
    outcome: str
    indicators: dict = field(default_factory=dict, hash=False)
    lesson: str = ""

    def __post_init__(self):
        if self.outcome not in ("Profit", "Breakeven", "Loss"):
            raise ValueError(f"unknown outcome label {self.outcome!r}")


# ---------------------------------------------------------------------------
# Prompt construction

SYSTEM_PREAMBLE = """You are an expert in Bayesian Networks and financial trading.
Generate a structured Bayesian Network (DAG) for options trading decisions.

CRITICAL REQUIREMENTS:
1. Output ONLY valid JSON format
2. Include nodes and edges arrays
3. Ensure DAG property (no cycles)
4. Focus on causal relationships, not correlations
5. Include both market and psychological variables

OUTPUT FORMAT:
{
    "nodes": ["node1", "node2", ...],
    "edges": [["parent", "child"], ...],
    "reasoning": "Brief explanation of structure"
}
"""

FEEDBACK_DIGEST_K = 10


def feedback_digest(feedback, k: int = FEEDBACK_DIGEST_K) -> str:
    """Digest of the k most recent feedback records, newest first."""
    if not feedback or k <= 0:
        return ""
    lines = []
    for rec in list(feedback)[-k:][::-1]:
        indicators = ", ".join(f"{name}={value}" for name, value in sorted(rec.indicators.items()))
        line = f"- {rec.outcome}: {rec.decision}"
        if indicators:
            line += f" [{indicators}]"
        if rec.lesson:
            line += f" lesson: {rec.lesson}"
        lines.append(line)
    return "\n".join(lines)


def construct_prompt(context: MarketContext, psych: PsychologicalState,
                     feedback=(), digest_k: int = FEEDBACK_DIGEST_K) -> str:
    """Deterministic prompt: same inputs always give identical bytes."""
    parts = [
        SYSTEM_PREAMBLE,
        "Generate a Bayesian Network structure for options trading decision:",
        "",
        "MARKET CONTEXT:",
        f"- Ticker: {context.ticker}",
        f"- Current Price: ${context.current_price:.2f}",
        f"- Volatility: {context.volatility:.2f}",
        f"- Trend: {context.trend}",
        f"- VIX: {context.vix:.2f}",
        f"- Market Regime: {context.market_regime}",
        f"- Average Daily Volume: {context.avg_daily_volume:.0f}",
        f"- Date: {context.date.isoformat()}",
        "",
        "PSYCHOLOGICAL STATE:",
        f"- FOMO Level: {psych.fomo_level:.2f}",
        f"- Confidence: {psych.confidence_level:.2f}",
        f"- Stress: {psych.stress_level:.2f}",
        f"- Tilt Risk: {psych.tilt_risk:.2f}",
    ]
    digest = feedback_digest(feedback, digest_k)
    if digest:
        parts += ["", "RECENT TRADE FEEDBACK:", digest]
    parts += [
        "",
        "Generate nodes for market variables, psychological factors,",
        "strategy parameters, and outcomes. Create causal edges based",
        "on the current context. Output valid JSON only.",
    ]
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Parsing

# One alternation so edges keep their order of first appearance. Unicode
# arrows are normalized to "->" before matching. Operands are word tokens;
# multi-word variable names must be underscored.
_EDGE_PATTERN = re.compile(
    r"(\w+)(?:\s*->\s*|\s+(?:influences?|affects?|causes?)\s+)(\w+)",
    re.IGNORECASE,
)
_NODE_LINE_PATTERN = re.compile(
    r"(?:nodes?|variables?|factors?)\s*:\s*(.+)",
    re.IGNORECASE,
)


def extract_json_span(text: str) -> str | None:
    """The outermost balanced-brace span starting at the first '{'.

    Brace counting is string-aware, so braces inside JSON strings do not
    unbalance the scan. Returns None when no balanced span exists.
    """
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start:i + 1]
    return None


def parse_structured_text(response: str) -> NetworkStructure:
    """Recover a structure from free text via arrow and verb edge patterns.

    Node set is the union of declared node-list lines and edge endpoints,
    deduplicated in first-seen order. Each node-list line is handled
    independently (list continuation across lines is not recognized).
    The result is not validated here; callers decide what invalid means.
    """
    normalized = response.replace("→", "->")
    edges: list[tuple[str, str]] = []
    seen_edges = set()
    for m in _EDGE_PATTERN.finditer(normalized):
        edge = (m.group(1), m.group(2))
        if edge not in seen_edges:
            edges.append(edge)
            seen_edges.add(edge)

    nodes: list[str] = []
    seen_nodes = set()

    def add_node(name: str):
        if name not in seen_nodes:
            nodes.append(name)
            seen_nodes.add(name)

    for line in normalized.splitlines():
        m = _NODE_LINE_PATTERN.search(line)
        if not m:
            continue
        for piece in m.group(1).split(","):
            tokens = re.findall(r"\w+", piece)
            if len(tokens) == 1:
                add_node(tokens[0])
    for parent, child in edges:
        add_node(parent)
        add_node(child)

    if not nodes and not edges:
        raise ParseError("no nodes or edges recognized in text",
                         text_diagnostic="no nodes or edges recognized")
    return NetworkStructure(nodes, edges, "recovered from unstructured text")


def parse_llm_response(response: str) -> NetworkStructure:
    """JSON extraction first, pattern-based text parsing second.

    Either returns a structure that passes validation or raises ParseError
    carrying both strategies' diagnostics, including any validation
    findings (cycles, unknown endpoints, ...) from a JSON candidate.
    """
    json_diag = ""
    findings: tuple = ()
    span = extract_json_span(response)
    if span is None:
        json_diag = "no brace-delimited JSON object found"
    else:
        try:
            payload = json.loads(span)
        except json.JSONDecodeError as exc:
            json_diag = f"JSON decode failed: {exc}"
        else:
            structure, report = bn_core.structure_from_payload(payload)
            if structure is not None and report.valid:
                return structure
            json_diag = f"JSON candidate rejected: {report.summary()}"
            findings = report.violations

    try:
        structure = parse_structured_text(response)
    except ParseError as exc:
        raise ParseError(
            f"unparseable response; json: {json_diag}; text: {exc.text_diagnostic}",
            json_diagnostic=json_diag,
            text_diagnostic=exc.text_diagnostic,
            findings=findings,
        ) from None
    report = bn_core.validate_structure(structure)
    if report.valid:
        return structure
    raise ParseError(
        f"unparseable response; json: {json_diag}; text parse invalid: {report.summary()}",
        json_diagnostic=json_diag,
        text_diagnostic=f"text parse invalid: {report.summary()}",
        findings=findings + report.violations,
    )


# ---------------------------------------------------------------------------
# Fallback structures

_BASE_EDGES = (
    ("Market_Regime", "Assignment_Probability"),
    ("Volatility_Level", "Strike_Selection"),
    ("Volatility_Level", "Premium_Rate"),
    ("Strike_Selection", "Assignment_Probability"),
    ("Strike_Selection", "Premium_Rate"),
    ("Assignment_Probability", "Trade_Outcome"),
    ("Premium_Rate", "Trade_Outcome"),
    ("Stock_Fundamentals", "Trade_Outcome"),
)

_REGIME_EDGES = {
    "Bull": (("Market_Regime", "Strike_Selection"),),
    "Neutral": (("Technical_Position", "Strike_Selection"),),
    "Bear": (("Technical_Position", "Premium_Rate"),
             ("Market_Regime", "Trade_Outcome")),
}


def predefined_structure(market_regime: str) -> NetworkStructure:
    """Fixed last-resort DAG per regime over the core vocabulary; total."""
    regime = market_regime if market_regime in _REGIME_EDGES else "Neutral"
    if regime != market_regime:
        logger.warning("unknown regime %r; using Neutral predefined structure", market_regime)
    edges = _BASE_EDGES + _REGIME_EDGES[regime]
    return NetworkStructure(
        tuple(bn_core.DEFAULT_VOCABULARY),
        edges,
        f"Predefined fallback structure for {regime} regime.",
    )


def template_structure(context: MarketContext,
                       psych: PsychologicalState | None = None) -> NetworkStructure:
    """Context-derived template: always valid, deterministic per inputs."""
    from .cpt_engine import discretize_volatility

    base = predefined_structure(context.market_regime)
    nodes = list(base.nodes)
    edges = list(base.edges)
    tercile = discretize_volatility(context.volatility)
    if tercile == "High" and ("Volatility_Level", "Assignment_Probability") not in edges:
        edges.append(("Volatility_Level", "Assignment_Probability"))
    if psych is not None and psych.stress_level > 0.5:
        for extra in ("Psychological_State", "Risk_Tolerance"):
            if extra not in nodes:
                nodes.append(extra)
        if ("Psychological_State", "Risk_Tolerance") not in edges:
            edges.append(("Psychological_State", "Risk_Tolerance"))
    return NetworkStructure(
        nodes, edges,
        f"Template structure for {context.market_regime} regime, {tercile} volatility.",
    )


# ---------------------------------------------------------------------------
# Clients

class LlmClient:
    """Text-in, text-out completion client; may fail transiently."""

    def complete(self, prompt: str, config: GenerationConfig) -> str:
        raise NotImplementedError


class MockLlmClient(LlmClient):
    """Offline deterministic client: output depends only on (prompt, seed).

    With variability 0 it always answers the predefined structure for the
    regime found in the prompt. Positive variability deterministically
    toggles a few optional edges so structure-consistency studies have
    something to measure.
    """

    _OPTIONAL_EDGES = (
        ("Technical_Position", "Trade_Outcome"),
        ("Stock_Fundamentals", "Strike_Selection"),
        ("Volatility_Level", "Trade_Outcome"),
        ("Market_Regime", "Premium_Rate"),
    )

    def __init__(self, seed: int = 0, variability: int = 0):
        self.seed = seed
        self.variability = min(variability, len(self._OPTIONAL_EDGES))
        self.calls = 0

    def complete(self, prompt: str, config: GenerationConfig) -> str:
        self.calls += 1
        m = re.search(r"Market Regime: (\w+)", prompt)
        regime = m.group(1) if m else "Neutral"
        structure = predefined_structure(regime)
        edges = list(structure.edges)
        if self.variability > 0:
            digest = data_io.content_hash({"prompt": prompt, "seed": self.seed})
            bits = int(digest, 16)
            for i, edge in enumerate(self._OPTIONAL_EDGES[: self.variability]):
                if (bits >> i) & 1:
                    edges.append(edge)
        payload = {
            "nodes": list(structure.nodes),
            "edges": [list(e) for e in edges],
            "reasoning": f"Mock structure for {regime} regime (seed {self.seed}).",
        }
        return json.dumps(payload)


class ScriptedLlmClient(LlmClient):
    """Replays a fixed script; list items are response strings or exceptions."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0

    def complete(self, prompt: str, config: GenerationConfig) -> str:
        self.calls += 1
        if not self.script:
            raise LlmError("scripted client exhausted")
        item = self.script.pop(0)
        if isinstance(item, BaseException):
            raise item
        if isinstance(item, type) and issubclass(item, BaseException):
            raise item("scripted failure")
        return item


class HttpLlmClient(LlmClient):
    """Minimal live client for an OpenAI-style completion endpoint.

    Requires the WHEELHOUSE_LLM_KEY environment variable. Not used by any
    test; the offline mock is the supported default.
    """

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 60.0):
        key = api_key if api_key is not None else os.environ.get(LLM_KEY_ENV)
        if not key:
            raise LlmError(f"{LLM_KEY_ENV} is not set; live provider unavailable")
        self.endpoint = endpoint
        self.api_key = key
        self.timeout = timeout

    def complete(self, prompt: str, config: GenerationConfig) -> str:
        body = {
            "model": config.model_id,
            "prompt": prompt,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
            "top_p": config.top_p,
            "frequency_penalty": config.frequency_penalty,
            "presence_penalty": config.presence_penalty,
        }
        request = urllib.request.Request(
            self.endpoint,
            data=json.dumps(body).encode(),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {self.api_key}",
            },
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except Exception as exc:
            raise LlmError(f"completion request failed: {exc}") from exc
        if isinstance(payload, dict):
            if "text" in payload:
                return payload["text"]
            choices = payload.get("choices")
            if choices:
                first = choices[0]
                if "text" in first:
                    return first["text"]
                if "message" in first:
                    return first["message"].get("content", "")
        raise LlmError(f"unrecognized completion payload: {str(payload)[:200]}")


# ---------------------------------------------------------------------------
# Generation with fallbacks

def generate_with_fallback(context: MarketContext, psych: PsychologicalState,
                           feedback, client: LlmClient,
                           config: GenerationConfig = GenerationConfig(),
                           ) -> tuple[NetworkStructure, str]:
    """Generate a validated structure; provenance is llm, template, or predefined.

    Exactly max_retries client attempts are made before falling back; every
    attempt's failure diagnostic is logged. The predefined layer is total,
    so this function always returns a valid structure.
    """
    prompt = construct_prompt(context, psych, feedback)
    for attempt in range(1, config.max_retries + 1):
        try:
            response = client.complete(prompt, config)
        except Exception as exc:
            logger.warning("generation attempt %d/%d failed: %s",
                           attempt, config.max_retries, exc)
            continue
        try:
            return parse_llm_response(response), "llm"
        except ParseError as exc:
            logger.warning("generation attempt %d/%d unparseable: %s",
                           attempt, config.max_retries, exc)
    try:
        template = template_structure(context, psych)
        if bn_core.validate_structure(template).valid:
            return template, "template"
        logger.warning("template structure failed validation; using predefined")
    except Exception as exc:
        logger.warning("template generation failed: %s", exc)
    return predefined_structure(context.market_regime), "predefined"


# ---------------------------------------------------------------------------
# Feedback loop

def record_feedback(decision: str, outcome: str, indicators: dict,
                    trade_id: str = "", lesson: str = "",
                    store: data_io.JsonlStore | None = None) -> FeedbackRecord:
    """Build a feedback record for a closed trade; optionally persist it."""
    record = FeedbackRecord(trade_id=trade_id, decision=decision,
                            outcome=outcome, indicators=dict(indicators),
                            lesson=lesson)
    if store is not None:
        store.append(asdict(record))
    return record


def open_feedback_log(path) -> data_io.JsonlStore:
    return data_io.JsonlStore(path, data_io.FEEDBACK_LOG_SCHEMA)


def load_feedback(path) -> list[FeedbackRecord]:
    store = open_feedback_log(path)
    return [
        FeedbackRecord(
            trade_id=row.get("trade_id", ""),
            decision=row["decision"],
            outcome=row["outcome"],
            indicators=dict(row.get("indicators", {})),
            lesson=row.get("lesson", ""),
        )
        for row in store.rows()
    ]
