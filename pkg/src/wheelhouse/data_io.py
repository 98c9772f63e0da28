"""Persistence and ingestion: bar CSVs, append-only stores, snapshots, manifests.

File formats are deliberately plain: CSV for daily bars, JSONL for record
streams (first line is a schema-version object), JSON for network snapshots
and run manifests. The trading calendar is weekday-based with an optional
user-supplied holiday file; there is no built-in holiday table.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from . import __version__
from . import bn_core

logger = logging.getLogger(__name__)

BAR_HEADER = ["date", "open", "high", "low", "close", "adj_close", "volume"]
TRADE_STORE_SCHEMA = {"schema": "trade_store", "version": 1}
FEEDBACK_LOG_SCHEMA = {"schema": "feedback_log", "version": 1}


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# Trading calendar (weekdays minus user-supplied holidays)

def load_holidays(path) -> frozenset[date]:
    """One ISO date per line; blank lines and # comments ignored."""
    days = set()
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            days.add(date.fromisoformat(text))
        except ValueError as exc:
            raise DataError(f"{path}:{i}: bad holiday date {text!r}") from exc
    return frozenset(days)


def is_trading_day(d: date, holidays: frozenset[date] = frozenset()) -> bool:
    return d.weekday() < 5 and d not in holidays


def trading_days(start: date, end: date, holidays: frozenset[date] = frozenset()) -> list[date]:
    """All trading days in [start, end]."""
    out = []
    d = start
    while d <= end:
        if is_trading_day(d, holidays):
            out.append(d)
        d += timedelta(days=1)
    return out


def add_trading_days(d: date, n: int, holidays: frozenset[date] = frozenset()) -> date:
    """Shift d by n trading days (n may be negative); d itself need not trade."""
    step = timedelta(days=1 if n >= 0 else -1)
    remaining = abs(n)
    cur = d
    while remaining > 0:
        cur += step
        if is_trading_day(cur, holidays):
            remaining -= 1
    return cur


def next_friday_at_least(d: date, min_calendar_days: int) -> date:
    """The nearest Friday at least min_calendar_days after d."""
    target = d + timedelta(days=min_calendar_days)
    while target.weekday() != 4:
        target += timedelta(days=1)
    return target


# ---------------------------------------------------------------------------
# Daily bars

@dataclass(frozen=True)
class Bar:
    date: date
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float


@dataclass
class BarSeries:
    ticker: str
    bars: list[Bar]
    gaps: list[date] = field(default_factory=list)

    def __post_init__(self):
        self._by_date = {b.date: b for b in self.bars}

    def dates(self) -> list[date]:
        return [b.date for b in self.bars]

    def get(self, d: date) -> Bar | None:
        return self._by_date.get(d)

    def closes_through(self, d: date, n: int | None = None) -> list[float]:
        """Closes for bars dated <= d, optionally only the trailing n."""
        vals = [b.close for b in self.bars if b.date <= d]
        return vals if n is None else vals[-n:]

    def bars_through(self, d: date) -> list[Bar]:
        return [b for b in self.bars if b.date <= d]


def load_bars(path, ticker: str | None = None, holidays: frozenset[date] = frozenset()) -> BarSeries:
    """Load and validate one ticker's daily bars.

    Dates must be strictly increasing, prices positive, volume nonnegative.
    Errors carry the offending line number. A gap report (trading days with
    no bar between the first and last date) is attached to the series.
    """
    path = Path(path)
    name = ticker or path.stem.upper()
    bars: list[Bar] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != BAR_HEADER:
            raise DataError(f"{path}: header {header!r} does not match {BAR_HEADER!r}")
        prev: date | None = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(BAR_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(BAR_HEADER)} fields, got {len(row)}")
            try:
                d = date.fromisoformat(row[0])
                o, h, l, c, ac = (float(x) for x in row[1:6])
                v = float(row[6])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed row: {exc}") from None
            if prev is not None and d <= prev:
                raise DataError(f"{path}:{lineno}: non-increasing date {d.isoformat()}")
            if min(o, h, l, c, ac) <= 0:
                raise DataError(f"{path}:{lineno}: non-positive price")
            if v < 0:
                raise DataError(f"{path}:{lineno}: negative volume")
            bars.append(Bar(d, o, h, l, c, ac, v))
            prev = d
    if not bars:
        raise DataError(f"{path}: no data rows")
    present = {b.date for b in bars}
    gaps = [d for d in trading_days(bars[0].date, bars[-1].date, holidays) if d not in present]
    if gaps:
        logger.info("%s: %d missing trading days between %s and %s",
                    name, len(gaps), bars[0].date, bars[-1].date)
    return BarSeries(name, bars, gaps)


def write_bars_csv(path, series: BarSeries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BAR_HEADER)
        for b in series.bars:
            writer.writerow([b.date.isoformat(), f"{b.open:.6f}", f"{b.high:.6f}",
                             f"{b.low:.6f}", f"{b.close:.6f}", f"{b.adj_close:.6f}",
                             f"{b.volume:.0f}"])


def flat_bars(ticker: str, start: date, n_days: int, price: float = 100.0,
              volume: float = 1_000_000.0) -> BarSeries:
    """Constant-price series on consecutive trading days; test and demo fixture."""
    days = []
    d = start
    while len(days) < n_days:
        if is_trading_day(d):
            days.append(d)
        d += timedelta(days=1)
    bars = [Bar(d, price, price, price, price, price, volume) for d in days]
    return BarSeries(ticker, bars)


def gbm_bars(ticker: str, start: date, n_days: int, s0: float = 100.0,
             mu: float = 0.08, sigma: float = 0.30, seed: int = 0,
             volume: float = 1_000_000.0) -> BarSeries:
    """Geometric-Brownian daily closes, deterministic per seed."""
    rng = np.random.default_rng(seed)
    days = []
    d = start
    while len(days) < n_days:
        if is_trading_day(d):
            days.append(d)
        d += timedelta(days=1)
    dt = 1.0 / 252.0
    shocks = rng.standard_normal(n_days)
    closes = [s0]
    for z in shocks[1:]:
        closes.append(closes[-1] * float(np.exp((mu - 0.5 * sigma**2) * dt + sigma * np.sqrt(dt) * z)))
    bars = []
    for d, c in zip(days, closes):
        c = round(c, 6)
        bars.append(Bar(d, c, c, c, c, c, volume))
    return BarSeries(ticker, bars)


# ---------------------------------------------------------------------------
# Append-only JSONL stores

def content_hash(payload: dict) -> str:
    """Stable id for a record: sha256 of its canonical JSON, truncated."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


class JsonlStore:
    """Single-writer append-only JSONL file with a schema-version header."""

    def __init__(self, path, schema: dict):
        self.path = Path(path)
        self.schema = schema
        self._rows: list[dict] = []
        self._ids: set[str] = set()
        if self.path.exists():
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w") as fh:
                fh.write(json.dumps(schema, sort_keys=True) + "\n")

    def _load(self):
        with open(self.path) as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise DataError(f"{self.path}: missing schema header")
        header = json.loads(lines[0])
        if header.get("schema") != self.schema["schema"]:
            raise DataError(f"{self.path}: schema {header!r} does not match {self.schema!r}")
        for line in lines[1:]:
            if not line.strip():
                continue
            row = json.loads(line)
            self._rows.append(row)
            if "id" in row:
                self._ids.add(row["id"])

    def append(self, payload: dict) -> str:
        """Append with a content-hash id; exact duplicates are no-ops."""
        body = {k: v for k, v in payload.items() if k != "id"}
        row_id = content_hash(body)
        if row_id in self._ids:
            return row_id
        row = {"id": row_id, **body}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._rows.append(row)
        self._ids.add(row_id)
        return row_id

    def rows(self) -> list[dict]:
        return list(self._rows)

    def __len__(self) -> int:
        return len(self._rows)


def open_trade_store(path) -> JsonlStore:
    return JsonlStore(path, TRADE_STORE_SCHEMA)


def append_trade(store, record, schema=None) -> str:
    """Append one trade record; returns its content-hash id.

    store is a JsonlStore or a path. schema, when given, must expose
    validate_record(record) returning violation messages; any violation
    raises DataError naming the offending factor.
    """
    if not isinstance(store, JsonlStore):
        store = open_trade_store(store)
    if schema is not None:
        problems = schema.validate_record(record)
        if problems:
            raise DataError(f"trade record rejected: {'; '.join(problems)}")
    payload = record.to_payload() if hasattr(record, "to_payload") else dict(record)
    return store.append(payload)


# ---------------------------------------------------------------------------
# Network snapshots with provenance

def snapshot_network(network: bn_core.BayesianNetwork, provenance: dict, path) -> Path:
    """Persist a populated network next to the trade ids that built it.

    provenance keys: as_of (ISO date), trade_ids (any iterable; stored
    sorted and deduplicated), plus free-form context.
    """
    path = Path(path)
    payload = json.loads(bn_core.network_to_json(network))
    prov = dict(provenance)
    prov["trade_ids"] = sorted(set(prov.get("trade_ids", ())))
    payload["provenance"] = prov
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def load_network_snapshot(path) -> tuple[bn_core.BayesianNetwork, dict]:
    text = Path(path).read_text()
    network = bn_core.network_from_json(text)
    provenance = json.loads(text).get("provenance", {})
    return network, provenance


# ---------------------------------------------------------------------------
# Run manifests

@dataclass
class RunManifest:
    config: dict
    inputs: dict  # path -> sha256
    seed: int | None
    tool_version: str = __version__
    created: str | None = None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, config: dict, input_paths, seed: int | None,
                   created: str | None = None) -> Path:
    """Record config, input hashes, and seed so a run can be reproduced."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        config=config,
        inputs={str(p): file_sha256(p) for p in input_paths},
        seed=seed,
        created=created,
    )
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return path
