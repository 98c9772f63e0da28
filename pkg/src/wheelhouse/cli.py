"""Operator command surface: ingest, generate, validate, populate, infer,
backtest, analyze, report.

Every subcommand writes a run manifest into --out before any other output
and never writes outside it. Exit codes: 0 success, 1 domain error,
2 usage error. Stochastic subcommands require --seed so reruns reproduce
byte-identical outputs.
"""
from __future__ import annotations

import argparse
import json
import sys
from datetime import date
from pathlib import Path

from . import __version__, analysis, bn_core, cpt_engine, data_io, inference
from . import metrics as metrics_mod
from . import structure_gen, wheel_sim


class CliError(ValueError):
    pass


def _load_config_file(path) -> dict:
    """Flat key=value config lines; # starts a comment, blank lines ignored."""
    values: dict = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise CliError(f"{path}:{i}: expected key=value, got {text!r}")
        key, _, raw = text.partition("=")
        values[key.strip()] = raw.strip()
    return values


_CONFIG_FIELDS = {
    "tickers": lambda s: tuple(t.strip().upper() for t in s.split(",") if t.strip()),
    "start": date.fromisoformat,
    "end": date.fromisoformat,
    "initial_capital": float,
    "put_otm_pct": float,
    "roll_trigger_pct": float,
    "position_size_limit": float,
    "adv_cap": float,
    "expiry_cycle": str,
    "retrain_months": int,
    "risk_free_rate": float,
    "seed": int,
    "rolling_enabled": lambda s: s.lower() in ("1", "true", "yes", "on"),
    "premium_threshold": float,
    "min_pricing_vol": float,
    "risk_aversion": float,
    "candidate_otm": lambda s: tuple(float(x) for x in s.split(",") if x.strip()),
    "candidate_fractions": lambda s: tuple(float(x) for x in s.split(",") if x.strip()),
    "train_end": date.fromisoformat,
    "validate_end": date.fromisoformat,
    "llm_temperature": float,
}


def build_backtest_config(raw: dict, overrides: dict) -> wheel_sim.BacktestConfig:
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    for key, value in merged.items():
        if key.startswith("llm.") or key.startswith("costs."):
            continue
        if key not in _CONFIG_FIELDS:
            raise CliError(f"unknown config key {key!r}")
        kwargs[key] = _CONFIG_FIELDS[key](value) if isinstance(value, str) else value
    cost_keys = {k.split(".", 1)[1]: float(v) for k, v in merged.items()
                 if k.startswith("costs.")}
    if cost_keys:
        kwargs["costs"] = wheel_sim.CostModel(**cost_keys)
    missing = [k for k in ("tickers", "start", "end") if k not in kwargs]
    if missing:
        raise CliError(f"config missing required keys: {missing}")
    return wheel_sim.BacktestConfig(**kwargs)


def _make_client(provider: str, seed: int, endpoint: str | None = None):
    if provider == "mock":
        return structure_gen.MockLlmClient(seed=seed)
    if provider == "live":
        # Raises LlmError when WHEELHOUSE_LLM_KEY is unset.
        return structure_gen.HttpLlmClient(endpoint or "https://api.openai.com/v1/completions")
    raise CliError(f"unknown provider {provider!r}")


def _parse_evidence(pairs) -> dict:
    evidence = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise CliError(f"--evidence expects NAME=STATE, got {pair!r}")
        name, _, state = pair.partition("=")
        evidence[name.strip()] = state.strip()
    return evidence


def _context_from_file(path) -> tuple[structure_gen.MarketContext, structure_gen.PsychologicalState]:
    payload = json.loads(Path(path).read_text())
    psych_payload = payload.pop("psych", {})
    payload["date"] = date.fromisoformat(payload["date"])
    context = structure_gen.MarketContext(**payload)
    psych = structure_gen.PsychologicalState(**psych_payload)
    return context, psych


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, out: Path, inputs, extra_config: dict | None = None):
    config = {"command": args.command, **(extra_config or {})}
    data_io.write_manifest(out, config, inputs, getattr(args, "seed", None))


def _load_bars_dir(path, holidays=frozenset()) -> dict:
    bars = {}
    for csv_path in sorted(Path(path).glob("*.csv")):
        series = data_io.load_bars(csv_path, holidays=holidays)
        bars[series.ticker] = series
    if not bars:
        raise CliError(f"no bar CSVs found in {path}")
    return bars


# ---------------------------------------------------------------------------
# Subcommand bodies

def cmd_ingest(args) -> int:
    out = _out_dir(args)
    if args.bars:
        _manifest(args, out, [args.bars], {"kind": "bars"})
        series = data_io.load_bars(args.bars)
        data_io.write_bars_csv(out / f"{series.ticker}.csv", series)
        print(f"{series.ticker}: {len(series.bars)} bars, {len(series.gaps)} calendar gaps")
        return 0
    _manifest(args, out, [args.trades], {"kind": "trades"})
    store = data_io.JsonlStore(out / "trades.jsonl", data_io.TRADE_STORE_SCHEMA)
    schema = cpt_engine.default_factor_schema()
    cpt_engine.write_factor_manifest(out / "factors.json", schema)
    appended = 0
    for line in Path(args.trades).read_text().splitlines():
        if not line.strip():
            continue
        payload = json.loads(line)
        if payload.get("schema"):
            continue
        record = cpt_engine.TradeRecord.from_payload(payload)
        data_io.append_trade(store, record, schema)
        appended += 1
    print(f"appended {appended} records ({len(store)} total)")
    return 0


def cmd_generate(args) -> int:
    out = _out_dir(args)
    _manifest(args, out, [args.context], {"provider": args.provider})
    context, psych = _context_from_file(args.context)
    client = _make_client(args.provider, args.seed, args.endpoint)
    feedback = structure_gen.load_feedback(args.feedback) if args.feedback else ()
    config = structure_gen.GenerationConfig(temperature=args.temperature)
    structure, provenance = structure_gen.generate_with_fallback(
        context, psych, feedback, client, config)
    path = out / "structure.json"
    path.write_text(bn_core.structure_to_json(structure) + "\n")
    print(f"wrote {path} (provenance: {provenance}, edges: {len(structure.edges)})")
    return 0


def cmd_validate(args) -> int:
    out = _out_dir(args)
    _manifest(args, out, [args.structure])
    payload = json.loads(Path(args.structure).read_text())
    structure, report = bn_core.structure_from_payload(payload)
    (out / "validation.json").write_text(json.dumps({
        "valid": report.valid,
        "violations": [
            {"code": f.code, "detail": f.detail, "witness": list(f.witness)}
            for f in report.violations
        ],
    }, indent=2) + "\n")
    if report.valid:
        print("valid")
        return 0
    print(report.summary(), file=sys.stderr)
    return 1


def cmd_populate(args) -> int:
    out = _out_dir(args)
    _manifest(args, out, [args.structure, args.store, args.context])
    structure = bn_core.structure_from_json(Path(args.structure).read_text())
    store = data_io.JsonlStore(args.store, data_io.TRADE_STORE_SCHEMA)
    records = [cpt_engine.TradeRecord.from_payload(row) for row in store.rows()]
    context, _ = _context_from_file(args.context)
    as_of = date.fromisoformat(args.as_of)
    selection = cpt_engine.SelectionPolicy(
        window_days=args.window, min_sample=args.min_sample)
    smoothing = cpt_engine.SmoothingPolicy(pseudo_count=args.pseudo_count)
    result = cpt_engine.populate_network(structure, records, context, as_of,
                                         selection=selection, smoothing=smoothing)
    path = out / "network.json"
    data_io.snapshot_network(result.network, {
        "as_of": as_of.isoformat(),
        "trade_ids": result.provenance,
        "records_used": result.records_used,
        "diagnostics": result.diagnostics,
    }, path)
    print(f"wrote {path} ({result.records_used} records used)")
    return 0


def cmd_infer(args) -> int:
    out = _out_dir(args)
    _manifest(args, out, [args.network])
    network, provenance = data_io.load_network_snapshot(args.network)
    evidence = _parse_evidence(args.evidence)
    if args.query:
        post = inference.posterior(network, args.query, evidence)
        payload = {"query": args.query, "evidence": evidence,
                   "posterior": post.as_dict()}
        (out / "posterior.json").write_text(json.dumps(payload, indent=2) + "\n")
        if args.json:
            print(json.dumps(payload, indent=2))
        else:
            for state, prob in post.as_dict().items():
                print(f"P({args.query}={state} | evidence) = {prob:.4f}")
        return 0
    candidates = []
    for spec in args.candidate or ["0.10:0.10"]:
        otm, _, frac = spec.partition(":")
        candidates.append((float(otm), float(frac)))
    config = inference.DecisionConfig(
        risk_aversion=args.risk_aversion,
        position_cap=max(f for _, f in candidates))
    decision = inference.decide_trade(network, evidence, candidates, config,
                                      network_ref=str(provenance.get("as_of", "")))
    (out / "decision.json").write_text(decision.to_json() + "\n")
    if args.json:
        print(decision.to_json())
    else:
        print(inference.explain_decision(network, evidence, decision))
    return 0


def cmd_backtest(args) -> int:
    out = _out_dir(args)
    raw = _load_config_file(args.config) if args.config else {}
    provider = args.provider or raw.pop("llm.provider", "mock")
    overrides = {"seed": args.seed, "start": args.start, "end": args.end}
    config = build_backtest_config(raw, overrides)
    bar_paths = sorted(Path(args.bars).glob("*.csv"))
    inputs = [args.config] if args.config else []
    _manifest(args, out, inputs + bar_paths, {"backtest": config.to_payload()})
    bars = _load_bars_dir(args.bars)
    initial_records = []
    if args.trades:
        store = data_io.JsonlStore(args.trades, data_io.TRADE_STORE_SCHEMA)
        initial_records = [cpt_engine.TradeRecord.from_payload(r) for r in store.rows()]
    client = _make_client(provider, config.seed)
    engine = wheel_sim.DecisionEngine(client=client, seed=config.seed)
    result = wheel_sim.run_backtest(config, bars, engine, initial_records)

    (out / "result.json").write_text(result.to_json() + "\n")
    (out / "trades.jsonl").write_text(result.trade_log_jsonl())
    with open(out / "equity.csv", "w") as fh:
        fh.write("date,equity\n")
        for d, v in result.equity_curve:
            fh.write(f"{d.isoformat()},{v:.6f}\n")
    if len(result.equity_curve) >= 3:
        try:
            report = metrics_mod.compute_metrics(
                [v for _, v in result.equity_curve], config.risk_free_rate)
            (out / "metrics.json").write_text(report.to_json() + "\n")
        except metrics_mod.MetricsError as exc:
            (out / "metrics.json").write_text(json.dumps({"error": str(exc)}) + "\n")
    print(f"final equity {result.final_equity:,.2f} over {len(result.equity_curve)} days; "
          f"{len(result.trade_log)} events; "
          f"{len(result.audit.violations)} audit violations")
    return 0 if not result.audit.violations else 1


def cmd_analyze(args) -> int:
    out = _out_dir(args)
    if args.mode == "consistency":
        _manifest(args, out, [], {"mode": args.mode})
        report = analysis.consistency_study(
            variations_per_scenario=args.variations, seed=args.seed)
        analysis.write_table(out / "consistency_aggregate", report.aggregate,
                             list(analysis.ConsistencyReport.COLUMNS))
        analysis.write_table(out / "consistency_scenarios", report.per_scenario)
        for row in report.aggregate:
            print(f"{row['Metric']}: mean {row['Mean']:.3f} "
                  f"std {row['Std Dev']:.3f}")
        return 0

    raw = _load_config_file(args.config) if args.config else {}
    raw.pop("llm.provider", None)
    config = build_backtest_config(raw, {"seed": args.seed})
    bars = _load_bars_dir(args.bars)
    bar_paths = sorted(Path(args.bars).glob("*.csv"))
    _manifest(args, out, ([args.config] if args.config else []) + bar_paths,
              {"mode": args.mode})

    if args.mode == "ablation":
        nodes = list(bn_core.DEFAULT_VOCABULARY)
        gen = analysis.default_generator(args.seed)
        scenario = analysis.canonical_scenarios()[0]
        sources = {
            "generated": [gen(scenario.context(), scenario.psych())
                          for _ in range(args.candidates)],
            "random": [analysis.random_structure(nodes, 0.3, args.seed + i)
                       for i in range(args.candidates)],
            "template": [structure_gen.predefined_structure("Neutral")],
        }
        if args.expert:
            if Path(args.expert).exists():
                sources["expert"] = [bn_core.structure_from_json(
                    Path(args.expert).read_text())]
            else:
                sources["expert"] = []
        table = analysis.ablation_run(sources, config, bars)
        analysis.write_table(out / "ablation", table["arms"])
        for row in table["arms"]:
            print(row)
        return 0

    if args.mode == "impact":
        nodes = list(bn_core.DEFAULT_VOCABULARY)
        runs = []
        structures = [analysis.random_structure(nodes, 0.3, args.seed + i)
                      for i in range(args.candidates)]
        for structure in structures:
            result = analysis.run_structure_backtest(structure, config, bars)
            row = analysis._performance_row(result)
            runs.append((structure, row["Annual Return"] or 0.0))
        impact = analysis.edge_impact_analysis(runs)
        analysis.write_table(out / "edge_impact", impact)
        sims, deltas = [], []
        for i in range(len(runs)):
            for j in range(i + 1, len(runs)):
                sims.append(analysis.jaccard_similarity(
                    runs[i][0].edges, runs[j][0].edges))
                deltas.append(runs[i][1] - runs[j][1])
        bins = analysis.reliability_bins(sims, deltas)
        analysis.write_table(out / "reliability", bins)
        print(f"{len(impact)} edges analyzed over {len(runs)} runs")
        return 0

    if args.mode == "sensitivity":
        runner = analysis.default_sensitivity_runner(bars)
        rows = analysis.sensitivity_sweep(config, runner)
        analysis.write_table(out / "sensitivity", rows)
        for row in rows:
            impact = row["Performance Impact"]
            print(f"{row['Parameter']}: {impact['min']:+.4f} .. {impact['max']:+.4f}")
        return 0
    raise CliError(f"unknown analyze mode {args.mode!r}")


def cmd_report(args) -> int:
    out = _out_dir(args)
    _manifest(args, out, [args.result])
    payload = json.loads(Path(args.result).read_text())
    lines = ["Backtest summary", "----------------"]
    for key, value in payload.items():
        if key in ("Yearly", "Audit", "Diagnostics"):
            continue
        lines.append(f"{key}: {value}")
    text = "\n".join(lines)
    (out / "report.txt").write_text(text + "\n")
    if "Yearly" in payload:
        analysis.write_table(out / "yearly", payload["Yearly"])
    print(text)
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wheelhouse",
        description="Context-built Bayesian networks for explained wheel trades",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and normalize bars or trade records")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--bars", help="bar CSV to validate and copy")
    group.add_argument("--trades", help="JSONL of trade records to append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("generate", help="generate a structure from a context file")
    p.add_argument("--context", required=True, help="JSON file with market context")
    p.add_argument("--provider", choices=("mock", "live"), default="mock")
    p.add_argument("--endpoint", help="live completion endpoint URL")
    p.add_argument("--feedback", help="feedback log JSONL for prompt augmentation")
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("validate", help="validate a structure file")
    p.add_argument("--structure", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("populate", help="estimate CPTs for a structure from a trade store")
    p.add_argument("--structure", required=True)
    p.add_argument("--store", required=True, help="trade store JSONL")
    p.add_argument("--context", required=True)
    p.add_argument("--as-of", required=True)
    p.add_argument("--window", type=int, default=252)
    p.add_argument("--min-sample", type=int, default=30)
    p.add_argument("--pseudo-count", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_populate)

    p = sub.add_parser("infer", help="query a populated network or pick a trade")
    p.add_argument("--network", required=True, help="network snapshot JSON")
    p.add_argument("--evidence", action="append", metavar="NAME=STATE")
    p.add_argument("--query", help="posterior for this variable instead of a decision")
    p.add_argument("--candidate", action="append", metavar="OTM:FRACTION")
    p.add_argument("--risk-aversion", type=float, default=1.0)
    p.add_argument("--json", action="store_true", help="machine output")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("backtest", help="run the wheel backtest")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--bars", required=True, help="directory of bar CSVs")
    p.add_argument("--trades", help="initial trade store JSONL")
    p.add_argument("--provider", choices=("mock", "live"))
    p.add_argument("--start")
    p.add_argument("--end")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("analyze", help="consistency, ablation, impact, or sensitivity studies")
    p.add_argument("mode", choices=("consistency", "ablation", "impact", "sensitivity"))
    p.add_argument("--config")
    p.add_argument("--bars")
    p.add_argument("--variations", type=int, default=20)
    p.add_argument("--candidates", type=int, default=50,
                   help="structures per best-of-N arm for ablation and impact")
    p.add_argument("--expert", help="expert structure JSON for the ablation arm")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="render result tables")
    p.add_argument("--result", required=True, help="result JSON from backtest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, bn_core.StructureError, bn_core.CptError,
            cpt_engine.EstimationError, data_io.DataError,
            inference.InferenceError, metrics_mod.MetricsError,
            structure_gen.LlmError, structure_gen.ParseError,
            wheel_sim.BacktestError, wheel_sim.DataGapError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
