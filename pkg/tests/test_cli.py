"""Command surface: exit codes, determinism, output confinement."""
import json
import os
from datetime import date
import pytest

from wheelhouse import data_io
from wheelhouse.cli import main


@pytest.fixture
def context_file(tmp_path):
    payload = {
        "ticker": "TQQQ", "current_price": 42.5, "volatility": 0.55,
        "trend": "down", "vix": 28.0, "market_regime": "Bear",
        "avg_daily_volume": 5_000_000, "date": "2021-03-01",
        "psych": {"stress_level": 0.7},
    }
    path = tmp_path / "context.json"
    path.write_text(json.dumps(payload))
    return path


@pytest.fixture
def flat_bars_dir(tmp_path):
    bars_dir = tmp_path / "bars"
    bars_dir.mkdir()
    series = data_io.flat_bars("FLAT", date(2022, 1, 3), 50, 100.0)
    data_io.write_bars_csv(bars_dir / "flat.csv", series)
    return bars_dir


def backtest_config_file(tmp_path):
    path = tmp_path / "bt.cfg"
    path.write_text(
        "# single-cycle fixture\n"
        "tickers=FLAT\n"
        "start=2022-02-07\n"
        "end=2022-03-11\n"
        "expiry_cycle=monthly\n"
        "min_pricing_vol=0.25\n"
        "llm.provider=mock\n")
    return path


class TestGenerate:
    def test_deterministic_bytes_across_runs(self, tmp_path, context_file):
        rc1 = main(["generate", "--context", str(context_file), "--seed", "7",
                    "--out", str(tmp_path / "g1")])
        rc2 = main(["generate", "--context", str(context_file), "--seed", "7",
                    "--out", str(tmp_path / "g2")])
        assert rc1 == rc2 == 0
        a = (tmp_path / "g1" / "structure.json").read_bytes()
        b = (tmp_path / "g2" / "structure.json").read_bytes()
        assert a == b

    def test_seed_required(self, tmp_path, context_file, capsys):
        rc = main(["generate", "--context", str(context_file),
                   "--out", str(tmp_path / "g")])
        assert rc == 2

    def test_live_provider_refused_without_key(self, tmp_path, context_file,
                                               monkeypatch, capsys):
        monkeypatch.delenv("WHEELHOUSE_LLM_KEY", raising=False)
        rc = main(["generate", "--context", str(context_file), "--seed", "1",
                   "--provider", "live", "--out", str(tmp_path / "g")])
        assert rc == 1
        assert "WHEELHOUSE_LLM_KEY" in capsys.readouterr().err

    def test_manifest_written_first(self, tmp_path, context_file):
        out = tmp_path / "g"
        main(["generate", "--context", str(context_file), "--seed", "7",
              "--out", str(out)])
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 7
        assert str(context_file) in manifest["inputs"]


class TestValidate:
    def test_cyclic_structure_exit_one_names_cycle(self, tmp_path, capsys):
        path = tmp_path / "cyc.json"
        path.write_text(json.dumps(
            {"nodes": ["A", "B"], "edges": [["A", "B"], ["B", "A"]],
             "reasoning": ""}))
        rc = main(["validate", "--structure", str(path),
                   "--out", str(tmp_path / "v")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "cycle" in err
        report = json.loads((tmp_path / "v" / "validation.json").read_text())
        assert not report["valid"]
        assert any(f["code"] == "cycle" for f in report["violations"])

    def test_valid_structure_exit_zero(self, tmp_path):
        path = tmp_path / "ok.json"
        path.write_text(json.dumps(
            {"nodes": ["A", "B"], "edges": [["A", "B"]], "reasoning": "r"}))
        rc = main(["validate", "--structure", str(path),
                   "--out", str(tmp_path / "v")])
        assert rc == 0


class TestBacktestCli:
    def test_flat_fixture_single_trade(self, tmp_path, flat_bars_dir, capsys):
        out = tmp_path / "bt"
        rc = main(["backtest", "--config", str(backtest_config_file(tmp_path)),
                   "--bars", str(flat_bars_dir), "--seed", "3",
                   "--out", str(out)])
        assert rc == 0
        result = json.loads((out / "result.json").read_text())
        assert result["Put Trades Sold"] == 1
        assert result["Puts Expired Worthless"]["count"] == 1
        assert result["Look-Ahead Violations"] == 0
        trades = (out / "trades.jsonl").read_text().strip().splitlines()
        assert len(trades) == 2
        equity = (out / "equity.csv").read_text().splitlines()
        assert equity[0] == "date,equity"

    def test_outputs_confined_to_out_dir(self, tmp_path, flat_bars_dir):
        out = tmp_path / "bt"
        config = backtest_config_file(tmp_path)
        before = set(tmp_path.iterdir()) | set(flat_bars_dir.iterdir())
        main(["backtest", "--config", str(config),
              "--bars", str(flat_bars_dir), "--seed", "3", "--out", str(out)])
        after = (set(tmp_path.iterdir()) | set(flat_bars_dir.iterdir())) - {out}
        assert before == after

    def test_missing_config_keys_domain_error(self, tmp_path, flat_bars_dir, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("tickers=FLAT\n")
        rc = main(["backtest", "--config", str(cfg), "--bars",
                   str(flat_bars_dir), "--seed", "1", "--out", str(tmp_path / "o")])
        assert rc == 1


class TestPopulateInfer:
    def seed_store(self, tmp_path):
        store_path = tmp_path / "trades.jsonl"
        store = data_io.JsonlStore(store_path, data_io.TRADE_STORE_SCHEMA)
        from test_cpt_engine import reference_cell_store
        for record in reference_cell_store():
            store.append(record.to_payload())
        return store_path

    def context_file(self, tmp_path):
        payload = {
            "ticker": "TQQQ", "current_price": 40.0, "volatility": 0.55,
            "trend": "down", "vix": 30.0, "market_regime": "Bear",
            "avg_daily_volume": 4_000_000, "date": "2024-12-02",
        }
        path = tmp_path / "ctx.json"
        path.write_text(json.dumps(payload))
        return path

    def structure_file(self, tmp_path):
        path = tmp_path / "structure.json"
        path.write_text(json.dumps({
            "nodes": ["Market_Regime", "Strike_Selection",
                      "Assignment_Probability", "Trade_Outcome"],
            "edges": [["Market_Regime", "Assignment_Probability"],
                      ["Strike_Selection", "Assignment_Probability"],
                      ["Assignment_Probability", "Trade_Outcome"]],
            "reasoning": "test",
        }))
        return path

    def test_populate_then_infer_round_trip(self, tmp_path, capsys):
        store = self.seed_store(tmp_path)
        rc = main(["populate", "--structure", str(self.structure_file(tmp_path)),
                   "--store", str(store), "--context", str(self.context_file(tmp_path)),
                   "--as-of", "2024-12-02", "--min-sample", "1",
                   "--pseudo-count", "0", "--out", str(tmp_path / "pop")])
        assert rc == 0
        network_path = tmp_path / "pop" / "network.json"
        assert network_path.exists()

        rc = main(["infer", "--network", str(network_path),
                   "--evidence", "Market_Regime=Bear",
                   "--query", "Assignment_Probability", "--json",
                   "--out", str(tmp_path / "inf")])
        assert rc == 0
        payload = json.loads((tmp_path / "inf" / "posterior.json").read_text())
        assert payload["evidence"] == {"Market_Regime": "Bear"}
        assert sum(payload["posterior"].values()) == pytest.approx(1.0)

    def test_infer_decision_prints_explanation(self, tmp_path, capsys):
        store = self.seed_store(tmp_path)
        main(["populate", "--structure", str(self.structure_file(tmp_path)),
              "--store", str(store), "--context", str(self.context_file(tmp_path)),
              "--as-of", "2024-12-02", "--min-sample", "1",
              "--out", str(tmp_path / "pop")])
        capsys.readouterr()
        rc = main(["infer", "--network", str(tmp_path / "pop" / "network.json"),
                   "--evidence", "Market_Regime=Bear",
                   "--candidate", "0.02:0.10", "--candidate", "0.12:0.10",
                   "--out", str(tmp_path / "inf")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "Decision: sell_put" in out
        assert "assignment risk" in out
        decision = json.loads((tmp_path / "inf" / "decision.json").read_text())
        assert decision["strike_otm_pct"] == 0.12

    def test_bad_evidence_flag(self, tmp_path, capsys):
        store = self.seed_store(tmp_path)
        main(["populate", "--structure", str(self.structure_file(tmp_path)),
              "--store", str(store), "--context", str(self.context_file(tmp_path)),
              "--as-of", "2024-12-02", "--out", str(tmp_path / "pop")])
        rc = main(["infer", "--network", str(tmp_path / "pop" / "network.json"),
                   "--evidence", "MarketRegimeBear",
                   "--out", str(tmp_path / "inf")])
        assert rc == 1


class TestAnalyzeCli:
    def test_consistency_smoke(self, tmp_path):
        rc = main(["analyze", "consistency", "--variations", "4",
                   "--seed", "5", "--out", str(tmp_path / "a")])
        assert rc == 0
        rows = json.loads((tmp_path / "a" / "consistency_aggregate.json").read_text())
        metrics = {r["Metric"] for r in rows}
        assert {"Structural Similarity", "Edge Overlap", "Node Overlap"} <= metrics
        assert (tmp_path / "a" / "consistency_aggregate.csv").exists()

    def test_sensitivity_smoke(self, tmp_path, flat_bars_dir):
        rc = main(["analyze", "sensitivity",
                   "--config", str(backtest_config_file(tmp_path)),
                   "--bars", str(flat_bars_dir),
                   "--seed", "5", "--out", str(tmp_path / "s")])
        assert rc == 0
        rows = json.loads((tmp_path / "s" / "sensitivity.json").read_text())
        assert [r["Parameter"] for r in rows] == [
            "Position Size Limit", "Premium Threshold",
            "Rolling Criteria", "Temperature"]


class TestIngestAndReport:
    def test_ingest_bars(self, tmp_path, flat_bars_dir):
        rc = main(["ingest", "--bars", str(flat_bars_dir / "flat.csv"),
                   "--out", str(tmp_path / "ing")])
        assert rc == 0
        assert (tmp_path / "ing" / "FLAT.csv").exists()

    def test_ingest_trades_round_trip_from_backtest(self, tmp_path, flat_bars_dir):
        out = tmp_path / "bt"
        main(["backtest", "--config", str(backtest_config_file(tmp_path)),
              "--bars", str(flat_bars_dir), "--seed", "3", "--out", str(out)])
        rc = main(["ingest", "--trades", str(out / "trades.jsonl"),
                   "--out", str(tmp_path / "store")])
        assert rc == 0
        store = data_io.open_trade_store(tmp_path / "store" / "trades.jsonl")
        assert len(store) == 2
        assert (tmp_path / "store" / "factors.json").exists()

    def test_report_renders(self, tmp_path, flat_bars_dir, capsys):
        out = tmp_path / "bt"
        main(["backtest", "--config", str(backtest_config_file(tmp_path)),
              "--bars", str(flat_bars_dir), "--seed", "3", "--out", str(out)])
        capsys.readouterr()
        rc = main(["report", "--result", str(out / "result.json"),
                   "--out", str(tmp_path / "rep")])
        assert rc == 0
        text = (tmp_path / "rep" / "report.txt").read_text()
        assert "Final Portfolio Value" in text

    def test_usage_error_exit_two(self):
        assert main(["no-such-command"]) == 2
        assert main([]) == 2
