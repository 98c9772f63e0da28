"""Consistency, ablation, edge impact, reliability bins, sensitivity."""
import random
from datetime import date

import pytest

from wheelhouse import analysis, bn_core, data_io, wheel_sim
from wheelhouse.analysis import (ConsistencyReport, ablation_run,
                                 canonical_scenarios, consistency_study,
                                 edge_impact_analysis, jaccard_similarity,
                                 random_structure, reliability_bins,
                                 sensitivity_sweep)
from wheelhouse.bn_core import NetworkStructure
from wheelhouse.cpt_engine import SelectionPolicy, TradeRecord
from wheelhouse.structure_gen import predefined_structure

from conftest import trading_days_from


class TestJaccard:
    def test_identity_disjoint_and_hand_case(self):
        a = {("A", "B"), ("B", "C")}
        assert jaccard_similarity(a, set(a)) == 1.0
        assert jaccard_similarity(a, {("X", "Y")}) == 0.0
        # intersection 1, union 3
        b = {("A", "B"), ("A", "C")}
        assert jaccard_similarity(a, b) == pytest.approx(1 / 3)

    def test_both_empty_is_one(self):
        assert jaccard_similarity(set(), set()) == 1.0

    def test_symmetry_and_triangle_on_random_triples(self):
        rng = random.Random(77)
        universe = [(f"N{i}", f"N{j}") for i in range(5) for j in range(5) if i != j]
        for _ in range(100):
            sets = [frozenset(rng.sample(universe, rng.randrange(0, 8)))
                    for _ in range(3)]
            a, b, c = sets
            assert jaccard_similarity(a, b) == jaccard_similarity(b, a)
            dab = 1 - jaccard_similarity(a, b)
            dbc = 1 - jaccard_similarity(b, c)
            dac = 1 - jaccard_similarity(a, c)
            assert dac <= dab + dbc + 1e-12


class TestScenarios:
    def test_twenty_five_canonical(self):
        scenarios = canonical_scenarios()
        assert len(scenarios) == 25
        ids = [s.scenario_id for s in scenarios]
        assert len(set(ids)) == 25
        assert "bull-low-stressed" not in ids
        assert "bear-high-confident" not in ids

    def test_scenario_contexts_are_valid(self):
        for scenario in canonical_scenarios():
            context = scenario.context()
            assert context.market_regime == scenario.market_regime
            psych = scenario.psych()
            assert 0 <= psych.stress_level <= 1


class TestConsistencyStudy:
    def test_deterministic_generator_all_ones_zero_variance(self):
        fixed = predefined_structure("Neutral")

        def factory(seed):
            return lambda context, psych: fixed

        report = consistency_study(
            canonical_scenarios()[:5], variations_per_scenario=6,
            generator_factory=factory, seed=1,
            performance_fn=lambda s: float(len(s.edges)))
        for metric in ("Structural Similarity", "Edge Overlap", "Node Overlap"):
            row = report.aggregate_row(metric)
            assert row["Mean"] == 1.0
            assert row["Std Dev"] == 0.0
            assert row["Coefficient of Variation"] == 0.0
        perf = report.aggregate_row("Performance Variance")
        assert perf["Mean"] == 0.0

    def test_alternating_generator_hand_computed_mean(self):
        x = NetworkStructure(["A", "B", "C"], [("A", "B"), ("B", "C")])
        y = NetworkStructure(["A", "B", "C"], [("A", "B"), ("A", "C")])

        def factory(seed):
            choice = x if seed % 2 == 0 else y
            return lambda context, psych: choice

        report = consistency_study(
            canonical_scenarios()[:1], variations_per_scenario=20,
            generator_factory=factory, seed=0)
        # 10 of each: same-pair count 2 * C(10,2) = 90 at J=1,
        # cross pairs 100 at J=1/3 over 190 total pairs.
        expected = (90 * 1.0 + 100 * (1 / 3)) / 190
        row = report.aggregate_row("Structural Similarity")
        assert row["Mean"] == pytest.approx(expected, abs=1e-12)

    def test_report_has_cov_column(self):
        assert "Coefficient of Variation" in ConsistencyReport.COLUMNS
        report = consistency_study(
            canonical_scenarios()[:2], variations_per_scenario=4, seed=3)
        for row in report.aggregate:
            assert set(row) == set(ConsistencyReport.COLUMNS)

    def test_mock_generation_never_aborts(self):
        report = consistency_study(
            canonical_scenarios()[:3], variations_per_scenario=5, seed=9)
        assert len(report.per_scenario) == 3
        for row in report.per_scenario:
            assert 0.0 <= row["jaccard_mean"] <= 1.0


class TestRandomStructure:
    def test_zero_probability_empty_edges(self):
        structure = random_structure(["A", "B", "C"], 0.0, seed=1)
        assert structure.edges == ()
        assert bn_core.validate_structure(structure).valid

    def test_probability_one_complete_dag(self):
        structure = random_structure(["A", "B", "C"], 1.0, seed=2)
        assert len(structure.edges) == 3
        assert bn_core.validate_structure(structure).valid

    def test_seed_sweep_always_valid(self):
        nodes = list(bn_core.DEFAULT_VOCABULARY)
        for seed in range(200):
            structure = random_structure(nodes, 0.3, seed)
            assert bn_core.validate_structure(structure).valid

    def test_deterministic_per_seed(self):
        nodes = ["A", "B", "C", "D"]
        assert random_structure(nodes, 0.5, 7) == random_structure(nodes, 0.5, 7)
        assert random_structure(nodes, 0.5, 7) != random_structure(nodes, 0.5, 8)

    def test_empty_nodes_rejected(self):
        with pytest.raises(ValueError):
            random_structure([], 0.5, 0)


def informative_edge_store(start=date(2024, 1, 2)):
    """Aggressive strikes look profitable but carry near-certain assignment."""
    days = trading_days_from(start, 230)
    shapes = {
        "Aggressive": {("High", "Profit"): 360, ("High", "Loss"): 90,
                       ("Low", "Profit"): 40, ("Low", "Loss"): 10},
        "Conservative": {("Low", "Profit"): 238, ("Low", "Loss"): 237,
                         ("High", "Profit"): 12, ("High", "Loss"): 13},
    }
    records = []
    idx = 0
    for sel, cells in sorted(shapes.items()):
        for (assign, outcome), count in sorted(cells.items()):
            for _ in range(count):
                records.append(TradeRecord(
                    trade_id=f"s{idx:05d}", date=days[idx % len(days)],
                    ticker="EDGE", action="sell_put", strike=50.0, premium=1.0,
                    contracts=1, outcome=None,
                    factors={
                        "Market_Regime": "Neutral",
                        "Strike_Selection": sel,
                        "Assignment_Probability": assign,
                        "Trade_Outcome": outcome,
                    }))
                idx += 1
    return records


def crash_then_flat_series():
    closes = [50.0] * 6
    price = 50.0
    for _ in range(5):
        price = round(price * 0.96, 6)
        closes.append(price)
    closes += [price] * 25
    days = trading_days_from(date(2024, 4, 1), len(closes))
    bars = [data_io.Bar(d, c, c, c, c, c, 2_000_000.0)
            for d, c in zip(days, closes)]
    return data_io.BarSeries("EDGE", bars)


def ablation_config(series):
    return wheel_sim.BacktestConfig(
        tickers=("EDGE",), start=series.bars[6].date, end=series.bars[-1].date,
        min_pricing_vol=0.30, seed=5,
        candidate_otm=(0.02, 0.12), candidate_fractions=(0.10,))


class TestAblation:
    def test_identical_structure_identical_rows(self):
        series = crash_then_flat_series()
        config = ablation_config(series)
        structure = predefined_structure("Neutral")
        table = ablation_run(
            {"generated": [structure], "template": [structure]},
            config, {"EDGE": series})
        rows = {row["Network Type"]: row for row in table["arms"]}
        for key in ("Annual Return", "Sharpe Ratio", "Max Drawdown"):
            assert rows["generated"][key] == rows["template"][key]

    def test_parity_digests_match_across_arms(self):
        series = crash_then_flat_series()
        config = ablation_config(series)
        structure = predefined_structure("Neutral")
        table = ablation_run(
            {"a": [structure], "b": [structure]}, config, {"EDGE": series})
        digests = {(row["config_digest"], row["bars_digest"])
                   for row in table["arms"]}
        assert len(digests) == 1

    def test_missing_arm_reports_skip(self):
        series = crash_then_flat_series()
        config = ablation_config(series)
        table = ablation_run({"expert": []}, config, {"EDGE": series})
        assert table["arms"][0]["skipped"]

    def test_output_schema_columns(self):
        series = crash_then_flat_series()
        config = ablation_config(series)
        table = ablation_run(
            {"template": [predefined_structure("Neutral")]},
            config, {"EDGE": series})
        row = table["arms"][0]
        for column in ("Annual Return", "Sharpe Ratio", "Max Drawdown"):
            assert column in row

    def test_strike_risk_edges_beat_blind_structures(self):
        # With assignment risk wired to strike selection, the engine avoids
        # tight strikes on a declining tape; a structure blind to that link
        # chases the richer-looking aggressive bucket and bleeds roll costs.
        series = crash_then_flat_series()
        config = ablation_config(series)
        records = informative_edge_store()
        informed = predefined_structure("Neutral")
        blind = NetworkStructure(
            ["Market_Regime", "Volatility_Level", "Strike_Selection",
             "Assignment_Probability", "Trade_Outcome"],
            [("Strike_Selection", "Trade_Outcome")])
        selection = SelectionPolicy(match_keys=(), min_sample=1)

        def run(structure):
            engine = analysis.FixedStructureEngine(
                structure, seed=config.seed, selection=selection)
            return wheel_sim.run_backtest(config, {"EDGE": series}, engine,
                                          records)

        informed_result = run(informed)
        blind_result = run(blind)
        informed_strike = [r for r in informed_result.trade_log
                           if r.action == "sell_put"][0].strike
        blind_strike = [r for r in blind_result.trade_log
                        if r.action == "sell_put"][0].strike
        assert informed_strike < blind_strike  # 12% OTM vs 2% OTM
        assert informed_result.final_equity > blind_result.final_equity


class TestEdgeImpact:
    def test_everywhere_edge_is_uninformative(self):
        s1 = NetworkStructure(["A", "B"], [("A", "B")])
        s2 = NetworkStructure(["A", "B"], [("A", "B")])
        rows = edge_impact_analysis([(s1, 0.10), (s2, 0.05)])
        assert rows == [{
            "Edge Type": "A -> B",
            "Frequency in High-Performers": 1.0,
            "Frequency in Low-Performers": 1.0,
            "Performance Impact": 0.0,
        }]

    def test_top_half_only_edge(self):
        winner = NetworkStructure(["A", "B"], [("A", "B")])
        loser = NetworkStructure(["A", "B"], [])
        rows = edge_impact_analysis(
            [(winner, 0.2), (winner, 0.18), (loser, 0.01), (loser, 0.0)])
        row = rows[0]
        assert row["Edge Type"] == "A -> B"
        assert row["Frequency in High-Performers"] == 1.0
        assert row["Frequency in Low-Performers"] == 0.0
        assert row["Performance Impact"] == pytest.approx(0.19 - 0.005)

    def test_known_edge_names_surface(self):
        s = predefined_structure("Neutral")
        rows = edge_impact_analysis([(s, 0.1), (s, 0.2)])
        names = {row["Edge Type"] for row in rows}
        assert "Volatility_Level -> Strike_Selection" in names
        assert "Market_Regime -> Assignment_Probability" in names

    def test_needs_two_runs(self):
        with pytest.raises(ValueError):
            edge_impact_analysis([(predefined_structure("Bull"), 0.1)])


class TestReliabilityBins:
    def test_all_in_top_bin(self):
        rows = reliability_bins([0.95] * 10, [0.01] * 10)
        top = rows[0]
        assert top["Similarity Range"] == "0.9-1.0 (High)"
        assert top["Frequency"] == 1.0
        assert top["Performance Impact"] == pytest.approx(0.01)
        assert sum(row["Frequency"] for row in rows) == pytest.approx(1.0)

    def test_uniform_spread_shares_match_widths(self):
        sims = [0.6 + 0.4 * (i + 0.5) / 1000 for i in range(1000)]
        rows = reliability_bins(sims, [0.0] * 1000)
        # Counting oracle per bin.
        for row, (lo, hi) in zip(rows, [(0.9, 1.0), (0.8, 0.9), (0.7, 0.8), (0.6, 0.7)]):
            expected = sum(1 for s in sims if lo <= s < hi or (hi == 1.0 and s == 1.0))
            assert row["Frequency"] == pytest.approx(expected / 1000)
            assert row["Frequency"] == pytest.approx(0.25, abs=0.01)

    def test_schema_columns(self):
        rows = reliability_bins([0.85], [0.002])
        assert set(rows[0]) == {"Similarity Range", "Performance Impact",
                                "Frequency", "Deployment Risk"}
        assert [r["Deployment Risk"] for r in rows] == [
            "Low", "Low-Medium", "Medium", "High"]

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            reliability_bins([1.2], [0.0])
        with pytest.raises(ValueError):
            reliability_bins([0.5], [0.0, 0.1])


class TestSensitivity:
    def test_single_point_grid_zero_deviation(self):
        config = wheel_sim.BacktestConfig(
            tickers=("X",), start=date(2024, 1, 2), end=date(2024, 3, 1))
        calls = []

        def runner(cfg):
            calls.append(cfg)
            return cfg.position_size_limit * 10

        rows = sensitivity_sweep(
            config, runner,
            parameters=(("Position Size Limit", "position_size_limit", (0.10,)),))
        assert rows[0]["Performance Impact"] == {"min": 0.0, "max": 0.0}

    def test_two_point_grid_equals_run_difference(self):
        config = wheel_sim.BacktestConfig(
            tickers=("X",), start=date(2024, 1, 2), end=date(2024, 3, 1),
            position_size_limit=0.10)

        def runner(cfg):
            return cfg.position_size_limit * 10

        rows = sensitivity_sweep(
            config, runner,
            parameters=(("Position Size Limit", "position_size_limit",
                         (0.05, 0.20)),))
        impact = rows[0]["Performance Impact"]
        assert impact["min"] == pytest.approx(0.5 - 1.0)
        assert impact["max"] == pytest.approx(2.0 - 1.0)

    def test_default_grid_has_four_parameters(self):
        labels = [label for label, _, _ in analysis.SENSITIVITY_PARAMETERS]
        assert labels == ["Position Size Limit", "Premium Threshold",
                          "Rolling Criteria", "Temperature"]

    def test_rows_named_per_parameter(self):
        config = wheel_sim.BacktestConfig(
            tickers=("X",), start=date(2024, 1, 2), end=date(2024, 3, 1))
        rows = sensitivity_sweep(config, lambda cfg: 0.0)
        assert [r["Parameter"] for r in rows] == [
            "Position Size Limit", "Premium Threshold",
            "Rolling Criteria", "Temperature"]
        assert rows[0]["Range Tested"] == "0.05-0.2"


class TestWriteTable:
    def test_csv_and_json_emitted(self, tmp_path):
        rows = [{"Parameter": "x", "Value": 1}, {"Parameter": "y", "Value": 2}]
        csv_path, json_path = analysis.write_table(tmp_path / "table", rows)
        assert csv_path.exists() and json_path.exists()
        content = csv_path.read_text().splitlines()
        assert content[0] == "Parameter,Value"
        assert len(content) == 3
