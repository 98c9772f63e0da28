"""Prompting, response parsing, fallback chain, and the feedback loop."""
import json
import random
import string
from datetime import date

import pytest

from wheelhouse import bn_core, structure_gen
from wheelhouse.structure_gen import (FeedbackRecord, GenerationConfig,
                                      LlmError, MarketContext, MockLlmClient,
                                      ParseError, PsychologicalState,
                                      ScriptedLlmClient, construct_prompt,
                                      generate_with_fallback,
                                      parse_llm_response, parse_structured_text,
                                      predefined_structure, template_structure)


def bear_context(**overrides):
    base = dict(ticker="TQQQ", current_price=42.5, volatility=0.55, trend="down",
                vix=28.0, market_regime="Bear", avg_daily_volume=5_000_000,
                date=date(2021, 3, 1))
    base.update(overrides)
    return MarketContext(**base)


NEUTRAL_PSYCH = PsychologicalState()


class TestConstructPrompt:
    def test_contains_json_only_requirement(self):
        prompt = construct_prompt(bear_context(), NEUTRAL_PSYCH)
        assert "Output ONLY valid JSON format" in prompt

    def test_contains_all_context_fields(self):
        prompt = construct_prompt(bear_context(), NEUTRAL_PSYCH)
        for fragment in ("Ticker: TQQQ", "Current Price: $42.50",
                         "Volatility: 0.55", "Trend: down", "VIX: 28.00",
                         "Market Regime: Bear", "Average Daily Volume: 5000000",
                         "Date: 2021-03-01"):
            assert fragment in prompt

    def test_psych_fields_two_decimals(self):
        prompt = construct_prompt(
            bear_context(), PsychologicalState(0.0, 0.0, 0.0, 0.0))
        assert "FOMO Level: 0.00" in prompt
        assert "Stress: 0.00" in prompt

    def test_byte_identical_for_identical_inputs(self):
        a = construct_prompt(bear_context(), NEUTRAL_PSYCH)
        b = construct_prompt(bear_context(), NEUTRAL_PSYCH)
        assert a == b

    def test_feedback_digest_present_and_absent(self):
        record = FeedbackRecord("t1", "sell_put TQQQ strike 38", "Loss",
                                {"Volatility_Level": "High"}, "rolled too late")
        with_fb = construct_prompt(bear_context(), NEUTRAL_PSYCH, [record])
        assert "RECENT TRADE FEEDBACK" in with_fb
        assert "Volatility_Level=High" in with_fb
        without = construct_prompt(bear_context(), NEUTRAL_PSYCH, [record], digest_k=0)
        assert "RECENT TRADE FEEDBACK" not in without
        empty = construct_prompt(bear_context(), NEUTRAL_PSYCH, [])
        assert "RECENT TRADE FEEDBACK" not in empty

    def test_digest_keeps_most_recent_first(self):
        records = [FeedbackRecord(f"t{i}", f"trade {i}", "Profit", {})
                   for i in range(15)]
        digest = structure_gen.feedback_digest(records, k=10)
        lines = digest.splitlines()
        assert len(lines) == 10
        assert "trade 14" in lines[0]
        assert "trade 5" in lines[-1]


class TestParsing:
    def test_json_document(self):
        structure = parse_llm_response(
            '{"nodes": ["A", "B"], "edges": [["A", "B"]], "reasoning": "x"}')
        assert structure.nodes == ("A", "B")
        assert structure.edges == (("A", "B"),)
        assert structure.reasoning == "x"

    @pytest.mark.parametrize("text,expected", [
        ("Volatility influences Strike_Selection",
         ("Volatility", "Strike_Selection")),
        ("Volatility affects Strike_Selection",
         ("Volatility", "Strike_Selection")),
        ("Volatility causes Strike_Selection",
         ("Volatility", "Strike_Selection")),
        ("Volatility -> Strike_Selection",
         ("Volatility", "Strike_Selection")),
    ])
    def test_each_edge_pattern(self, text, expected):
        structure = parse_llm_response(text)
        assert structure.edges == (expected,)

    def test_verbs_case_insensitive(self):
        structure = parse_structured_text("a INFLUENCES b. c Affects d.")
        assert structure.edges == (("a", "b"), ("c", "d"))

    def test_unicode_arrow_same_edge(self):
        ascii_arrow = parse_structured_text("A -> B")
        unicode_arrow = parse_structured_text("A → B")
        assert ascii_arrow.edges == unicode_arrow.edges == (("A", "B"),)
        both = parse_structured_text("A -> B and A → B")
        assert both.edges == (("A", "B"),)

    def test_multiple_sentences(self):
        structure = parse_structured_text("A causes B. B affects C.")
        assert structure.edges == (("A", "B"), ("B", "C"))
        assert structure.nodes == ("A", "B", "C")

    def test_node_list_line_without_edges(self):
        structure = parse_llm_response("nodes: A, B, C")
        assert structure.nodes == ("A", "B", "C")
        assert structure.edges == ()
        assert bn_core.validate_structure(structure).valid

    def test_json_precedence_over_surrounding_arrows(self):
        response = (
            "X -> Y outside\n"
            '{"nodes": ["A", "B"], "edges": [["A", "B"]], "reasoning": "r"}\n'
            "P -> Q also outside")
        structure = parse_llm_response(response)
        assert structure.edges == (("A", "B"),)

    def test_cyclic_json_reports_cycle_and_both_diagnostics(self):
        with pytest.raises(ParseError) as exc:
            parse_llm_response('{"nodes":["A","B"],"edges":[["A","B"],["B","A"]]}')
        err = exc.value
        assert any(f.code == "cycle" for f in err.findings)
        assert err.json_diagnostic
        assert err.text_diagnostic

    def test_unparseable_carries_both_diagnostics(self):
        with pytest.raises(ParseError) as exc:
            parse_llm_response("nothing structured here")
        assert exc.value.json_diagnostic
        assert exc.value.text_diagnostic

    def test_text_with_cycle_is_rejected(self):
        with pytest.raises(ParseError):
            parse_llm_response("A -> B. B -> A.")

    def test_round_trip_reparses_structurally_equal(self):
        for response in (
            '{"nodes": ["A", "B"], "edges": [["A", "B"]], "reasoning": "x"}',
            "A causes B. B affects C.",
            "nodes: P, Q",
        ):
            structure = parse_llm_response(response)
            again = parse_llm_response(bn_core.structure_to_json(structure))
            assert again.nodes == structure.nodes
            assert again.edges == structure.edges

    def test_fuzz_totality(self):
        # Any input either parses to a valid structure or raises ParseError.
        rng = random.Random(1234)
        alphabet = string.printable + "{}[]→"
        for _ in range(2000):
            text = "".join(rng.choice(alphabet)
                           for _ in range(rng.randrange(0, 120)))
            try:
                structure = parse_llm_response(text)
            except ParseError:
                continue
            assert bn_core.validate_structure(structure).valid

    def test_extract_json_span_handles_nesting_and_strings(self):
        text = 'prefix {"a": {"b": "}"}, "c": 1} suffix'
        assert structure_gen.extract_json_span(text) == '{"a": {"b": "}"}, "c": 1}'
        assert structure_gen.extract_json_span("no braces") is None


class TestFallbackChain:
    def test_happy_path_single_call(self):
        client = ScriptedLlmClient(
            ['{"nodes": ["A", "B"], "edges": [["A", "B"]], "reasoning": "ok"}'])
        structure, provenance = generate_with_fallback(
            bear_context(), NEUTRAL_PSYCH, (), client)
        assert provenance == "llm"
        assert client.calls == 1

    def test_always_failing_client_exhausts_retries(self):
        client = ScriptedLlmClient([LlmError("down")] * 10)
        structure, provenance = generate_with_fallback(
            bear_context(), NEUTRAL_PSYCH, (), client,
            GenerationConfig(max_retries=3))
        assert client.calls == 3
        assert provenance in ("template", "predefined")
        assert bn_core.validate_structure(structure).valid

    def test_cyclic_responses_count_attempts(self):
        cyclic = '{"nodes":["A","B"],"edges":[["A","B"],["B","A"]]}'
        client = ScriptedLlmClient([cyclic] * 10)
        structure, provenance = generate_with_fallback(
            bear_context(), NEUTRAL_PSYCH, (), client,
            GenerationConfig(max_retries=4))
        assert client.calls == 4
        assert provenance in ("template", "predefined")
        assert bn_core.validate_structure(structure).valid

    def test_zero_retries_goes_straight_to_template(self):
        client = ScriptedLlmClient(["ignored"])
        structure, provenance = generate_with_fallback(
            bear_context(), NEUTRAL_PSYCH, (), client,
            GenerationConfig(max_retries=0))
        assert client.calls == 0
        assert provenance in ("template", "predefined")


class TestTemplates:
    def test_high_impact_edges_in_every_regime(self):
        for regime in ("Bull", "Neutral", "Bear"):
            structure = predefined_structure(regime)
            assert bn_core.validate_structure(structure).valid
            assert ("Volatility_Level", "Strike_Selection") in structure.edges
            assert ("Market_Regime", "Assignment_Probability") in structure.edges

    def test_bear_adds_technical_premium_edge(self):
        assert ("Technical_Position", "Premium_Rate") in predefined_structure("Bear").edges
        assert ("Technical_Position", "Premium_Rate") not in predefined_structure("Bull").edges

    def test_unknown_regime_is_total(self):
        structure = predefined_structure("Sideways")
        assert bn_core.validate_structure(structure).valid

    def test_template_is_deterministic(self):
        a = template_structure(bear_context(), NEUTRAL_PSYCH)
        b = template_structure(bear_context(), NEUTRAL_PSYCH)
        assert a == b

    def test_template_stress_edge(self):
        stressed = template_structure(
            bear_context(), PsychologicalState(stress_level=0.8))
        assert ("Psychological_State", "Risk_Tolerance") in stressed.edges
        calm = template_structure(
            bear_context(), PsychologicalState(stress_level=0.2))
        assert ("Psychological_State", "Risk_Tolerance") not in calm.edges

    def test_template_tracks_volatility_tercile(self):
        high = template_structure(bear_context(volatility=0.55))
        low = template_structure(bear_context(volatility=0.10))
        assert ("Volatility_Level", "Assignment_Probability") in high.edges
        assert ("Volatility_Level", "Assignment_Probability") not in low.edges


class TestMockClient:
    def test_deterministic_given_prompt_and_seed(self):
        prompt = construct_prompt(bear_context(), NEUTRAL_PSYCH)
        config = GenerationConfig()
        assert (MockLlmClient(seed=3).complete(prompt, config)
                == MockLlmClient(seed=3).complete(prompt, config))

    def test_variability_changes_output_across_seeds(self):
        prompt = construct_prompt(bear_context(), NEUTRAL_PSYCH)
        config = GenerationConfig()
        outputs = {MockLlmClient(seed=s, variability=3).complete(prompt, config)
                   for s in range(8)}
        assert len(outputs) > 1


class TestFeedback:
    def test_profit_label_round_trip(self, tmp_path):
        store = structure_gen.open_feedback_log(tmp_path / "feedback.jsonl")
        record = structure_gen.record_feedback(
            "sell_put TQQQ strike 38", "Profit",
            {"Volatility_Level": "High"}, trade_id="t1", store=store)
        assert record.outcome == "Profit"
        loaded = structure_gen.load_feedback(tmp_path / "feedback.jsonl")
        assert loaded == [record]

    def test_unknown_outcome_rejected(self):
        with pytest.raises(ValueError):
            structure_gen.record_feedback("d", "Banana", {})

    def test_loss_digest_mentions_indicator(self):
        record = structure_gen.record_feedback(
            "sell_put", "Loss", {"Volatility_Level": "High"})
        digest = structure_gen.feedback_digest([record])
        assert "Volatility_Level=High" in digest


class TestContextValidation:
    def test_bad_context_values_rejected(self):
        with pytest.raises(ValueError):
            bear_context(current_price=0.0)
        with pytest.raises(ValueError):
            bear_context(trend="upward")
        with pytest.raises(ValueError):
            bear_context(market_regime="bull")

    def test_psych_bounds(self):
        with pytest.raises(ValueError):
            PsychologicalState(fomo_level=1.5)

    def test_generation_config_defaults(self):
        config = GenerationConfig()
        assert config.model_id == "gpt-4-0613"
        assert config.temperature == 0.1
        assert config.max_tokens == 2000
        assert config.top_p == 0.9
        assert config.frequency_penalty == 0.0
        assert config.presence_penalty == 0.0
        assert config.max_retries == 3
