import itertools
import json
from datetime import date

import httpx
import pytest

from metrochoice.choices import ChoiceLabel, ChoiceRecord, DecisionRule, DelayPeriod
from metrochoice.delays import DelayEvent, DelayType
from metrochoice.llm import (
    BatchError,
    DecodeParams,
    HttpBackend,
    LlmError,
    MockBackend,
    ScriptedBackend,
    parse_reply,
    run_llm_predictor,
)
from metrochoice.network import Direction
from metrochoice.prompts import build_prompt

EVENT = DelayEvent(
    event_id=5,
    line="Line 1",
    delay_type=DelayType.POWER_FAULT,
    date=date(2019, 9, 26),
    start_minute=391,
    end_minute=415,
    from_station="Grand Theater",
    to_station="Luohu",
    direction=Direction.UP,
)


def _record(card, period=DelayPeriod.MORNING_PEAK, started=False, p3=3.0):
    return ChoiceRecord(card, 5, DelayType.POWER_FAULT, period, 30.0, started, p3)


def test_parse_reply_simple_case():
    parsed = parse_reply("Case 1: CHOICE: ABANDON\nREASON: low urgency-std, not yet departed", [1])
    assert parsed == {1: (ChoiceLabel.ABANDON, "low urgency-std, not yet departed")}


def test_parse_reply_tolerates_surrounding_prose():
    reply = (
        "Let me reason about each rider.\n"
        "Case 1. Considering the morning peak... CHOICE: WAIT\nREASON: flexible\n"
        "Now Case 2: clearly choice: abandon\nreason: rigid schedule\n"
    )
    parsed = parse_reply(reply, [1, 2])
    assert parsed[1][0] is ChoiceLabel.WAIT
    assert parsed[2][0] is ChoiceLabel.ABANDON


def test_parse_reply_skips_unexpected_and_ambiguous_cases():
    reply = "Case 3: CHOICE: WAIT\nCase 1: no decision here\n"
    parsed = parse_reply(reply, [1, 2])
    assert parsed == {}


def test_mock_backend_follows_rule_table():
    rule = DecisionRule(required_period=DelayPeriod.MORNING_PEAK, p3_below=6.0)
    backend = MockBackend(rule)
    cases = [
        (DelayPeriod.MORNING_PEAK, False, 3.0, ChoiceLabel.ABANDON),
        (DelayPeriod.MORNING_PEAK, True, 3.0, ChoiceLabel.WAIT),
        (DelayPeriod.MORNING_PEAK, False, 7.5, ChoiceLabel.WAIT),
        (DelayPeriod.OFF_PEAK, False, 3.0, ChoiceLabel.WAIT),
        (DelayPeriod.EVENING_PEAK, True, 1.0, ChoiceLabel.WAIT),
    ]
    records = [
        _record(f"card{i}", period=p, started=s, p3=p3) for i, (p, s, p3, _) in enumerate(cases)
    ]
    bundle = build_prompt(records, EVENT)
    predictions = run_llm_predictor(backend, bundle)
    assert [p.label for p in predictions] == [expected for *_, expected in cases]
    assert all(p.retry_count == 0 for p in predictions)
    assert all(p.rationale for p in predictions)


def test_two_malformed_replies_then_valid_gives_retry_count_two():
    good = "Case 1: CHOICE: ABANDON\nREASON: ok"
    backend = ScriptedBackend(["nonsense", "still nonsense", good])
    bundle = build_prompt([_record("c1")], EVENT)
    predictions = run_llm_predictor(backend, bundle, retry_budget=2)
    assert predictions[0].label is ChoiceLabel.ABANDON
    assert predictions[0].retry_count == 2
    assert backend.calls == 3


def test_partial_reply_retries_only_missing_cases():
    first = "Case 1: CHOICE: WAIT\nREASON: fine"
    second = "Case 2: CHOICE: ABANDON\nREASON: late"
    backend = ScriptedBackend([first, second])
    bundle = build_prompt([_record("c1"), _record("c2")], EVENT)
    predictions = run_llm_predictor(backend, bundle, retry_budget=2)
    assert predictions[0].retry_count == 0
    assert predictions[1].retry_count == 1
    assert predictions[1].label is ChoiceLabel.ABANDON


def test_exhausted_retries_yield_unresolved():
    backend = ScriptedBackend(["bad", "bad", "bad"])
    bundle = build_prompt([_record("c1")], EVENT)
    predictions = run_llm_predictor(backend, bundle, retry_budget=2)
    assert predictions[0].unresolved
    assert predictions[0].label is None
    assert predictions[0].retry_count == 2


def test_transport_failure_raises_batch_error_listing_keys():
    backend = ScriptedBackend([])
    bundle = build_prompt([_record("c1"), _record("c2")], EVENT)
    with pytest.raises(BatchError) as err:
        run_llm_predictor(backend, bundle)
    assert err.value.unresolved_keys == [("c1", 5), ("c2", 5)]


def test_mock_round_trip_is_lossless_for_in_format_replies():
    backend = MockBackend()
    records = [
        _record(f"c{i}", period=p, started=s, p3=p3)
        for i, (p, s, p3) in enumerate(
            itertools.product(
                (DelayPeriod.MORNING_PEAK, DelayPeriod.OFF_PEAK), (True, False), (2.0, 9.0)
            )
        )
    ]
    bundle = build_prompt(records, EVENT)
    reply = backend.complete(bundle.render(), DecodeParams())
    parsed = parse_reply(reply, range(1, len(records) + 1))
    assert len(parsed) == len(records)
    for i, record in enumerate(records, start=1):
        expected = (
            ChoiceLabel.ABANDON
            if backend.rule.abandons(record.v2, record.p2, record.p3)
            else ChoiceLabel.WAIT
        )
        assert parsed[i][0] == expected


def _http_backend(handler, **kwargs):
    transport = httpx.MockTransport(handler)
    return HttpBackend(
        "https://example.invalid/v1/chat/completions",
        "test-model",
        transport=transport,
        backoff_seconds=0.0,
        **kwargs,
    )


def test_http_backend_parses_chat_completion(monkeypatch):
    monkeypatch.setenv("DELAYPTC_API_KEY", "k")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(
            200, json={"choices": [{"message": {"content": "Case 1: CHOICE: WAIT\nREASON: r"}}]}
        )

    backend = _http_backend(handler)
    reply = backend.complete("prompt text", DecodeParams(temperature=0.0))
    assert "CHOICE: WAIT" in reply
    assert seen["auth"] == "Bearer k"
    assert seen["body"]["temperature"] == 0.0
    assert seen["body"]["messages"][0]["content"] == "prompt text"


def test_http_backend_retries_on_server_error(monkeypatch):
    monkeypatch.setenv("DELAYPTC_API_KEY", "k")
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] < 3:
            return httpx.Response(500, text="boom")
        return httpx.Response(200, json={"choices": [{"message": {"content": "ok"}}]})

    backend = _http_backend(handler, max_attempts=3)
    assert backend.complete("p", DecodeParams()) == "ok"
    assert calls["n"] == 3


def test_http_backend_requires_api_key(monkeypatch):
    monkeypatch.delenv("DELAYPTC_API_KEY", raising=False)
    with pytest.raises(LlmError, match="DELAYPTC_API_KEY"):
        HttpBackend("https://example.invalid", "m")


def test_http_backend_fails_fast_on_client_error(monkeypatch):
    monkeypatch.setenv("DELAYPTC_API_KEY", "k")
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        return httpx.Response(400, text="bad request")

    backend = _http_backend(handler)
    with pytest.raises(LlmError):
        backend.complete("p", DecodeParams())
    assert calls["n"] == 1
