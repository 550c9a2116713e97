"""LLM backends and the reply-parsing prediction loop.

The backend contract is a single ``complete(prompt, params) -> str`` call.
Three implementations: a deterministic rule-driven mock (no network), a
scripted backend for tests, and an HTTP client for chat-completion style
endpoints with bounded retries. The prediction loop parses replies case
by case, re-asks malformed cases with a stricter instruction up to the
retry budget, and marks leftovers Unresolved rather than guessing.
"""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import httpx

from .choices import ChoiceLabel, DecisionRule, DelayPeriod
from .prompts import PromptBundle

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "DELAYPTC_API_KEY"
DEFAULT_RETRY_BUDGET = 2
DEFAULT_MAX_IN_FLIGHT = 4


@dataclass(frozen=True)
class DecodeParams:
    temperature: float = 0.0
    max_tokens: int = 2048


@dataclass(frozen=True)
class Prediction:
    card_id: str
    event_id: int
    label: ChoiceLabel | None
    rationale: str
    backend_id: str
    retry_count: int = 0

    @property
    def key(self) -> tuple[str, int]:
        return (self.card_id, self.event_id)

    @property
    def unresolved(self) -> bool:
        return self.label is None


class LlmError(Exception):
    pass


class LlmTransportError(LlmError):
    pass


class BatchError(LlmError):
    def __init__(self, unresolved_keys: Sequence[tuple[str, int]], message: str):
        self.unresolved_keys = list(unresolved_keys)
        super().__init__(f"{message}; unresolved: {self.unresolved_keys}")


class LlmBackend(Protocol):
    backend_id: str
    max_in_flight: int

    def complete(self, prompt: str, params: DecodeParams) -> str: ...


_CASE_LINE_RE = re.compile(
    r"Case (\d+): delay_type=(\w+); delay_period=(\w+); "
    r"avg_trip_duration_min=([\d.]+); started_before_delay=(true|false); "
    r"entry_time_std_min=([\d.]+)"
)


class MockBackend:
    """Parses its own prompt's case lines and answers them in-format.

    Decisions come from a deterministic DecisionRule, making this backend
    a fully offline stand-in for the hosted predictor.
    """

    def __init__(self, rule: DecisionRule | None = None):
        self.rule = rule or DecisionRule()
        self.backend_id = "mock"
        self.max_in_flight = DEFAULT_MAX_IN_FLIGHT
        self.calls = 0

    def complete(self, prompt: str, params: DecodeParams) -> str:
        self.calls += 1
        lines = []
        for m in _CASE_LINE_RE.finditer(prompt):
            number = int(m.group(1))
            period = DelayPeriod(m.group(3))
            started = m.group(5) == "true"
            p3 = float(m.group(6))
            if self.rule.abandons(period, started, p3):
                choice, why = "ABANDON", "tight schedule and not yet in the system during the disruption"
            else:
                choice, why = "WAIT", "flexible timing or already travelling, waiting is cheaper"
            lines.append(f"Case {number}: CHOICE: {choice}")
            lines.append(f"REASON: {why}")
        return "\n".join(lines) + "\n"


class ScriptedBackend:
    """Replays canned replies in order; raises when the script runs out."""

    def __init__(self, replies: Sequence[str], backend_id: str = "scripted"):
        self.replies = list(replies)
        self.backend_id = backend_id
        self.max_in_flight = 1
        self.calls = 0

    def complete(self, prompt: str, params: DecodeParams) -> str:
        if self.calls >= len(self.replies):
            raise LlmTransportError("script exhausted")
        reply = self.replies[self.calls]
        self.calls += 1
        if isinstance(reply, Exception):
            raise reply
        return reply


class HttpBackend:
    """Chat-completion HTTP client with bounded retry on 429/5xx/transport.

    Credentials come from an environment variable only, never from config
    files. Pass ``transport`` to inject a mock transport in tests.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout_seconds: float = 60.0,
        max_attempts: int = 3,
        backoff_seconds: float = 1.0,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        transport: httpx.BaseTransport | None = None,
    ):
        api_key = os.environ.get(api_key_env, "")
        if not api_key:
            raise LlmError(f"missing API key: set ${api_key_env}")
        self.endpoint = endpoint
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self.backend_id = "llm"
        self.max_in_flight = max_in_flight
        self._client = httpx.Client(
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=timeout_seconds,
            transport=transport,
        )

    def complete(self, prompt: str, params: DecodeParams) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        last: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                resp = self._client.post(self.endpoint, json=body)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = LlmTransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                elif resp.status_code >= 400:
                    raise LlmError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    data = resp.json()
                    return data["choices"][0]["message"]["content"]
            except httpx.HTTPError as exc:
                last = LlmTransportError(f"transport: {exc}")
            if attempt < self.max_attempts - 1:
                time.sleep(self.backoff_seconds * (2**attempt))
        raise last if last else LlmTransportError("no attempts made")

    def close(self) -> None:
        self._client.close()


_CHOICE_RE = re.compile(r"CHOICE\s*[:=]\s*(WAIT|ABANDON)", re.IGNORECASE)
_REASON_RE = re.compile(r"REASON\s*[:=]\s*(.+)", re.IGNORECASE)
_CASE_ANCHOR_RE = re.compile(r"Case\s+(\d+)\s*[:.]", re.IGNORECASE)


def parse_reply(reply: str, expected_cases: Sequence[int]) -> dict[int, tuple[ChoiceLabel, str]]:
    """Tolerant parse: per-case CHOICE plus optional REASON, prose allowed.

    Only expected case numbers are honored; a case whose block lacks an
    unambiguous CHOICE stays absent from the result.
    """
    anchors = list(_CASE_ANCHOR_RE.finditer(reply))
    out: dict[int, tuple[ChoiceLabel, str]] = {}
    expected = set(expected_cases)
    for i, anchor in enumerate(anchors):
        number = int(anchor.group(1))
        if number not in expected or number in out:
            continue
        block_end = anchors[i + 1].start() if i + 1 < len(anchors) else len(reply)
        block = reply[anchor.start() : block_end]
        m_choice = _CHOICE_RE.search(block)
        if not m_choice:
            continue
        label = ChoiceLabel.ABANDON if m_choice.group(1).upper() == "ABANDON" else ChoiceLabel.WAIT
        m_reason = _REASON_RE.search(block)
        rationale = m_reason.group(1).strip() if m_reason else ""
        out[number] = (label, rationale)
    return out


RETRY_INSTRUCTION = (
    "\n\nYour previous reply could not be parsed for the cases listed below. "
    "Answer ONLY those cases, exactly two lines each:\n"
    "Case N: CHOICE: WAIT or CHOICE: ABANDON\nREASON: <one short sentence>\n"
    "Cases to answer: {numbers}\n"
)


def run_llm_predictor(
    backend: LlmBackend,
    bundle: PromptBundle,
    *,
    params: DecodeParams | None = None,
    retry_budget: int = DEFAULT_RETRY_BUDGET,
) -> list[Prediction]:
    """Run one prompt bundle through a backend and parse the replies.

    Malformed cases are re-asked with a stricter format instruction up to
    ``retry_budget`` extra calls; anything still unanswered comes back as
    an Unresolved prediction. Transport failures (after the backend's own
    retries) raise BatchError listing every unresolved key.
    """
    params = params or DecodeParams()
    numbers = list(range(1, len(bundle.keys) + 1))
    prompt = bundle.render()
    resolved: dict[int, tuple[ChoiceLabel, str]] = {}
    retries_used: dict[int, int] = {n: 0 for n in numbers}

    attempt = 0
    pending = numbers
    while pending and attempt <= retry_budget:
        if attempt == 0:
            text = prompt
        else:
            text = prompt + RETRY_INSTRUCTION.format(numbers=", ".join(map(str, pending)))
        try:
            reply = backend.complete(text, params)
        except LlmTransportError as exc:
            raise BatchError(
                [bundle.keys[n - 1] for n in pending], f"transport failure: {exc}"
            ) from exc
        parsed = parse_reply(reply, pending)
        for n in pending:
            retries_used[n] = attempt
        resolved.update(parsed)
        pending = [n for n in pending if n not in resolved]
        attempt += 1

    predictions: list[Prediction] = []
    for n in numbers:
        card_id, event_id = bundle.keys[n - 1]
        if n in resolved:
            label, rationale = resolved[n]
            predictions.append(
                Prediction(card_id, event_id, label, rationale, backend.backend_id, retries_used[n])
            )
        else:
            log.warning("case %d (%s, %d) unresolved after %d retries", n, card_id, event_id, retry_budget)
            predictions.append(
                Prediction(card_id, event_id, None, "", backend.backend_id, retry_budget)
            )
    return predictions
