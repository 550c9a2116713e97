"""Structured delay events: table parsing and narrative log extraction.

The operator's delay table is the authoritative event source. Free-text
incident narratives can be mined in parallel, either by a deterministic
rule grammar (dates, clock times, station vocabulary, direction and
fault-cause keywords) or by an LLM backend answering a constrained
extraction prompt. Every extracted event either satisfies the full event
schema or the narrative is rejected; nothing partially valid escapes.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .network import Direction, Network


class DelayType(str, Enum):
    VEHICLE_FAULT = "VehicleFault"
    SIGNALING_FAULT = "SignalingFault"
    POWER_FAULT = "PowerFault"
    IMPROPER_OPERATION = "ImproperOperation"
    OTHERS = "Others"


_TYPE_BY_KEY = {t.value.lower(): t for t in DelayType}
_TYPE_BY_KEY.update({t.value.replace("Fault", " fault").lower(): t for t in DelayType})


def parse_delay_type(text: str) -> DelayType:
    key = re.sub(r"[^a-z]", "", text.lower())
    for t in DelayType:
        if re.sub(r"[^a-z]", "", t.value.lower()) == key:
            return t
    raise ValueError(f"unknown delay type {text!r}")


class ExtractionError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class DelayEvent:
    """One structured disruption: line, cause, date, window, interval, direction."""

    event_id: int
    line: str
    delay_type: DelayType
    date: date
    start_minute: int
    end_minute: int
    from_station: str
    to_station: str
    direction: Direction

    def __post_init__(self) -> None:
        if self.end_minute <= self.start_minute:
            raise ValueError(
                f"event {self.event_id}: window {self.start_minute}-{self.end_minute} inverted"
            )

    @property
    def start_hhmm(self) -> str:
        return format_minute(self.start_minute)

    @property
    def end_hhmm(self) -> str:
        return format_minute(self.end_minute)

    def summary(self) -> str:
        return (
            f"Event {self.event_id} on {self.line} ({self.delay_type.value}), "
            f"{self.date.isoformat()}, {self.start_hhmm}-{self.end_hhmm}, "
            f"affecting {self.from_station} to {self.to_station}, "
            f"{self.direction.value} direction."
        )


@dataclass(frozen=True)
class ExtractionResult:
    event: DelayEvent
    confidence: float
    provenance: dict[str, str]
    notes: tuple[str, ...] = ()
    train_delay_seconds: tuple[int, ...] = ()


@dataclass(frozen=True)
class RejectedDelayRow:
    row_number: int
    reason: str
    raw: str


def parse_minute(text: str) -> int:
    m = re.fullmatch(r"(\d{1,2}):(\d{2})", text.strip())
    if not m:
        raise ValueError(f"bad time {text!r}")
    h, mi = int(m.group(1)), int(m.group(2))
    if h > 23 or mi > 59:
        raise ValueError(f"bad time {text!r}")
    return h * 60 + mi


def format_minute(minute: float) -> str:
    m = int(round(minute))
    return f"{m // 60:02d}:{m % 60:02d}"


DELAY_TABLE_HEADER = ["Line", "Delay type", "No.", "Date", "Time", "Delay interval", "Direction"]


def parse_structured_delays(
    source: Iterable[str],
    network: Network | None = None,
) -> tuple[list[DelayEvent], list[RejectedDelayRow]]:
    """Parse the seven-column delay table into events.

    Blank Line / Delay type cells inherit the previous row (merged-cell
    style). Rows with inverted windows, unknown types, or (when a network
    is supplied) stations missing from the stated line are rejected with
    a reason, never aborting the batch.
    """
    events: list[DelayEvent] = []
    rejects: list[RejectedDelayRow] = []
    carry_line = ""
    carry_type = ""
    for row_no, row in enumerate(csv.reader(source), start=1):
        if not row:
            continue
        raw = ",".join(row)
        if row_no == 1 and row[0].strip().lower() == "line":
            continue
        if len(row) != 7:
            rejects.append(RejectedDelayRow(row_no, "field-count", raw))
            continue
        line_text, type_text, no_text, date_text, time_text, interval_text, dir_text = (
            f.strip() for f in row
        )
        line_text = line_text or carry_line
        type_text = type_text or carry_type
        if not line_text or not type_text:
            rejects.append(RejectedDelayRow(row_no, "blank-field", raw))
            continue
        carry_line, carry_type = line_text, type_text
        try:
            delay_type = parse_delay_type(type_text)
        except ValueError:
            rejects.append(RejectedDelayRow(row_no, "unknown-delay-type", raw))
            continue
        try:
            event_id = int(no_text)
            event_date = date.fromisoformat(date_text)
        except ValueError:
            rejects.append(RejectedDelayRow(row_no, "bad-id-or-date", raw))
            continue
        try:
            start_text, end_text = (p.strip() for p in time_text.split("-", 1))
            start, end = parse_minute(start_text), parse_minute(end_text)
        except ValueError:
            rejects.append(RejectedDelayRow(row_no, "bad-time", raw))
            continue
        if end <= start:
            rejects.append(RejectedDelayRow(row_no, "inverted-window", raw))
            continue
        try:
            from_st, to_st = (p.strip() for p in interval_text.split("-", 1))
        except ValueError:
            rejects.append(RejectedDelayRow(row_no, "bad-interval", raw))
            continue
        try:
            direction = Direction.parse(dir_text)
        except ValueError:
            rejects.append(RejectedDelayRow(row_no, "bad-direction", raw))
            continue
        if network is not None:
            line = network.lines.get(line_text)
            if line is None:
                rejects.append(RejectedDelayRow(row_no, "unknown-line", raw))
                continue
            if from_st not in line or to_st not in line:
                rejects.append(RejectedDelayRow(row_no, "unknown-station", raw))
                continue
        events.append(
            DelayEvent(
                event_id=event_id,
                line=line_text,
                delay_type=delay_type,
                date=event_date,
                start_minute=start,
                end_minute=end,
                from_station=from_st,
                to_station=to_st,
                direction=direction,
            )
        )
    return events, rejects


def parse_structured_delays_file(
    path: str | Path, network: Network | None = None
) -> tuple[list[DelayEvent], list[RejectedDelayRow]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_structured_delays(fh, network)


# ---------------------------------------------------------------------------
# Rule-based narrative extraction


_MONTHS = {
    name: i + 1
    for i, name in enumerate(
        [
            "january",
            "february",
            "march",
            "april",
            "may",
            "june",
            "july",
            "august",
            "september",
            "october",
            "november",
            "december",
        ]
    )
}

_DATE_LONG_RE = re.compile(
    r"\b(January|February|March|April|May|June|July|August|September|October|November|December)"
    r"\s+(\d{1,2}),\s*(\d{4})",
    re.IGNORECASE,
)
_DATE_ISO_RE = re.compile(r"\b(\d{4})-(\d{2})-(\d{2})\b")
_CLOCK_RE = re.compile(r"\b(\d{1,2}):(\d{2})(?::\d{2})?\s*(AM|PM|am|pm)?\b")
_DIRECTION_RE = re.compile(r"\b(up|down)[\s-](?:line|direction|bound)", re.IGNORECASE)
_LINE_RE = re.compile(r"\bLine\s+\d+\b")
_TRAIN_DELAY_RE = re.compile(r"(\d+)\s*minutes?\s*(?:and\s*)?(\d+)\s*seconds?", re.IGNORECASE)

_RECOVERY_KEYWORDS = ("resumed", "restored", "recover", "returned to normal", "back to normal")
_RESOLUTION_KEYWORDS = ("resolved", "rectified", "fixed")

# Ordered: first matching bucket wins. Door/object incidents type as Others.
_CAUSE_KEYWORDS: tuple[tuple[DelayType, tuple[str, ...]], ...] = (
    (DelayType.SIGNALING_FAULT, ("signal",)),
    (DelayType.POWER_FAULT, ("power", "catenary", "substation", "electrical")),
    (DelayType.IMPROPER_OPERATION, ("improper", "operational error", "mishandl")),
    (DelayType.VEHICLE_FAULT, ("vehicle", "rolling stock", "brake", "bogie")),
    (DelayType.OTHERS, ("door", "object", "jamming", "foreign", "intrusion", "passenger")),
)


def _clock_to_minute(m: re.Match) -> int:
    hour, minute = int(m.group(1)), int(m.group(2))
    ampm = (m.group(3) or "").lower()
    if ampm == "pm" and hour != 12:
        hour += 12
    elif ampm == "am" and hour == 12:
        hour = 0
    return hour * 60 + minute


def _station_pattern(network: Network) -> re.Pattern:
    names = sorted(network.station_names, key=len, reverse=True)
    return re.compile("|".join(re.escape(n) for n in names))


def _find_interval(text: str, station_re: re.Pattern) -> tuple[str, str] | None:
    pat = re.compile(
        r"(?:between|from)\s+(" + station_re.pattern + r")\s+(?:and|to)\s+(" + station_re.pattern + r")"
    )
    m = pat.search(text)
    if m:
        return m.group(1), m.group(2)
    return None


def _find_cause(text_lower: str) -> tuple[DelayType, bool]:
    for delay_type, keywords in _CAUSE_KEYWORDS:
        if any(k in text_lower for k in keywords):
            return delay_type, True
    return DelayType.OTHERS, False


def extract_with_rules(text: str, network: Network) -> ExtractionResult:
    """Deterministic grammar over one incident narrative.

    Start time is the first clock reading in the text. The window end is
    the latest time in a recovery sentence; if none, the fault-resolution
    time is used and the result is flagged with lower confidence. The
    affected interval comes from a between/from ... and/to phrase; without
    one the fault station stands in for both ends (flagged).
    """
    notes: list[str] = []
    provenance: dict[str, str] = {}
    confidence = 0.9

    clocks = list(_CLOCK_RE.finditer(text))
    if not clocks:
        raise ExtractionError("no-event-found", "no clock times in narrative")

    m_date = _DATE_LONG_RE.search(text)
    if m_date:
        event_date = date(int(m_date.group(3)), _MONTHS[m_date.group(1).lower()], int(m_date.group(2)))
    else:
        m_iso = _DATE_ISO_RE.search(text)
        if not m_iso:
            raise ExtractionError("no-date", "no date phrase in narrative")
        event_date = date(int(m_iso.group(1)), int(m_iso.group(2)), int(m_iso.group(3)))
    provenance["date"] = "rule"

    start = _clock_to_minute(clocks[0])
    provenance["start"] = "rule"

    sentences = re.split(r"(?<=[.!?])\s+", text)
    recovery_times: list[int] = []
    resolution_times: list[int] = []
    for sentence in sentences:
        low = sentence.lower()
        times = [_clock_to_minute(m) for m in _CLOCK_RE.finditer(sentence)]
        if not times:
            continue
        if any(k in low for k in _RECOVERY_KEYWORDS):
            recovery_times.extend(times)
        elif any(k in low for k in _RESOLUTION_KEYWORDS):
            resolution_times.extend(times)
    if recovery_times:
        end = max(recovery_times)
        provenance["end"] = "rule"
    elif resolution_times:
        end = max(resolution_times)
        provenance["end"] = "rule"
        confidence = min(confidence, 0.6)
        notes.append("end-from-resolution-time")
    else:
        raise ExtractionError("no-end-time", "no recovery or resolution time found")
    if end <= start:
        raise ExtractionError("inverted-window", f"{format_minute(start)}-{format_minute(end)}")

    m_dir = _DIRECTION_RE.search(text)
    if not m_dir:
        raise ExtractionError("no-direction", "no up/down phrase found")
    direction = Direction.parse(m_dir.group(1))
    provenance["direction"] = "rule"

    station_re = _station_pattern(network)
    interval = _find_interval(text, station_re)
    fault_match = re.search(r"(?:at|near)\s+(" + station_re.pattern + r")", text)
    fault_station = fault_match.group(1) if fault_match else None
    if interval:
        from_st, to_st = interval
        provenance["from_station"] = provenance["to_station"] = "rule"
    elif fault_station:
        from_st = to_st = fault_station
        provenance["from_station"] = provenance["to_station"] = "rule"
        confidence = min(confidence, 0.6)
        notes.append("interval-from-fault-station-only")
    else:
        raise ExtractionError("no-stations", "no station names recognized")

    m_line = _LINE_RE.search(text)
    if m_line:
        line_id = m_line.group(0)
        if line_id not in network.lines:
            raise ExtractionError("unknown-line", line_id)
        provenance["line"] = "rule"
    else:
        anchor = fault_station or from_st
        candidates = set(network.lines_of(anchor))
        if interval:
            candidates &= set(network.lines_of(from_st)) & set(network.lines_of(to_st))
        if len(candidates) != 1:
            raise ExtractionError(
                "ambiguous-line", f"{anchor} on lines {sorted(candidates)}"
            )
        line_id = next(iter(candidates))
        provenance["line"] = "rule"
    line = network.line(line_id)
    if from_st not in line or to_st not in line:
        raise ExtractionError("station-not-on-line", f"{from_st}/{to_st} vs {line_id}")

    delay_type, cause_found = _find_cause(text.lower())
    provenance["delay_type"] = "rule"
    if not cause_found:
        confidence = min(confidence, 0.5)
        notes.append("no-cause-keyword")

    delays = tuple(int(m.group(1)) * 60 + int(m.group(2)) for m in _TRAIN_DELAY_RE.finditer(text))

    event = DelayEvent(
        event_id=0,
        line=line_id,
        delay_type=delay_type,
        date=event_date,
        start_minute=start,
        end_minute=end,
        from_station=from_st,
        to_station=to_st,
        direction=direction,
    )
    return ExtractionResult(
        event=event,
        confidence=confidence,
        provenance=provenance,
        notes=tuple(notes),
        train_delay_seconds=delays,
    )


# ---------------------------------------------------------------------------
# LLM-backed narrative extraction

_EXTRACTION_FIELDS = ("LINE", "TYPE", "DATE", "START", "END", "FROM", "TO", "DIRECTION")

EXTRACTION_PROMPT = """You are a rail operations analyst. Read the incident narrative below and
extract the delay event as structured fields.

Narrative:
{narrative}

Reply with exactly these eight lines and nothing else:
LINE: <line id, e.g. Line 5>
TYPE: <one of VehicleFault|SignalingFault|PowerFault|ImproperOperation|Others>
DATE: <YYYY-MM-DD>
START: <HH:MM when the disruption began>
END: <HH:MM when normal service resumed>
FROM: <first station of the affected interval>
TO: <last station of the affected interval>
DIRECTION: <Up or Down>
"""

STRICT_EXTRACTION_SUFFIX = (
    "\nYour previous reply could not be parsed. Respond with ONLY the eight "
    "KEY: value lines in the order given, no prose.\n"
)


def parse_extraction_reply(reply: str, network: Network | None = None) -> DelayEvent:
    values: dict[str, str] = {}
    for key in _EXTRACTION_FIELDS:
        m = re.search(rf"^\s*{key}\s*:\s*(.+?)\s*$", reply, re.MULTILINE)
        if not m:
            raise ExtractionError("missing-field", key)
        values[key] = m.group(1)
    event = DelayEvent(
        event_id=0,
        line=values["LINE"],
        delay_type=parse_delay_type(values["TYPE"]),
        date=date.fromisoformat(values["DATE"]),
        start_minute=parse_minute(values["START"]),
        end_minute=parse_minute(values["END"]),
        from_station=values["FROM"],
        to_station=values["TO"],
        direction=Direction.parse(values["DIRECTION"]),
    )
    if network is not None:
        line = network.lines.get(event.line)
        if line is None:
            raise ExtractionError("unknown-line", event.line)
        if event.from_station not in line or event.to_station not in line:
            raise ExtractionError("station-not-on-line", f"{event.from_station}/{event.to_station}")
    return event


def extract_with_llm(
    text: str,
    backend,
    network: Network | None = None,
    retry_budget: int = 2,
) -> ExtractionResult:
    """Ask an LLM backend for the structured fields, retrying on bad replies."""
    from .llm import DecodeParams

    prompt = EXTRACTION_PROMPT.format(narrative=text.strip())
    last_error: ExtractionError | None = None
    for attempt in range(retry_budget + 1):
        reply = backend.complete(prompt, DecodeParams())
        try:
            event = parse_extraction_reply(reply, network)
        except (ExtractionError, ValueError) as exc:
            last_error = (
                exc if isinstance(exc, ExtractionError) else ExtractionError("bad-value", str(exc))
            )
            prompt = EXTRACTION_PROMPT.format(narrative=text.strip()) + STRICT_EXTRACTION_SUFFIX
            continue
        provenance = {k: "llm" for k in ("line", "delay_type", "date", "start", "end", "from_station", "to_station", "direction")}
        return ExtractionResult(event=event, confidence=0.8, provenance=provenance)
    raise ExtractionError("unparseable-reply", str(last_error))


def extract_from_log(
    text: str,
    backend: str = "rule",
    *,
    network: Network,
    llm_backend=None,
    retry_budget: int = 2,
) -> ExtractionResult:
    """Extract one DelayEvent from a single-incident narrative."""
    if backend == "rule":
        return extract_with_rules(text, network)
    if backend == "llm":
        if llm_backend is None:
            raise ExtractionError("no-backend", "llm extraction requires a backend instance")
        return extract_with_llm(text, llm_backend, network, retry_budget)
    raise ValueError(f"unknown extraction backend {backend!r}")


def split_narratives(text: str) -> list[str]:
    """Split a narratives file into per-incident chunks (blank-line separated)."""
    chunks = [c.strip() for c in re.split(r"\n\s*\n", text)]
    return [c for c in chunks if c]


def write_events_jsonl(results: Sequence[ExtractionResult], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for r in results:
            e = r.event
            fh.write(
                json.dumps(
                    {
                        "event_id": e.event_id,
                        "line": e.line,
                        "delay_type": e.delay_type.value,
                        "date": e.date.isoformat(),
                        "start": e.start_hhmm,
                        "end": e.end_hhmm,
                        "from_station": e.from_station,
                        "to_station": e.to_station,
                        "direction": e.direction.value,
                        "confidence": r.confidence,
                        "provenance": dict(sorted(r.provenance.items())),
                        "notes": list(r.notes),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_events_jsonl(path: str | Path) -> list[ExtractionResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            event = DelayEvent(
                event_id=int(raw["event_id"]),
                line=raw["line"],
                delay_type=DelayType(raw["delay_type"]),
                date=date.fromisoformat(raw["date"]),
                start_minute=parse_minute(raw["start"]),
                end_minute=parse_minute(raw["end"]),
                from_station=raw["from_station"],
                to_station=raw["to_station"],
                direction=Direction(raw["direction"]),
            )
            out.append(
                ExtractionResult(
                    event=event,
                    confidence=float(raw["confidence"]),
                    provenance=dict(raw["provenance"]),
                    notes=tuple(raw.get("notes", ())),
                )
            )
    return out


def table_results(events: Sequence[DelayEvent]) -> list[ExtractionResult]:
    """Wrap table-sourced events with full-confidence table provenance."""
    fields = ("line", "delay_type", "date", "start", "end", "from_station", "to_station", "direction")
    return [
        ExtractionResult(event=e, confidence=1.0, provenance={f: "table" for f in fields})
        for e in events
    ]
