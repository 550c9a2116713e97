"""Wait/abandon labeling and the five-feature choice records.

Each affected instance becomes one row: two event features (cause
category, time-of-day bucket of the delay start) and three passenger
features (mean patterned trip duration, the started-before-delay flag,
and the entry-time spread as urgency). Labeling compares the card's
delay-day records against its pattern; abandonment is the positive class.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .afc import AfcRecord, Trip, TxnType
from .delays import DelayEvent, DelayType
from .impact import AffectedInstance
from .patterns import TravelPattern, minutes_of_day

SLACK_MINUTES = 60.0
MORNING_PEAK = (7 * 60, 9 * 60 + 30)
EVENING_PEAK = (17 * 60, 19 * 60 + 30)


class ChoiceLabel(str, Enum):
    WAIT = "Wait"
    ABANDON = "Abandon"


class DelayPeriod(str, Enum):
    MORNING_PEAK = "MorningPeak"
    EVENING_PEAK = "EveningPeak"
    OFF_PEAK = "OffPeak"


@dataclass(frozen=True)
class ChoiceRecord:
    """One labeled (or to-be-predicted) affected instance."""

    card_id: str
    event_id: int
    v1: DelayType
    v2: DelayPeriod
    p1: float
    p2: bool
    p3: float
    label: ChoiceLabel | None = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.card_id, self.event_id)

    def without_label(self) -> "ChoiceRecord":
        return ChoiceRecord(self.card_id, self.event_id, self.v1, self.v2, self.p1, self.p2, self.p3)


@dataclass(frozen=True)
class LabelDecision:
    label: ChoiceLabel
    bus_corroborated: bool = False
    mid_trip_exit: bool = False
    conflict: bool = False


@dataclass(frozen=True)
class DecisionRule:
    """Threshold rule mapping features to an abandon choice.

    Abandon when the rider had not started, the delay sits in the required
    period, and the entry-time spread is below the urgency threshold.
    Drives both the mock predictor and synthetic behavior simulation.
    """

    required_period: DelayPeriod = DelayPeriod.MORNING_PEAK
    p3_below: float = 6.0
    require_not_started: bool = True

    def abandons(self, period: DelayPeriod, started: bool, p3: float) -> bool:
        if self.require_not_started and started:
            return False
        return period == self.required_period and p3 < self.p3_below


def urgency_from_times(entry_minutes: Sequence[float]) -> float:
    """Population standard deviation of entry times; a single point is 0."""
    n = len(entry_minutes)
    if n == 0:
        raise ValueError("no entry times")
    mean = sum(entry_minutes) / n
    return math.sqrt(sum((v - mean) ** 2 for v in entry_minutes) / n)


def urgency(pattern: TravelPattern) -> float:
    """Urgency in minutes: smaller spread means a more rigid, urgent trip."""
    return pattern.entry_std


def bucket_delay_period(
    start_minute: float,
    morning: tuple[int, int] = MORNING_PEAK,
    evening: tuple[int, int] = EVENING_PEAK,
) -> DelayPeriod:
    if morning[0] <= start_minute < morning[1]:
        return DelayPeriod.MORNING_PEAK
    if evening[0] <= start_minute < evening[1]:
        return DelayPeriod.EVENING_PEAK
    return DelayPeriod.OFF_PEAK


def label_choice(
    delay_day_trips: Sequence[Trip],
    delay_day_bus_records: Sequence[AfcRecord],
    pattern: TravelPattern,
    event: DelayEvent,
    slack_minutes: float = SLACK_MINUTES,
) -> LabelDecision:
    """Label one affected instance from the card's records on the event date.

    Wait means a completed metro trip with the pattern's OD pair whose
    entry falls in [mean - 3*spread - slack, event end + slack]. A
    same-station exit at the origin inside the delay window marks mid-trip
    abandonment. If both appear, the completed trip wins only when its
    entry follows the bail-out (flagged as a conflict either way). A bus
    tap inside [start, end + slack] is corroborating evidence only.
    """
    lo = pattern.entry_mean - 3.0 * pattern.entry_std - slack_minutes
    hi = event.end_minute + slack_minutes

    qualifying: Trip | None = None
    bail: Trip | None = None
    for trip in sorted(delay_day_trips, key=lambda t: t.entry_time):
        entry_tod = minutes_of_day(trip.entry_time)
        if (
            not trip.same_station
            and trip.origin == pattern.origin
            and trip.dest == pattern.dest
            and lo <= entry_tod <= hi
        ):
            if qualifying is None:
                qualifying = trip
        if trip.same_station and trip.origin == pattern.origin:
            exit_tod = minutes_of_day(trip.exit_time)
            if event.start_minute <= exit_tod <= event.end_minute:
                if bail is None:
                    bail = trip
    bus_seen = any(
        r.txn_type in (TxnType.BUS, TxnType.BUS_QR)
        and event.start_minute <= minutes_of_day(r.timestamp) <= event.end_minute + slack_minutes
        for r in delay_day_bus_records
    )

    if qualifying is not None and bail is not None:
        if qualifying.entry_time > bail.exit_time:
            return LabelDecision(ChoiceLabel.WAIT, bus_seen, mid_trip_exit=True, conflict=True)
        return LabelDecision(ChoiceLabel.ABANDON, bus_seen, mid_trip_exit=True, conflict=True)
    if bail is not None:
        return LabelDecision(ChoiceLabel.ABANDON, bus_seen, mid_trip_exit=True)
    if qualifying is not None:
        return LabelDecision(ChoiceLabel.WAIT, bus_seen)
    return LabelDecision(ChoiceLabel.ABANDON, bus_seen)


def featurize(
    instance: AffectedInstance,
    pattern: TravelPattern,
    event: DelayEvent,
    started: bool,
    *,
    morning: tuple[int, int] = MORNING_PEAK,
    evening: tuple[int, int] = EVENING_PEAK,
    label: ChoiceLabel | None = None,
) -> ChoiceRecord:
    """Assemble the five-feature record; delay-day behavior enters only
    through the started flag."""
    return ChoiceRecord(
        card_id=instance.card_id,
        event_id=event.event_id,
        v1=event.delay_type,
        v2=bucket_delay_period(event.start_minute, morning, evening),
        p1=pattern.mean_duration,
        p2=started,
        p3=urgency(pattern),
        label=label,
    )


DATASET_HEADER = ["card_id", "event_id", "v1", "v2", "p1", "p2", "p3", "label"]


def write_dataset(records: Iterable[ChoiceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DATASET_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.card_id,
                    r.event_id,
                    r.v1.value,
                    r.v2.value,
                    f"{r.p1:.3f}",
                    "true" if r.p2 else "false",
                    f"{r.p3:.3f}",
                    r.label.value if r.label is not None else "",
                ]
            )


def read_dataset(path: str | Path) -> list[ChoiceRecord]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            out.append(
                ChoiceRecord(
                    card_id=row[0],
                    event_id=int(row[1]),
                    v1=DelayType(row[2]),
                    v2=DelayPeriod(row[3]),
                    p1=float(row[4]),
                    p2=row[5] == "true",
                    p3=float(row[6]),
                    label=ChoiceLabel(row[7]) if row[7] else None,
                )
            )
    return out
