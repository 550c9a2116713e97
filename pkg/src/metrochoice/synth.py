"""Synthetic world generation with planted ground truth.

Emits a complete input set (network config, weekday calendar, fare
transaction stream, structured delay table, incident narratives) together
with truth files for the planted regulars, their pattern parameters, the
affected instances, and each instance's wait/abandon behavior. Everything
is a pure function of the seed: generation is single-threaded and every
output file is byte-stable.

Planting strategy, briefly: regular cards commute every attendance day
(attendance always covers delay dates) with a small entry-time jitter.
Cards targeted at a delay event get an origin upstream of the disrupted
interval and an entry mean placed so their arrival at the interval falls
well inside the delay window; margin rules keep every overlap decision far
from its thresholds. Casual cards either travel too few days or spread
their trips across many OD pairs so that screening rejects them by a
margin of at least two days. On delay days, affected passengers rewrite
their taps per a feature-driven behavior rule: waiters keep their entry
and exit late, abandoners either never show (optionally taking a bus) or
bail out with a same-station exit when they had already entered.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from pathlib import Path
from typing import Sequence

from .afc import AfcRecord, Calendar, Trip, TxnType, write_afc
from .choices import ChoiceLabel, DecisionRule, bucket_delay_period
from .delays import DELAY_TABLE_HEADER, DelayEvent, DelayType, format_minute
from .impact import RouteCache, find_affected
from .network import Direction, Network, build_network, dump_network
from .patterns import TravelPattern, mine_card_patterns

SECONDS_PER_MINUTE = 60


class WorldError(Exception):
    """Infeasible world configuration, raised before any file is written."""


@dataclass(frozen=True)
class EventSpec:
    event_id: int
    line: str
    delay_type: DelayType
    day_index: int
    start_minute: int
    end_minute: int
    from_station: str
    to_station: str
    direction: Direction

    def on(self, day: date) -> DelayEvent:
        return DelayEvent(
            event_id=self.event_id,
            line=self.line,
            delay_type=self.delay_type,
            date=day,
            start_minute=self.start_minute,
            end_minute=self.end_minute,
            from_station=self.from_station,
            to_station=self.to_station,
            direction=self.direction,
        )


def _default_lines() -> tuple[tuple[str, tuple[str, ...]], ...]:
    line1 = tuple(f"A{i:02d}" for i in range(1, 11)) + ("XA",) + tuple(
        f"A{i:02d}" for i in range(11, 15)
    ) + ("XB",) + tuple(f"A{i:02d}" for i in range(15, 21))
    line2 = tuple(f"B{i:02d}" for i in range(1, 7)) + ("XA",) + tuple(
        f"B{i:02d}" for i in range(7, 13)
    )
    line3 = tuple(f"C{i:02d}" for i in range(1, 6)) + ("XB",) + tuple(
        f"C{i:02d}" for i in range(6, 11)
    )
    return (("Line 1", line1), ("Line 2", line2), ("Line 3", line3))


def _default_events() -> tuple[EventSpec, ...]:
    return (
        EventSpec(1, "Line 1", DelayType.VEHICLE_FAULT, 8, 470, 520, "A11", "A13", Direction.UP),
        EventSpec(2, "Line 1", DelayType.SIGNALING_FAULT, 14, 475, 540, "A12", "XB", Direction.UP),
        EventSpec(3, "Line 1", DelayType.OTHERS, 20, 485, 530, "A11", "A14", Direction.UP),
        EventSpec(4, "Line 2", DelayType.POWER_FAULT, 26, 465, 515, "B07", "B09", Direction.UP),
        EventSpec(5, "Line 3", DelayType.IMPROPER_OPERATION, 31, 490, 545, "C02", "C04", Direction.DOWN),
        EventSpec(6, "Line 1", DelayType.OTHERS, 36, 575, 630, "A12", "A14", Direction.UP),
    )


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 20190801
    lines: tuple[tuple[str, tuple[str, ...]], ...] = field(default_factory=_default_lines)
    hop_runtime: float = 2.5
    access_time: float = 5.0
    transfer_penalty: float = 4.0
    start_date: date = date(2019, 8, 1)
    weekday_count: int = 41
    excluded_dates: tuple[date, ...] = (date(2019, 8, 26),)
    regular_count: int = 400
    casual_count: int = 800
    high_freq_casual_share: float = 0.15
    events: tuple[EventSpec, ...] = field(default_factory=_default_events)
    behavior_rule: DecisionRule = field(default_factory=DecisionRule)
    noise_rate: float = 0.0
    target_abandon_rate: float = 0.19
    non_starter_fraction: float | None = None
    bus_tap_probability: float = 0.7
    entry_jitter_minutes: float = 5.0
    decoy_fraction: float = 0.25
    evening_pattern_share: float = 0.6
    attendance_min: int = 28
    attendance_max: int = 38
    window_pad_minutes: float = 10.0

    def resolved_non_starter_fraction(self) -> float:
        """Share of targeted commuters who board after the delay begins.

        When not set explicitly, derived from the target abandon rate via a
        linear fit calibrated on the default topology and event set
        (rate = 0.107 + 0.85 * fraction near the default target; the
        intercept is the share of early boarders still caught out by a
        neighboring event's earlier start). Custom worlds should set the
        fraction directly.
        """
        if self.non_starter_fraction is not None:
            return self.non_starter_fraction
        if not self.events:
            return 0.0
        return min(0.9, max(0.0, (self.target_abandon_rate - 0.107) / 0.85))

    @classmethod
    def from_dict(cls, raw: dict) -> "WorldConfig":
        kwargs = dict(raw)
        if "lines" in kwargs:
            kwargs["lines"] = tuple((l["id"], tuple(l["stations"])) for l in kwargs["lines"])
        if "start_date" in kwargs:
            kwargs["start_date"] = date.fromisoformat(kwargs["start_date"])
        if "excluded_dates" in kwargs:
            kwargs["excluded_dates"] = tuple(date.fromisoformat(d) for d in kwargs["excluded_dates"])
        if "events" in kwargs:
            kwargs["events"] = tuple(
                EventSpec(
                    event_id=int(e["event_id"]),
                    line=e["line"],
                    delay_type=DelayType(e["delay_type"]),
                    day_index=int(e["day_index"]),
                    start_minute=int(e["start_minute"]),
                    end_minute=int(e["end_minute"]),
                    from_station=e["from_station"],
                    to_station=e["to_station"],
                    direction=Direction(e["direction"]),
                )
                for e in kwargs["events"]
            )
        if "behavior_rule" in kwargs:
            br = kwargs["behavior_rule"]
            kwargs["behavior_rule"] = DecisionRule(
                required_period=br.get("required_period", DecisionRule().required_period),
                p3_below=float(br.get("p3_below", 6.0)),
                require_not_started=bool(br.get("require_not_started", True)),
            )
        return cls(**kwargs)


@dataclass
class GroundTruth:
    regular_cards: list[str]
    planted_patterns: list[dict]
    affected: list[tuple[str, str, int]]  # (card_id, pattern_id, event_id)
    labels: dict[tuple[str, int], ChoiceLabel]
    realized_abandon_rate: float


@dataclass
class WorldFiles:
    out_dir: Path
    network: Path
    calendar: Path
    afc: Path
    delay_table: Path
    narratives: Path
    truth_regulars: Path
    truth_patterns: Path
    truth_affected: Path
    truth_labels: Path
    summary: Path


# ---------------------------------------------------------------------------
# Narrative templates (three distinct phrasings, all rule-extractable)

_CAUSE_PHRASES: dict[DelayType, tuple[str, str, str]] = {
    DelayType.VEHICLE_FAULT: (
        "a vehicle fault (brake system alarm)",
        "a rolling stock failure",
        "a vehicle equipment fault",
    ),
    DelayType.SIGNALING_FAULT: (
        "a signalling fault",
        "a signal system failure",
        "an interlocking signal fault",
    ),
    DelayType.POWER_FAULT: (
        "a power supply fault",
        "a traction power outage",
        "a substation power trip",
    ),
    DelayType.IMPROPER_OPERATION: (
        "an improper operation during dispatch",
        "an operational error by the crew",
        "improper handling during a turnback",
    ),
    DelayType.OTHERS: (
        "an object jamming the door of a train",
        "a foreign object on the platform edge",
        "a door obstruction caused by a passenger item",
    ),
}

_MONTH_NAMES = (
    "January", "February", "March", "April", "May", "June",
    "July", "August", "September", "October", "November", "December",
)


def render_narrative(event: DelayEvent, template_index: int) -> str:
    """Render one incident narrative in one of three house styles.

    Train numbers and per-train delay magnitudes derive from the event id,
    so rendering is deterministic.
    """
    idx = template_index % 3
    cause = _CAUSE_PHRASES[event.delay_type][idx]
    d = event.date
    date_long = f"{_MONTH_NAMES[d.month - 1]} {d.day}, {d.year}"
    date_iso = d.isoformat()
    start, end = event.start_hhmm, event.end_hhmm
    dir_word = event.direction.value.lower()
    train_a = f"{3500 + event.event_id * 101:05d}"
    train_b = f"{3700 + event.event_id * 103:05d}"
    m1, s1 = 4 + event.event_id % 5, (event.event_id * 13) % 60
    m2, s2 = 6 + event.event_id % 4, (event.event_id * 29) % 60
    if idx == 0:
        return (
            f"Event: On {date_long}, at {start}, the driver of train {train_a} reported "
            f"{cause} on the {dir_word} line at {event.from_station}. Trains between "
            f"{event.from_station} and {event.to_station} on {event.line} ran behind "
            f"schedule, with train {train_b} delayed by {m1} minutes {s1} seconds and a "
            f"following service delayed by {m2} minutes {s2} seconds. Normal operation "
            f"between {event.from_station} and {event.to_station} resumed at {end}."
        )
    if idx == 1:
        return (
            f"{event.line} operations bulletin, {date_iso}. "
            f"{cause[0].upper() + cause[1:]} was reported at {start} in the {dir_word} "
            f"direction. Trains running from {event.from_station} to {event.to_station} "
            f"were held and spaced out, the worst delayed by {m1} minutes {s1} seconds. "
            f"Service was restored at {end}."
        )
    return (
        f"{date_iso} {start} {event.line} {dir_word} direction: {cause} affecting the "
        f"section between {event.from_station} and {event.to_station}. Trains held at "
        f"platforms pending inspection; peak delay {m2} minutes {s2} seconds. "
        f"Recovery confirmed at {end}."
    )


def _delay_type_label(t: DelayType) -> str:
    """Human table spelling, e.g. VehicleFault -> 'Vehicle Fault'."""
    import re

    return " ".join(re.findall(r"[A-Z][a-z]*", t.value)) or t.value


def write_delay_table(events: Sequence[DelayEvent], path: Path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DELAY_TABLE_HEADER)
        for e in events:
            writer.writerow(
                [
                    e.line,
                    _delay_type_label(e.delay_type),
                    e.event_id,
                    e.date.isoformat(),
                    f"{e.start_hhmm}-{e.end_hhmm}",
                    f"{e.from_station}-{e.to_station}",
                    e.direction.value,
                ]
            )


# ---------------------------------------------------------------------------
# Generation internals


@dataclass
class _PlannedPattern:
    card_id: str
    origin: str
    dest: str
    center: float  # planted entry mean, minutes of day
    base_duration: float
    entries: dict[date, float]  # emitted (second-truncated) entry minute per day
    durations: dict[date, float]


def _truncate_minute(minutes: float) -> float:
    return int(minutes * SECONDS_PER_MINUTE) / SECONDS_PER_MINUTE


def _dt(day: date, minutes: float) -> datetime:
    return datetime.combine(day, time(0, 0)) + timedelta(seconds=int(minutes * SECONDS_PER_MINUTE))


def _weekday_calendar(config: WorldConfig) -> list[date]:
    days: list[date] = []
    cursor = config.start_date
    excluded = set(config.excluded_dates)
    while len(days) < config.weekday_count:
        if cursor.weekday() < 5 and cursor not in excluded:
            days.append(cursor)
        cursor += timedelta(days=1)
        if (cursor - config.start_date).days > 10 * config.weekday_count + 366:
            raise WorldError("cannot assemble the requested weekday calendar")
    return days


def _validate(config: WorldConfig, network: Network, days: list[date]) -> None:
    if not 0.0 < config.target_abandon_rate < 1.0:
        raise WorldError("target_abandon_rate must sit strictly between 0 and 1")
    if config.attendance_max > config.weekday_count:
        raise WorldError("attendance_max exceeds the weekday span")
    for spec in config.events:
        if spec.day_index >= len(days):
            raise WorldError(f"event {spec.event_id}: day_index outside the calendar")
        line = network.lines.get(spec.line)
        if line is None:
            raise WorldError(f"event {spec.event_id}: unknown line {spec.line}")
        if spec.from_station not in line or spec.to_station not in line:
            raise WorldError(f"event {spec.event_id}: interval not on {spec.line}")
        if spec.end_minute <= spec.start_minute:
            raise WorldError(f"event {spec.event_id}: inverted window")
        if spec.end_minute - spec.start_minute < 35:
            raise WorldError(f"event {spec.event_id}: window too short to plant margins")


def _plant_targeted_od(
    spec: EventSpec,
    network: Network,
    rng: random.Random,
    starter: bool,
    access_time: float,
    hop_runtime: float,
) -> tuple[str, str, float] | None:
    """Pick an OD through the disrupted interval plus a planted entry mean.

    Starters board far upstream (their planned entry lands before the
    event start by a comfortable margin); non-starters board close to the
    interval, entering after the start. Returns (origin, dest, center) or
    None when the line geometry cannot host the requested role.
    """
    line = network.line(spec.line)
    i_from, i_to = line.index_of(spec.from_station), line.index_of(spec.to_station)
    lo, hi = min(i_from, i_to), max(i_from, i_to)
    last = len(line.stations) - 1
    duration = spec.end_minute - spec.start_minute

    if spec.direction is Direction.UP:
        room = lo
    else:
        room = last - hi
    if starter:
        k_lo, k_hi = 6, min(9, room)
    else:
        k_lo, k_hi = 0, min(2, room)
    if k_hi < k_lo:
        return None
    k = rng.randint(k_lo, k_hi)

    if spec.direction is Direction.UP:
        origin_idx = lo - k
        dest_idx = min(last, hi + rng.randint(0, min(3, last - hi)))
    else:
        origin_idx = hi + k
        dest_idx = max(0, lo - rng.randint(0, min(3, lo)))
    origin = line.stations[origin_idx]
    dest = line.stations[dest_idx]
    offset = access_time + k * hop_runtime

    if starter:
        u_hi = min(offset - 8.0, duration - 10.0)
        if u_hi < 10.0:
            return None
        u = rng.uniform(10.0, u_hi)
    else:
        u_lo = offset + 10.0
        u_hi = duration - 10.0
        if u_hi <= u_lo:
            return None
        u = rng.uniform(u_lo, u_hi)
    center = spec.start_minute + u - offset
    return origin, dest, center


def _plant_decoy_od(
    config: WorldConfig,
    network: Network,
    rng: random.Random,
) -> tuple[str, str, float]:
    """An OD and entry mean that should stay clear of every delay event:
    either midday timing, or a morning commute against the disrupted
    directions or on untouched segments."""
    kind = rng.randrange(3)
    line_ids = sorted(network.lines)
    if kind == 0:
        # Midday traveller anywhere.
        lid = rng.choice(line_ids)
        line = network.line(lid)
        a, b = rng.sample(range(len(line.stations)), 2)
        center = rng.uniform(660.0, 900.0)
        return line.stations[a], line.stations[b], center
    if kind == 1:
        # Morning commute opposite to the planted event directions.
        spec = rng.choice(list(config.events))
        line = network.line(spec.line)
        i_from, i_to = line.index_of(spec.from_station), line.index_of(spec.to_station)
        lo, hi = min(i_from, i_to), max(i_from, i_to)
        last = len(line.stations) - 1
        if spec.direction is Direction.UP:
            origin_idx, dest_idx = min(last, hi + 1), max(0, lo - 1)
        else:
            origin_idx, dest_idx = max(0, lo - 1), min(last, hi + 1)
        if origin_idx == dest_idx:
            origin_idx, dest_idx = last, 0
        center = rng.uniform(440.0, 500.0)
        return line.stations[origin_idx], line.stations[dest_idx], center
    # Morning commute far from any event in time.
    lid = rng.choice(line_ids)
    line = network.line(lid)
    a, b = rng.sample(range(len(line.stations)), 2)
    center = rng.uniform(770.0, 950.0)
    return line.stations[a], line.stations[b], center


def generate_world(config: WorldConfig, out_dir: str | Path) -> tuple[WorldFiles, GroundTruth]:
    """Generate a seeded synthetic world and write every artifact.

    Raises WorldError on an infeasible configuration before writing
    anything. Same config (same seed) yields byte-identical files.
    """
    rng = random.Random(config.seed)
    out = Path(out_dir)

    network = build_network(
        config.lines,
        hop_runtime=config.hop_runtime,
        access_time=config.access_time,
        transfer_penalty=config.transfer_penalty,
    )
    days = _weekday_calendar(config)
    _validate(config, network, days)
    events = [spec.on(days[spec.day_index]) for spec in config.events]
    events_by_date: dict[date, list[DelayEvent]] = {}
    for e in events:
        events_by_date.setdefault(e.date, []).append(e)
    event_days = sorted(events_by_date)
    non_starter_fraction = config.resolved_non_starter_fraction()

    # --- plant regulars -----------------------------------------------------
    route_cache = RouteCache(network)
    regular_cards: list[str] = []
    planned: dict[str, list[_PlannedPattern]] = {}
    attendance: dict[str, list[date]] = {}
    planted_rows: list[dict] = []

    non_event_days = [d for d in days if d not in events_by_date]
    for i in range(config.regular_count):
        card = f"r{i:06d}"
        regular_cards.append(card)
        n_days = rng.randint(config.attendance_min, config.attendance_max)
        extra = max(0, n_days - len(event_days))
        extra = min(extra, len(non_event_days))
        chosen = sorted(set(event_days) | set(rng.sample(non_event_days, extra)))
        attendance[card] = chosen

        is_decoy = rng.random() < config.decoy_fraction
        if is_decoy:
            origin, dest, center = _plant_decoy_od(config, network, rng)
        else:
            spec = rng.choice(list(config.events))
            starter = rng.random() >= non_starter_fraction
            planted = _plant_targeted_od(
                spec, network, rng, starter, config.access_time, config.hop_runtime
            )
            if planted is None:
                planted = _plant_targeted_od(
                    spec, network, rng, not starter, config.access_time, config.hop_runtime
                )
            if planted is None:
                raise WorldError(f"event {spec.event_id}: line too short to host commuters")
            origin, dest, center = planted

        route = route_cache.get(origin, dest)
        if route is None:
            raise WorldError(f"planted OD {origin}->{dest} is unroutable")
        base_duration = route.offsets[-1] + rng.uniform(4.0, 12.0)
        morning = _PlannedPattern(card, origin, dest, center, base_duration, {}, {})
        for day in chosen:
            jitter = rng.uniform(-config.entry_jitter_minutes, config.entry_jitter_minutes)
            morning.entries[day] = _truncate_minute(center + jitter)
            morning.durations[day] = base_duration + rng.uniform(-3.0, 3.0)
        card_patterns = [morning]

        if rng.random() < config.evening_pattern_share:
            ev_center = rng.uniform(1040.0, 1140.0)
            ev_duration = base_duration + rng.uniform(-2.0, 2.0)
            evening = _PlannedPattern(card, dest, origin, ev_center, ev_duration, {}, {})
            ev_days = [d for d in chosen if rng.random() < 0.8]
            if len(ev_days) >= 8:
                for day in ev_days:
                    jitter = rng.uniform(-config.entry_jitter_minutes, config.entry_jitter_minutes)
                    evening.entries[day] = _truncate_minute(ev_center + jitter)
                    evening.durations[day] = ev_duration + rng.uniform(-3.0, 3.0)
                card_patterns.append(evening)
        planned[card] = card_patterns
        for p in card_patterns:
            planted_rows.append(
                {
                    "card_id": card,
                    "origin": p.origin,
                    "dest": p.dest,
                    "center": p.center,
                    "base_duration": p.base_duration,
                    "day_count": len(p.entries),
                }
            )

    # --- plant casuals -------------------------------------------------------
    station_names = sorted(network.station_names)
    casual_trip_plan: dict[str, list[tuple[date, str, str, float, float]]] = {}
    n_high = int(round(config.casual_count * config.high_freq_casual_share))
    for i in range(config.casual_count):
        card = f"c{i:06d}"
        plan: list[tuple[date, str, str, float, float]] = []
        if i < n_high:
            # High travel frequency, no spatial consistency: enough distinct
            # OD pairs that no pair can reach the day threshold.
            n_days = rng.randint(22, min(config.weekday_count - 3, 38))
            od_pool = []
            while len(od_pool) < 8:
                a, b = rng.sample(station_names, 2)
                if (a, b) not in od_pool:
                    od_pool.append((a, b))
            chosen = sorted(rng.sample(days, n_days))
            for j, day in enumerate(chosen):
                o, d = od_pool[j % len(od_pool)]
                entry = _truncate_minute(rng.uniform(380.0, 1260.0))
                dur = rng.uniform(12.0, 55.0)
                plan.append((day, o, d, entry, dur))
        else:
            n_days = rng.randint(2, 18)
            chosen = sorted(rng.sample(days, min(n_days, len(days))))
            consistent = rng.random() < 0.3
            if consistent:
                o, d = rng.sample(station_names, 2)
            for day in chosen:
                if not consistent:
                    o, d = rng.sample(station_names, 2)
                entry = _truncate_minute(rng.uniform(380.0, 1260.0))
                dur = rng.uniform(12.0, 55.0)
                plan.append((day, o, d, entry, dur))
        casual_trip_plan[card] = plan

    # --- preliminary mining and overlap --------------------------------------
    def build_trips(
        pattern: _PlannedPattern, skip_days: set[date], extra_exit: dict[date, float]
    ) -> list[Trip]:
        trips = []
        for day, entry_min in sorted(pattern.entries.items()):
            if day in skip_days:
                continue
            entry_dt = _dt(day, entry_min)
            dur = pattern.durations[day] + extra_exit.get(day, 0.0)
            exit_dt = _dt(day, _truncate_minute(entry_min + dur))
            trips.append(
                Trip(
                    card_id=pattern.card_id,
                    origin=pattern.origin,
                    entry_time=entry_dt,
                    dest=pattern.dest,
                    exit_time=exit_dt,
                )
            )
        return trips

    def mine_all(
        skips: dict[tuple[str, str, str], set[date]],
        extras: dict[tuple[str, str, str], dict[date, float]],
    ) -> list[TravelPattern]:
        mined: list[TravelPattern] = []
        for card in regular_cards:
            trips: list[Trip] = []
            for p in planned[card]:
                key = (card, p.origin, p.dest)
                trips.extend(build_trips(p, skips.get(key, set()), extras.get(key, {})))
            mined.extend(mine_card_patterns(card, trips))
        return mined

    prelim_patterns = mine_all({}, {})
    prelim_affected = find_affected(
        prelim_patterns, events, network, window_pad_minutes=config.window_pad_minutes
    )

    # --- behavior simulation ---------------------------------------------------
    behaviors: dict[tuple[str, int], ChoiceLabel] = {}
    skips: dict[tuple[str, str, str], set[date]] = {}
    extras: dict[tuple[str, str, str], dict[date, float]] = {}
    bail_pairs: list[tuple[str, str, date, float, float]] = []  # card, origin, day, entry, exit
    bus_taps: list[tuple[str, date, float]] = []
    event_by_id = {e.event_id: e for e in events}

    for inst in sorted(prelim_affected, key=lambda a: (a.event_id, a.card_id)):
        event = event_by_id[inst.event_id]
        pat = inst.pattern
        key = (pat.card_id, pat.origin, pat.dest)
        plan = next(
            p for p in planned[pat.card_id] if (p.origin, p.dest) == (pat.origin, pat.dest)
        )
        entry_min = plan.entries[event.date]
        started = entry_min <= event.start_minute
        period = bucket_delay_period(event.start_minute)
        abandons = config.behavior_rule.abandons(period, started, pat.entry_std)
        if config.noise_rate > 0 and rng.random() < config.noise_rate:
            abandons = not abandons
        if abandons:
            behaviors[(pat.card_id, event.event_id)] = ChoiceLabel.ABANDON
            skips.setdefault(key, set()).add(event.date)
            if started:
                bail_exit = event.start_minute + rng.uniform(
                    5.0, min(20.0, event.end_minute - event.start_minute - 2.0)
                )
                bail_pairs.append(
                    (pat.card_id, pat.origin, event.date, entry_min, _truncate_minute(bail_exit))
                )
            if rng.random() < config.bus_tap_probability:
                tap = event.start_minute + rng.uniform(10.0, 40.0)
                bus_taps.append((pat.card_id, event.date, _truncate_minute(tap)))
        else:
            behaviors[(pat.card_id, event.event_id)] = ChoiceLabel.WAIT
            hold = rng.uniform(6.0, 25.0)
            extras.setdefault(key, {})[event.date] = hold

    # --- final mining, final truth ---------------------------------------------
    final_patterns = mine_all(skips, extras)
    final_affected = find_affected(
        final_patterns, events, network, window_pad_minutes=config.window_pad_minutes
    )
    truth_affected = [(a.card_id, a.pattern.pattern_id, a.event_id) for a in final_affected]
    labels: dict[tuple[str, int], ChoiceLabel] = {}
    for a in final_affected:
        labels[(a.card_id, a.event_id)] = behaviors.get(
            (a.card_id, a.event_id), ChoiceLabel.WAIT
        )
    n_abandon = sum(1 for v in labels.values() if v == ChoiceLabel.ABANDON)
    realized = n_abandon / len(labels) if labels else 0.0

    # --- emit transaction stream -------------------------------------------------
    def company_of(station: str) -> str:
        return network.lines_of(station)[0]

    records: list[AfcRecord] = []
    for card in regular_cards:
        for p in planned[card]:
            key = (card, p.origin, p.dest)
            skip = skips.get(key, set())
            extra = extras.get(key, {})
            for day, entry_min in p.entries.items():
                if day in skip:
                    continue
                dur = p.durations[day] + extra.get(day, 0.0)
                exit_min = _truncate_minute(entry_min + dur)
                records.append(
                    AfcRecord(card, _dt(day, entry_min), TxnType.METRO_ENTRY, company_of(p.origin), p.origin)
                )
                records.append(
                    AfcRecord(card, _dt(day, exit_min), TxnType.METRO_EXIT, company_of(p.dest), p.dest)
                )
    for card, origin, day, entry_min, exit_min in bail_pairs:
        records.append(
            AfcRecord(card, _dt(day, entry_min), TxnType.METRO_ENTRY, company_of(origin), origin)
        )
        records.append(
            AfcRecord(card, _dt(day, exit_min), TxnType.METRO_EXIT, company_of(origin), origin)
        )
    for card, day, tap_min in bus_taps:
        route_no = f"M{100 + (hash_stable(card) % 400)}"
        records.append(AfcRecord(card, _dt(day, tap_min), TxnType.BUS, "Bus Group", route_no))
    for card, plan in casual_trip_plan.items():
        for day, o, d, entry, dur in plan:
            exit_min = _truncate_minute(entry + dur)
            records.append(AfcRecord(card, _dt(day, entry), TxnType.METRO_ENTRY, company_of(o), o))
            records.append(AfcRecord(card, _dt(day, exit_min), TxnType.METRO_EXIT, company_of(d), d))

    records.sort(key=lambda r: (r.timestamp, r.card_id, r.txn_type.value))

    # --- write artifacts -----------------------------------------------------------
    out.mkdir(parents=True, exist_ok=True)
    files = WorldFiles(
        out_dir=out,
        network=out / "network.json",
        calendar=out / "calendar.csv",
        afc=out / "afc.csv",
        delay_table=out / "delay_table.csv",
        narratives=out / "narratives.txt",
        truth_regulars=out / "truth_regulars.csv",
        truth_patterns=out / "truth_patterns.csv",
        truth_affected=out / "truth_affected.csv",
        truth_labels=out / "truth_labels.csv",
        summary=out / "world_summary.json",
    )
    dump_network(network, files.network)
    Calendar(frozenset(days)).dump(files.calendar, excluded=config.excluded_dates)
    write_afc(records, files.afc)
    write_delay_table(events, files.delay_table)
    narratives = "\n\n".join(render_narrative(e, e.event_id % 3) for e in events)
    files.narratives.write_text(narratives + ("\n" if narratives else ""), encoding="utf-8")

    import csv

    with open(files.truth_regulars, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["card_id", "travel_day_count"])
        for card in regular_cards:
            writer.writerow([card, len(attendance[card])])
    with open(files.truth_patterns, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["card_id", "origin", "dest", "center", "base_duration", "day_count"])
        for row in planted_rows:
            writer.writerow(
                [
                    row["card_id"],
                    row["origin"],
                    row["dest"],
                    f"{row['center']:.3f}",
                    f"{row['base_duration']:.3f}",
                    row["day_count"],
                ]
            )
    with open(files.truth_affected, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["card_id", "pattern_id", "event_id"])
        for card, pattern_id, event_id in sorted(truth_affected):
            writer.writerow([card, pattern_id, event_id])
    with open(files.truth_labels, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["card_id", "event_id", "label"])
        for (card, event_id), label in sorted(labels.items()):
            writer.writerow([card, event_id, label.value])
    summary = {
        "seed": config.seed,
        "weekdays": len(days),
        "regulars": len(regular_cards),
        "casuals": config.casual_count,
        "events": len(events),
        "afc_rows": len(records),
        "affected_instances": len(labels),
        "abandon_instances": n_abandon,
        "realized_abandon_rate": realized,
        "target_abandon_rate": config.target_abandon_rate,
        "non_starter_fraction": non_starter_fraction,
    }
    files.summary.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    truth = GroundTruth(
        regular_cards=regular_cards,
        planted_patterns=planted_rows,
        affected=sorted(truth_affected),
        labels=labels,
        realized_abandon_rate=realized,
    )
    return files, truth


def hash_stable(text: str) -> int:
    """Stable small hash (process-independent, unlike built-in hash)."""
    h = 2166136261
    for ch in text.encode("utf-8"):
        h = ((h ^ ch) * 16777619) % (1 << 32)
    return h
