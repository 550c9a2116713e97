"""Affected-passenger identification by spatiotemporal overlap.

A travel pattern is affected by a delay event when its inferred route
rides the disrupted line in the disrupted direction through at least two
consecutive stations of the affected interval (an endpoint touch alone
does not count), and the pattern's usual entry window, shifted to the
first overlapped station, intersects the delay window. The timing test
uses pattern statistics rather than delay-day taps so that passengers who
never entered that day are still identifiable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

from .afc import AfcRecord, TxnType
from .delays import DelayEvent
from .network import Network, NetworkError, Route, shortest_route
from .patterns import TravelPattern, minutes_of_day

log = logging.getLogger(__name__)

WINDOW_PAD_MINUTES = 10.0
STARTED_FLOOR_MINUTES = 15.0


@dataclass(frozen=True)
class AffectedInstance:
    card_id: str
    pattern: TravelPattern
    event_id: int
    overlap_stations: tuple[str, ...]
    segment_entry_minute: float
    window: tuple[int, int]


class RouteCache:
    """Memoized shortest routes; unreachable pairs cache as None."""

    def __init__(self, network: Network):
        self.network = network
        self._cache: dict[tuple[str, str], Route | None] = {}

    def get(self, origin: str, dest: str) -> Route | None:
        key = (origin, dest)
        if key not in self._cache:
            try:
                self._cache[key] = shortest_route(self.network, origin, dest)
            except NetworkError as exc:
                log.warning("route failure %s -> %s: %s", origin, dest, exc)
                self._cache[key] = None
        return self._cache[key]


def _overlap_run(route: Route, event: DelayEvent, network: Network) -> tuple[str, ...] | None:
    """First run of >=2 consecutive in-interval stations on a matching leg."""
    line = network.lines.get(event.line)
    if line is None:
        return None
    try:
        i_from = line.index_of(event.from_station)
        i_to = line.index_of(event.to_station)
    except ValueError:
        return None
    lo, hi = min(i_from, i_to), max(i_from, i_to)
    for leg in route.legs:
        if leg.line_id != event.line or leg.direction != event.direction:
            continue
        inside = [lo <= line.index_of(s) <= hi for s in leg.stations]
        run: list[str] = []
        for station, ok in zip(leg.stations, inside):
            if ok:
                run.append(station)
            else:
                if len(run) >= 2:
                    return tuple(run)
                run = []
        if len(run) >= 2:
            return tuple(run)
    return None


def is_affected(
    pattern: TravelPattern,
    event: DelayEvent,
    network: Network,
    *,
    window_pad_minutes: float = WINDOW_PAD_MINUTES,
    route_cache: RouteCache | None = None,
) -> AffectedInstance | None:
    """Spatial-then-temporal overlap test; None when not affected."""
    cache = route_cache or RouteCache(network)
    route = cache.get(pattern.origin, pattern.dest)
    if route is None:
        return None
    run = _overlap_run(route, event, network)
    if run is None:
        return None
    offset = route.offset_of(run[0])
    center = pattern.entry_mean + offset
    half = pattern.entry_std + window_pad_minutes
    if center + half < event.start_minute or center - half > event.end_minute:
        return None
    return AffectedInstance(
        card_id=pattern.card_id,
        pattern=pattern,
        event_id=event.event_id,
        overlap_stations=run,
        segment_entry_minute=center,
        window=(event.start_minute, event.end_minute),
    )


def find_affected(
    patterns: Sequence[TravelPattern],
    events: Sequence[DelayEvent],
    network: Network,
    *,
    window_pad_minutes: float = WINDOW_PAD_MINUTES,
) -> list[AffectedInstance]:
    """All affected (pattern, event) pairs, one instance per (card, event).

    When several patterns of one card overlap the same event, the one
    whose expected segment-entry time is closest to the window midpoint
    wins (ties break on pattern id) so downstream records stay keyed by
    (card_id, event_id). Output sorted by (event_id, card_id).
    """
    cache = RouteCache(network)
    best: dict[tuple[int, str], AffectedInstance] = {}
    dropped = 0
    for event in events:
        mid = (event.start_minute + event.end_minute) / 2.0
        for pattern in patterns:
            inst = is_affected(
                pattern, event, network,
                window_pad_minutes=window_pad_minutes, route_cache=cache,
            )
            if inst is None:
                continue
            key = (event.event_id, pattern.card_id)
            if key in best:
                dropped += 1
                incumbent = best[key]
                if (abs(inst.segment_entry_minute - mid), inst.pattern.pattern_id) < (
                    abs(incumbent.segment_entry_minute - mid),
                    incumbent.pattern.pattern_id,
                ):
                    best[key] = inst
            else:
                best[key] = inst
    if dropped:
        log.info("deduplicated %d extra pattern overlaps onto (card, event) keys", dropped)
    return [best[k] for k in sorted(best)]


def started_before_delay(
    delay_day_records: Iterable[AfcRecord],
    pattern: TravelPattern,
    event: DelayEvent,
) -> bool:
    """Did the passenger tap in for the patterned trip before the delay began?

    True iff a metro entry exists at the pattern origin, no later than the
    event start and no earlier than mean minus three spreads (spread
    floored at 15 minutes). No taps at all means False.
    """
    floor = pattern.entry_mean - 3.0 * max(pattern.entry_std, STARTED_FLOOR_MINUTES)
    for record in delay_day_records:
        if record.txn_type is not TxnType.METRO_ENTRY:
            continue
        if record.location != pattern.origin:
            continue
        tod = minutes_of_day(record.timestamp)
        if floor <= tod <= event.start_minute:
            return True
    return False
