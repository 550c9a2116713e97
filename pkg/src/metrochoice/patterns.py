"""Regular-passenger screening and travel-pattern mining.

A card is regular when it travels on enough distinct days and keeps at
least one origin-destination pair across enough of them. Patterns are
found per OD pair by one-dimensional density clustering of entry
times-of-day: sort, cut gaps wider than eps, keep clusters with at least
min_pts trips. Deterministic and order-free by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

from .afc import Trip

DAY_THRESHOLD = 20
OD_DAY_THRESHOLD = 10
EPS_MINUTES = 45.0
MIN_PTS = 5


def minutes_of_day(dt: datetime) -> float:
    return dt.hour * 60.0 + dt.minute + dt.second / 60.0


def population_stats(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation (divide by n).

    Callers pass values in canonical sorted order so that results are
    bit-reproducible across independent computations of the same set.
    """
    n = len(values)
    if n == 0:
        raise ValueError("empty value set")
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


@dataclass(frozen=True)
class TravelPattern:
    """A recurring OD habit: entry-time cluster plus duration statistics."""

    card_id: str
    pattern_id: str
    origin: str
    dest: str
    entry_mean: float
    entry_std: float
    mean_duration: float
    trip_count: int
    day_count: int


@dataclass(frozen=True)
class RegularPassenger:
    card_id: str
    travel_day_count: int
    patterns: tuple[TravelPattern, ...]


def screen_regulars(
    trips: Iterable[Trip],
    day_threshold: int = DAY_THRESHOLD,
    od_day_threshold: int = OD_DAY_THRESHOLD,
) -> dict[str, dict[tuple[str, str], int]]:
    """Select candidate cards and report their per-OD distinct-day counts.

    A card qualifies iff it has at least ``day_threshold`` distinct travel
    days and at least one OD pair seen on ``od_day_threshold`` distinct
    days (the spatial-consistency criterion). Same-station journeys count
    toward travel days but not toward any OD pair.
    """
    days_by_card: dict[str, set] = {}
    od_days: dict[str, dict[tuple[str, str], set]] = {}
    for trip in trips:
        days_by_card.setdefault(trip.card_id, set()).add(trip.travel_date)
        if trip.same_station:
            continue
        od_days.setdefault(trip.card_id, {}).setdefault((trip.origin, trip.dest), set()).add(
            trip.travel_date
        )
    out: dict[str, dict[tuple[str, str], int]] = {}
    for card, days in days_by_card.items():
        if len(days) < day_threshold:
            continue
        per_od = {od: len(ds) for od, ds in od_days.get(card, {}).items()}
        if not per_od or max(per_od.values()) < od_day_threshold:
            continue
        out[card] = per_od
    return out


def _gap_clusters(sorted_values: list[float], eps: float) -> list[tuple[int, int]]:
    """Index ranges [start, end) of clusters cut at gaps strictly > eps."""
    if not sorted_values:
        return []
    spans = []
    start = 0
    for i in range(1, len(sorted_values)):
        if sorted_values[i] - sorted_values[i - 1] > eps:
            spans.append((start, i))
            start = i
    spans.append((start, len(sorted_values)))
    return spans


def mine_card_patterns(
    card_id: str,
    trips: Sequence[Trip],
    eps_minutes: float = EPS_MINUTES,
    min_pts: int = MIN_PTS,
) -> list[TravelPattern]:
    """Cluster a screened card's trips into travel patterns, per OD pair.

    Entry times-of-day live on a linear 0..1440 axis (no midnight
    wraparound). Clusters smaller than ``min_pts`` yield no pattern;
    same-station journeys are excluded up front.
    """
    by_od: dict[tuple[str, str], list[Trip]] = {}
    for trip in trips:
        if trip.card_id != card_id or trip.same_station:
            continue
        by_od.setdefault((trip.origin, trip.dest), []).append(trip)

    patterns: list[TravelPattern] = []
    for (origin, dest), members in sorted(by_od.items()):
        members.sort(key=lambda t: (minutes_of_day(t.entry_time), t.entry_time, t.exit_time))
        times = [minutes_of_day(t.entry_time) for t in members]
        cluster_idx = 0
        for start, end in _gap_clusters(times, eps_minutes):
            cluster = members[start:end]
            if len(cluster) < min_pts:
                continue
            entry_mean, entry_std = population_stats(times[start:end])
            mean_duration = sum(t.duration for t in cluster) / len(cluster)
            patterns.append(
                TravelPattern(
                    card_id=card_id,
                    pattern_id=f"{card_id}:{origin}->{dest}:{cluster_idx}",
                    origin=origin,
                    dest=dest,
                    entry_mean=entry_mean,
                    entry_std=entry_std,
                    mean_duration=mean_duration,
                    trip_count=len(cluster),
                    day_count=len({t.travel_date for t in cluster}),
                )
            )
            cluster_idx += 1
    return patterns


def extract_regulars(
    trips: Sequence[Trip],
    day_threshold: int = DAY_THRESHOLD,
    od_day_threshold: int = OD_DAY_THRESHOLD,
    eps_minutes: float = EPS_MINUTES,
    min_pts: int = MIN_PTS,
) -> list[RegularPassenger]:
    """Screen then mine; cards whose mining yields no pattern are dropped."""
    screened = screen_regulars(trips, day_threshold, od_day_threshold)
    by_card: dict[str, list[Trip]] = {}
    for trip in trips:
        if trip.card_id in screened:
            by_card.setdefault(trip.card_id, []).append(trip)
    regulars = []
    for card in sorted(screened):
        mined = mine_card_patterns(card, by_card[card], eps_minutes, min_pts)
        if not mined:
            continue
        day_count = len({t.travel_date for t in by_card[card]})
        regulars.append(
            RegularPassenger(card_id=card, travel_day_count=day_count, patterns=tuple(mined))
        )
    return regulars


PATTERN_HEADER = [
    "card_id",
    "pattern_id",
    "origin",
    "dest",
    "entry_mean",
    "entry_std",
    "mean_duration",
    "trip_count",
    "day_count",
]


def write_patterns(patterns: Iterable[TravelPattern], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PATTERN_HEADER)
        for p in patterns:
            writer.writerow(
                [
                    p.card_id,
                    p.pattern_id,
                    p.origin,
                    p.dest,
                    f"{p.entry_mean:.3f}",
                    f"{p.entry_std:.3f}",
                    f"{p.mean_duration:.3f}",
                    p.trip_count,
                    p.day_count,
                ]
            )


def read_patterns(path: str | Path) -> list[TravelPattern]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            out.append(
                TravelPattern(
                    card_id=row[0],
                    pattern_id=row[1],
                    origin=row[2],
                    dest=row[3],
                    entry_mean=float(row[4]),
                    entry_std=float(row[5]),
                    mean_duration=float(row[6]),
                    trip_count=int(row[7]),
                    day_count=int(row[8]),
                )
            )
    return out


def write_regulars(regulars: Iterable[RegularPassenger], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["card_id", "travel_day_count", "pattern_count"])
        for r in regulars:
            writer.writerow([r.card_id, r.travel_day_count, len(r.patterns)])
