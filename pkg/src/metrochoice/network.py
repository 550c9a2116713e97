"""Static metro network model and deterministic route inference.

The network is a set of named lines, each an ordered station sequence.
Stations are identified by exact name; the same name on two lines is an
interchange. Fare gates only record origin/destination, so the path a
passenger takes is inferred here: minimum transfers first, then fewest
hops, then lexicographically smallest line-id sequence. All timing
constants (hop runtime, gate-to-platform access time, transfer penalty)
are carried by the network so routes can be timed consistently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_HOP_RUNTIME = 2.5
DEFAULT_ACCESS_TIME = 5.0
DEFAULT_TRANSFER_PENALTY = 4.0


class NetworkError(Exception):
    """Base error for network construction and routing."""


class DuplicateStationError(NetworkError):
    """A station appears twice within a single line."""


class UnknownStationError(NetworkError):
    """A referenced station is not on any line."""


class SameStationError(NetworkError):
    """Origin and destination are the same station."""


class UnreachableError(NetworkError):
    """No route exists between the two stations."""


class Direction(str, Enum):
    """Traversal direction relative to a line's declared station order.

    UP walks the declared sequence in increasing index order, DOWN in
    decreasing order.
    """

    UP = "Up"
    DOWN = "Down"

    @classmethod
    def parse(cls, text: str) -> "Direction":
        t = text.strip().lower()
        if t == "up":
            return cls.UP
        if t == "down":
            return cls.DOWN
        raise ValueError(f"not a direction: {text!r}")


@dataclass(frozen=True)
class Station:
    id: str
    name: str


@dataclass(frozen=True)
class Line:
    id: str
    stations: tuple[str, ...]
    hop_runtime: float

    def __post_init__(self) -> None:
        if len(self.stations) < 2:
            raise NetworkError(f"line {self.id}: needs at least 2 stations")
        if len(set(self.stations)) != len(self.stations):
            raise DuplicateStationError(f"line {self.id}: duplicate station in sequence")
        if self.hop_runtime <= 0:
            raise NetworkError(f"line {self.id}: hop_runtime must be positive")

    def index_of(self, station: str) -> int:
        return self.stations.index(station)

    def __contains__(self, station: str) -> bool:
        return station in self.stations


@dataclass(frozen=True)
class RouteLeg:
    """One ride on one line, boarding through alighting station inclusive."""

    line_id: str
    direction: Direction
    stations: tuple[str, ...]

    @property
    def hops(self) -> int:
        return len(self.stations) - 1


@dataclass(frozen=True)
class Route:
    """An inferred origin-to-destination path with per-station timing.

    ``stations`` flattens the legs with each transfer station listed once;
    ``offsets[i]`` is the minutes from the entry tap until arrival at
    ``stations[i]``. The first offset equals the access time, and each
    completed transfer adds the transfer penalty to everything after it.
    """

    origin: str
    dest: str
    legs: tuple[RouteLeg, ...]
    stations: tuple[str, ...]
    offsets: tuple[float, ...]

    @property
    def transfers(self) -> int:
        return len(self.legs) - 1

    @property
    def hops(self) -> int:
        return sum(leg.hops for leg in self.legs)

    def offset_of(self, station: str) -> float:
        """Minutes from tap-in to the first arrival at ``station``."""
        return self.offsets[self.stations.index(station)]


class Network:
    """Immutable line collection; safe to share across workers."""

    def __init__(
        self,
        lines: Sequence[Line],
        *,
        access_time: float = DEFAULT_ACCESS_TIME,
        transfer_penalty: float = DEFAULT_TRANSFER_PENALTY,
    ) -> None:
        if not lines:
            raise NetworkError("network needs at least one line")
        self.lines: dict[str, Line] = {}
        self._station_lines: dict[str, list[str]] = {}
        for line in lines:
            if line.id in self.lines:
                raise NetworkError(f"duplicate line id {line.id!r}")
            self.lines[line.id] = line
            for name in line.stations:
                self._station_lines.setdefault(name, []).append(line.id)
        for name in self._station_lines:
            self._station_lines[name].sort()
        self.access_time = access_time
        self.transfer_penalty = transfer_penalty

    @property
    def stations(self) -> dict[str, Station]:
        return {name: Station(id=name, name=name) for name in sorted(self._station_lines)}

    @property
    def station_names(self) -> frozenset[str]:
        return frozenset(self._station_lines)

    def lines_of(self, station: str) -> tuple[str, ...]:
        try:
            return tuple(self._station_lines[station])
        except KeyError:
            raise UnknownStationError(station) from None

    def interchanges(self) -> tuple[str, ...]:
        return tuple(sorted(n for n, ls in self._station_lines.items() if len(ls) > 1))

    def line(self, line_id: str) -> Line:
        return self.lines[line_id]

    def is_connected(self) -> bool:
        """True if every station is reachable from every other."""
        names = list(self._station_lines)
        if not names:
            return True
        seen = {names[0]}
        frontier = [names[0]]
        while frontier:
            cur = frontier.pop()
            for lid in self._station_lines[cur]:
                for nb in self.lines[lid].stations:
                    if nb not in seen:
                        seen.add(nb)
                        frontier.append(nb)
        return len(seen) == len(names)


def build_network(
    line_defs: Iterable[tuple[str, Sequence[str]]],
    *,
    hop_runtime: float = DEFAULT_HOP_RUNTIME,
    access_time: float = DEFAULT_ACCESS_TIME,
    transfer_penalty: float = DEFAULT_TRANSFER_PENALTY,
) -> Network:
    """Build a Network from (line id, ordered station names) pairs.

    Interchange stations are detected by exact name equality across lines.
    Raises DuplicateStationError if a line repeats a station and
    NetworkError on an empty line list.
    """
    lines = [
        Line(id=str(lid), stations=tuple(stations), hop_runtime=hop_runtime)
        for lid, stations in line_defs
    ]
    return Network(lines, access_time=access_time, transfer_penalty=transfer_penalty)


def load_network(path: str | Path) -> Network:
    """Load a network config file (lines plus the three timing constants)."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return build_network(
        [(entry["id"], entry["stations"]) for entry in raw["lines"]],
        hop_runtime=float(raw.get("hop_runtime_minutes", DEFAULT_HOP_RUNTIME)),
        access_time=float(raw.get("access_time_minutes", DEFAULT_ACCESS_TIME)),
        transfer_penalty=float(raw.get("transfer_penalty_minutes", DEFAULT_TRANSFER_PENALTY)),
    )


def dump_network(network: Network, path: str | Path) -> None:
    lines = [
        {"id": line.id, "stations": list(line.stations)}
        for line in sorted(network.lines.values(), key=lambda l: l.id)
    ]
    payload = {
        "access_time_minutes": network.access_time,
        "hop_runtime_minutes": next(iter(network.lines.values())).hop_runtime,
        "transfer_penalty_minutes": network.transfer_penalty,
        "lines": lines,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _line_sequences(network: Network, origin: str, dest: str) -> list[tuple[str, ...]]:
    """All line-id sequences with the minimum feasible transfer count.

    Breadth-first over the line adjacency graph (two lines are adjacent
    when they share a station). Sequences never repeat a line: a repeat
    can always be shortened without increasing transfers.
    """
    level: list[tuple[str, ...]] = [(lid,) for lid in sorted(network.lines_of(origin))]
    max_len = len(network.lines)
    while level:
        feasible = [seq for seq in level if dest in network.line(seq[-1])]
        if feasible:
            return feasible
        if len(level[0]) >= max_len:
            break
        nxt: list[tuple[str, ...]] = []
        for seq in level:
            last = network.line(seq[-1])
            last_set = set(last.stations)
            for lid in sorted(network.lines):
                if lid in seq:
                    continue
                if last_set.intersection(network.line(lid).stations):
                    nxt.append(seq + (lid,))
        level = nxt
    return []


def _min_hop_anchors(
    network: Network, seq: tuple[str, ...], origin: str, dest: str
) -> tuple[int, tuple[str, ...]] | None:
    """Minimal total hops for a line sequence, with the transfer stations.

    Anchors are (origin, t1, ..., dest); each leg must cover at least one
    hop. Hop ties resolve to the lexicographically smallest anchor tuple.
    Returns None when no valid transfer assignment exists.
    """
    states: dict[str, tuple[int, tuple[str, ...]]] = {origin: (0, (origin,))}
    for i, lid in enumerate(seq):
        line = network.line(lid)
        if i + 1 < len(seq):
            nxt_line = network.line(seq[i + 1])
            targets = sorted(set(line.stations) & set(nxt_line.stations))
        else:
            targets = [dest]
        nxt_states: dict[str, tuple[int, tuple[str, ...]]] = {}
        for target in targets:
            if target not in line:
                continue
            t_idx = line.index_of(target)
            best: tuple[int, tuple[str, ...]] | None = None
            for prev, (hops, anchors) in states.items():
                if prev not in line:
                    continue
                d = abs(t_idx - line.index_of(prev))
                if d == 0:
                    continue
                cand = (hops + d, anchors + (target,))
                if best is None or cand < best:
                    best = cand
            if best is not None:
                nxt_states[target] = best
        states = nxt_states
        if not states:
            return None
    return states.get(dest)


def shortest_route(network: Network, origin: str, dest: str) -> Route:
    """Deterministic minimum-transfer route between two stations.

    Ties break by fewest hops, then by lexicographic line-id sequence,
    then by smallest transfer-station names. Raises SameStationError,
    UnknownStationError or UnreachableError as appropriate.
    """
    if origin == dest:
        raise SameStationError(origin)
    for s in (origin, dest):
        if s not in network.station_names:
            raise UnknownStationError(s)

    best: tuple[int, tuple[str, ...], tuple[str, ...]] | None = None
    for seq in _line_sequences(network, origin, dest):
        solved = _min_hop_anchors(network, seq, origin, dest)
        if solved is None:
            continue
        hops, anchors = solved
        cand = (hops, seq, anchors)
        if best is None or cand < best:
            best = cand
    if best is None:
        raise UnreachableError(f"{origin} -> {dest}")

    _, seq, anchors = best
    legs: list[RouteLeg] = []
    for i, lid in enumerate(seq):
        line = network.line(lid)
        a, b = line.index_of(anchors[i]), line.index_of(anchors[i + 1])
        if a < b:
            stations = line.stations[a : b + 1]
            direction = Direction.UP
        else:
            stations = tuple(reversed(line.stations[b : a + 1]))
            direction = Direction.DOWN
        legs.append(RouteLeg(line_id=lid, direction=direction, stations=stations))

    flat: list[str] = list(legs[0].stations)
    offsets: list[float] = [network.access_time]
    off = network.access_time
    runtime = network.line(legs[0].line_id).hop_runtime
    for _ in range(legs[0].hops):
        off += runtime
        offsets.append(off)
    for leg in legs[1:]:
        off += network.transfer_penalty
        runtime = network.line(leg.line_id).hop_runtime
        for station in leg.stations[1:]:
            off += runtime
            flat.append(station)
            offsets.append(off)
    return Route(
        origin=origin,
        dest=dest,
        legs=tuple(legs),
        stations=tuple(flat),
        offsets=tuple(offsets),
    )
