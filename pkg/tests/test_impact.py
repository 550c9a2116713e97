import random
from datetime import date, datetime

import pytest

from metrochoice.afc import AfcRecord, TxnType
from metrochoice.delays import DelayEvent, DelayType
from metrochoice.impact import (
    RouteCache,
    find_affected,
    is_affected,
    started_before_delay,
)
from metrochoice.network import Direction, build_network, shortest_route
from metrochoice.patterns import TravelPattern


def _pattern(origin, dest, mean, std=5.0, card="c1", pid=None):
    return TravelPattern(
        card_id=card,
        pattern_id=pid or f"{card}:{origin}->{dest}:0",
        origin=origin,
        dest=dest,
        entry_mean=mean,
        entry_std=std,
        mean_duration=35.0,
        trip_count=20,
        day_count=20,
    )


def _event(line, from_st, to_st, direction, start=470, end=516, eid=1, dtype=DelayType.OTHERS):
    return DelayEvent(
        event_id=eid,
        line=line,
        delay_type=dtype,
        date=date(2019, 8, 20),
        start_minute=start,
        end_minute=end,
        from_station=from_st,
        to_station=to_st,
        direction=direction,
    )


@pytest.fixture()
def toy_network():
    return build_network(
        [
            ("L1", ["A1", "A2", "A3", "A4", "X", "A5", "A6", "A7"]),
            ("L2", ["B1", "B2", "X", "B3", "B4", "B5"]),
            ("L3", ["C1", "A2", "C2", "C3"]),
        ]
    )


def test_disjoint_lines_not_affected(toy_network):
    pattern = _pattern("B1", "B5", 480)
    event = _event("L3", "C1", "C3", Direction.UP)
    assert is_affected(pattern, event, toy_network) is None


def test_direct_containment_row_twelve(shenzhen_network, shenzhen_events):
    event = next(e for e in shenzhen_events if e.event_id == 12)
    pattern = _pattern("Minzhi", "Qianwan Park", mean=480.0, std=5.0)
    inst = is_affected(pattern, event, shenzhen_network)
    assert inst is not None
    route = shortest_route(shenzhen_network, "Minzhi", "Qianwan Park")
    assert inst.overlap_stations == route.legs[0].stations
    assert inst.window == (470, 516)


def test_direction_awareness(toy_network):
    up_event = _event("L1", "A2", "A4", Direction.UP)
    towards = _pattern("A1", "A6", 465)
    against = _pattern("A6", "A1", 465)
    assert is_affected(towards, up_event, toy_network) is not None
    assert is_affected(against, up_event, toy_network) is None


def test_endpoint_only_contact_not_affected(toy_network):
    # Route A1->A2 touches the interval boundary A2 but never rides inside.
    event = _event("L1", "A2", "A4", Direction.UP)
    pattern = _pattern("A1", "A2", 465)
    assert is_affected(pattern, event, toy_network) is None


def test_temporal_miss_not_affected(toy_network):
    event = _event("L1", "A2", "A4", Direction.UP, start=470, end=516)
    pattern = _pattern("A1", "A6", mean=700.0, std=2.0)
    assert is_affected(pattern, event, toy_network) is None


def test_route_failure_means_not_affected():
    net = build_network([("L1", ["A", "B"]), ("L2", ["C", "D"])])
    pattern = _pattern("A", "D", 480)
    event = _event("L1", "A", "B", Direction.UP)
    assert is_affected(pattern, event, net) is None


def _brute_force_oracle(pattern, event, network, pad):
    """Exhaustive oracle: enumerate every leg, every consecutive station
    pair, and test the timed window intersection directly."""
    try:
        route = shortest_route(network, pattern.origin, pattern.dest)
    except Exception:
        return False
    line = network.lines.get(event.line)
    if line is None:
        return False
    if event.from_station not in line or event.to_station not in line:
        return False
    lo = min(line.index_of(event.from_station), line.index_of(event.to_station))
    hi = max(line.index_of(event.from_station), line.index_of(event.to_station))
    for leg in route.legs:
        if leg.line_id != event.line or leg.direction != event.direction:
            continue
        for s_a, s_b in zip(leg.stations, leg.stations[1:]):
            if not (s_a in line and s_b in line):
                continue
            ia, ib = line.index_of(s_a), line.index_of(s_b)
            if not (lo <= ia <= hi and lo <= ib <= hi):
                continue
            # First in-interval station of this leg in traversal order.
            first = next(
                s for s in leg.stations if lo <= line.index_of(s) <= hi
            )
            offset = route.offset_of(first)
            w_lo = pattern.entry_mean - pattern.entry_std - pad + offset
            w_hi = pattern.entry_mean + pattern.entry_std + pad + offset
            if w_lo <= event.end_minute and event.start_minute <= w_hi:
                return True
    return False


def test_random_pairs_match_brute_force_oracle(toy_network):
    rng = random.Random(17)
    names = sorted(toy_network.station_names)
    events = []
    for eid in range(1, 7):
        line_id = rng.choice(sorted(toy_network.lines))
        line = toy_network.line(line_id)
        i, j = sorted(rng.sample(range(len(line.stations)), 2))
        start = rng.randrange(420, 600)
        events.append(
            _event(
                line_id,
                line.stations[i],
                line.stations[j],
                rng.choice([Direction.UP, Direction.DOWN]),
                start=start,
                end=start + rng.randrange(30, 90),
                eid=eid,
            )
        )
    checked = 0
    for _ in range(100):
        origin, dest = rng.sample(names, 2)
        pattern = _pattern(origin, dest, mean=rng.uniform(400, 700), std=rng.uniform(0, 10))
        event = rng.choice(events)
        got = is_affected(pattern, event, toy_network, window_pad_minutes=10.0)
        expected = _brute_force_oracle(pattern, event, toy_network, 10.0)
        assert (got is not None) == expected, (origin, dest, event.event_id)
        checked += 1
    assert checked == 100


def test_enlarging_window_is_monotone(toy_network):
    rng = random.Random(5)
    names = sorted(toy_network.station_names)
    event = _event("L1", "A2", "A4", Direction.UP, start=480, end=520)
    wider = _event("L1", "A2", "A4", Direction.UP, start=460, end=560)
    for _ in range(60):
        origin, dest = rng.sample(names, 2)
        pattern = _pattern(origin, dest, mean=rng.uniform(400, 650), std=rng.uniform(0, 8))
        if is_affected(pattern, event, toy_network) is not None:
            assert is_affected(pattern, wider, toy_network) is not None


def test_find_affected_dedupes_to_one_instance_per_card_event(toy_network):
    event = _event("L1", "A2", "A4", Direction.UP, start=470, end=520)
    close = _pattern("A1", "A6", mean=480, std=2.0, pid="c1:A1->A6:0")
    far = _pattern("A1", "A5", mean=500, std=2.0, pid="c1:A1->A5:0")
    instances = find_affected([close, far], [event], toy_network)
    assert len(instances) == 1
    mid = (event.start_minute + event.end_minute) / 2
    assert instances[0].pattern.pattern_id == min(
        (close, far),
        key=lambda p: (abs(p.entry_mean + 5.0 + 2.5 - mid), p.pattern_id),
    ).pattern_id


def test_find_affected_sorted_by_event_then_card(toy_network):
    e1 = _event("L1", "A2", "A4", Direction.UP, eid=1)
    e2 = _event("L1", "A2", "A4", Direction.UP, eid=2)
    pats = [
        _pattern("A1", "A6", 480, card="z9", pid="z9:A1->A6:0"),
        _pattern("A1", "A6", 480, card="a1", pid="a1:A1->A6:0"),
    ]
    instances = find_affected(pats, [e2, e1], toy_network)
    assert [(i.event_id, i.card_id) for i in instances] == [
        (1, "a1"), (1, "z9"), (2, "a1"), (2, "z9"),
    ]


def _tap(minute, station="A1", txn=TxnType.METRO_ENTRY, card="c1"):
    h, m = divmod(minute, 60)
    return AfcRecord(card, datetime(2019, 8, 20, h, m), txn, "L1", station)


def test_started_before_delay_true():
    pattern = _pattern("A1", "A6", mean=455.0, std=5.0)
    event = _event("L1", "A2", "A4", Direction.UP, start=470)
    assert started_before_delay([_tap(450)], pattern, event)


def test_started_before_delay_no_taps():
    pattern = _pattern("A1", "A6", mean=455.0)
    event = _event("L1", "A2", "A4", Direction.UP, start=470)
    assert not started_before_delay([], pattern, event)


def test_started_before_delay_late_entry():
    pattern = _pattern("A1", "A6", mean=455.0)
    event = _event("L1", "A2", "A4", Direction.UP, start=470)
    assert not started_before_delay([_tap(490)], pattern, event)


def test_started_ignores_wrong_station_and_old_taps():
    pattern = _pattern("A1", "A6", mean=455.0, std=2.0)
    event = _event("L1", "A2", "A4", Direction.UP, start=470)
    assert not started_before_delay([_tap(450, station="A3")], pattern, event)
    # Far earlier than mean minus three spreads (floored at 15 min).
    assert not started_before_delay([_tap(300)], pattern, event)
    exit_only = _tap(450, txn=TxnType.METRO_EXIT)
    assert not started_before_delay([exit_only], pattern, event)


def test_route_cache_reuses_and_logs_failures():
    net = build_network([("L1", ["A", "B"]), ("L2", ["C", "D"])])
    cache = RouteCache(net)
    assert cache.get("A", "B") is not None
    assert cache.get("A", "C") is None
    assert cache.get("A", "C") is None  # cached miss
