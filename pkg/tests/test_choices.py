import math
import random
from datetime import date, datetime, timedelta

import pytest

from metrochoice.afc import AfcRecord, Trip, TxnType
from metrochoice.choices import (
    ChoiceLabel,
    ChoiceRecord,
    DecisionRule,
    DelayPeriod,
    bucket_delay_period,
    featurize,
    label_choice,
    read_dataset,
    urgency,
    urgency_from_times,
    write_dataset,
)
from metrochoice.delays import DelayEvent, DelayType
from metrochoice.impact import AffectedInstance
from metrochoice.network import Direction
from metrochoice.patterns import TravelPattern

EVENT = DelayEvent(
    event_id=12,
    line="Line 5",
    delay_type=DelayType.OTHERS,
    date=date(2019, 8, 20),
    start_minute=470,
    end_minute=516,
    from_station="Minzhi",
    to_station="Qianwan Park",
    direction=Direction.DOWN,
)

PATTERN = TravelPattern(
    card_id="c1",
    pattern_id="c1:Minzhi->Qianwan Park:0",
    origin="Minzhi",
    dest="Qianwan Park",
    entry_mean=480.0,
    entry_std=5.0,
    mean_duration=35.0,
    trip_count=20,
    day_count=20,
)


def _trip(entry_minute, origin="Minzhi", dest="Qianwan Park", duration=35.0, card="c1"):
    entry = datetime(2019, 8, 20, 0, 0) + timedelta(minutes=entry_minute)
    return Trip(
        card, origin, entry, dest, entry + timedelta(minutes=duration),
        same_station=origin == dest,
    )


def _bus(minute):
    return AfcRecord(
        "c1",
        datetime(2019, 8, 20, 0, 0) + timedelta(minutes=minute),
        TxnType.BUS,
        "Bus Group",
        "M429",
    )


def test_completed_trip_after_recovery_is_wait():
    decision = label_choice([_trip(520)], [], PATTERN, EVENT)
    assert decision.label is ChoiceLabel.WAIT
    assert not decision.conflict


def test_no_trip_with_bus_tap_is_abandon_with_corroboration():
    decision = label_choice([], [_bus(500)], PATTERN, EVENT)
    assert decision.label is ChoiceLabel.ABANDON
    assert decision.bus_corroborated


def test_no_records_at_all_is_abandon():
    decision = label_choice([], [], PATTERN, EVENT)
    assert decision.label is ChoiceLabel.ABANDON
    assert not decision.bus_corroborated


def test_same_station_exit_inside_window_is_mid_trip_abandon():
    bail = _trip(465, dest="Minzhi", duration=15.0)  # exits 480, inside window
    decision = label_choice([bail], [], PATTERN, EVENT)
    assert decision.label is ChoiceLabel.ABANDON
    assert decision.mid_trip_exit


def test_conflict_resolves_wait_when_completed_trip_follows_bail():
    bail = _trip(460, dest="Minzhi", duration=20.0)  # exits 480
    completed = _trip(525)
    decision = label_choice([bail, completed], [], PATTERN, EVENT)
    assert decision.label is ChoiceLabel.WAIT
    assert decision.conflict


def test_conflict_resolves_abandon_when_bail_follows_trip():
    completed = _trip(430)  # within window lower bound (mean-3*std-slack)
    bail = _trip(470, dest="Minzhi", duration=20.0)  # exits 490 inside window
    decision = label_choice([completed, bail], [], PATTERN, EVENT)
    assert decision.label is ChoiceLabel.ABANDON
    assert decision.conflict


def test_trip_outside_entry_window_does_not_count_as_wait():
    far_too_late = _trip(600)  # after end + slack = 576
    decision = label_choice([far_too_late], [], PATTERN, EVENT)
    assert decision.label is ChoiceLabel.ABANDON


def test_other_od_trip_does_not_count():
    decision = label_choice([_trip(500, origin="Tanglang", dest="Chiwan")], [], PATTERN, EVENT)
    assert decision.label is ChoiceLabel.ABANDON


def test_labeling_is_order_invariant():
    trips = [_trip(525), _trip(460, dest="Minzhi", duration=20.0), _trip(610)]
    buses = [_bus(500), _bus(400)]
    rng = random.Random(3)
    baseline = label_choice(trips, buses, PATTERN, EVENT)
    for _ in range(10):
        t2, b2 = list(trips), list(buses)
        rng.shuffle(t2)
        rng.shuffle(b2)
        assert label_choice(t2, b2, PATTERN, EVENT) == baseline


def test_urgency_constant_times_is_zero():
    assert urgency_from_times([480.0, 480.0, 480.0]) == 0.0


def test_urgency_exact_hand_value():
    assert urgency_from_times([470.0, 480.0, 490.0]) == pytest.approx(math.sqrt(200.0 / 3.0))
    assert urgency_from_times([470.0, 480.0, 490.0]) == pytest.approx(8.165, abs=5e-4)


def test_urgency_single_element_is_zero():
    assert urgency_from_times([123.4]) == 0.0


def test_urgency_of_pattern_is_its_entry_std():
    assert urgency(PATTERN) == 5.0


def _instance():
    return AffectedInstance(
        card_id="c1",
        pattern=PATTERN,
        event_id=EVENT.event_id,
        overlap_stations=("Minzhi", "Shenzhen North"),
        segment_entry_minute=485.0,
        window=(470, 516),
    )


def test_featurize_field_mapping():
    pattern = TravelPattern(
        card_id="c1", pattern_id="p", origin="A", dest="B",
        entry_mean=480.0, entry_std=8.2, mean_duration=35.0,
        trip_count=10, day_count=10,
    )
    record = featurize(_instance(), pattern, EVENT, started=False)
    assert record.v1 is DelayType.OTHERS
    assert record.v2 is DelayPeriod.MORNING_PEAK
    assert record.p1 == 35.0
    assert record.p2 is False
    assert record.p3 == 8.2
    assert record.label is None


def test_featurize_has_exactly_five_features_plus_optional_label():
    record = featurize(_instance(), PATTERN, EVENT, started=True)
    fields = set(ChoiceRecord.__dataclass_fields__)
    assert fields == {"card_id", "event_id", "v1", "v2", "p1", "p2", "p3", "label"}
    assert {f for f in fields if f.startswith("v")} == {"v1", "v2"}
    assert {f for f in fields if f.startswith("p")} == {"p1", "p2", "p3"}
    assert record.without_label().label is None


def test_bucket_boundaries_total_function():
    assert bucket_delay_period(420) is DelayPeriod.MORNING_PEAK
    assert bucket_delay_period(569) is DelayPeriod.MORNING_PEAK
    assert bucket_delay_period(570) is DelayPeriod.OFF_PEAK
    assert bucket_delay_period(720) is DelayPeriod.OFF_PEAK
    assert bucket_delay_period(1020) is DelayPeriod.EVENING_PEAK
    assert bucket_delay_period(1169) is DelayPeriod.EVENING_PEAK
    assert bucket_delay_period(1170) is DelayPeriod.OFF_PEAK
    for minute in range(0, 1440, 7):
        assert bucket_delay_period(minute) in DelayPeriod


def test_decision_rule_matches_specified_cases():
    rule = DecisionRule()
    assert rule.abandons(DelayPeriod.MORNING_PEAK, False, 3.0)
    assert not rule.abandons(DelayPeriod.MORNING_PEAK, True, 3.0)
    assert not rule.abandons(DelayPeriod.OFF_PEAK, False, 3.0)
    assert not rule.abandons(DelayPeriod.MORNING_PEAK, False, 7.0)


def test_dataset_round_trip(tmp_path):
    records = [
        ChoiceRecord("c1", 12, DelayType.OTHERS, DelayPeriod.MORNING_PEAK, 35.0, False, 8.2, ChoiceLabel.WAIT),
        ChoiceRecord("c2", 3, DelayType.POWER_FAULT, DelayPeriod.OFF_PEAK, 22.5, True, 0.0, ChoiceLabel.ABANDON),
        ChoiceRecord("c3", 3, DelayType.VEHICLE_FAULT, DelayPeriod.EVENING_PEAK, 15.0, True, 2.25, None),
    ]
    path = tmp_path / "dataset.csv"
    write_dataset(records, path)
    loaded = read_dataset(path)
    assert loaded == records
    header = path.read_text().splitlines()[0]
    assert header == "card_id,event_id,v1,v2,p1,p2,p3,label"
