import re
from datetime import date
from pathlib import Path

import pytest

from metrochoice.choices import ChoiceLabel, ChoiceRecord, DelayPeriod
from metrochoice.delays import DelayEvent, DelayType
from metrochoice.network import Direction
from metrochoice.prompts import PromptError, PromptTemplate, build_prompt

FIXTURES = Path(__file__).resolve().parent / "data"

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


def _record(i, label=ChoiceLabel.WAIT):
    return ChoiceRecord(
        f"card{i}", 12, DelayType.OTHERS, DelayPeriod.MORNING_PEAK, 30.0 + i, i % 2 == 0, 4.5, label
    )


def test_prompt_contains_all_five_feature_names_and_three_subquestions():
    text = build_prompt([_record(1)], EVENT).render()
    for name in (
        "delay_type",
        "delay_period",
        "avg_trip_duration_min",
        "started_before_delay",
        "entry_time_std_min",
    ):
        assert name in text
    assert len(re.findall(r"^Sub-question \d:", text, re.MULTILINE)) == 3


def test_batch_of_four_yields_four_dense_numbered_cases():
    bundle = build_prompt([_record(i) for i in range(4)], EVENT)
    assert len(bundle.cases) == 4
    numbers = [int(re.match(r"Case (\d+):", c).group(1)) for c in bundle.cases]
    assert numbers == [1, 2, 3, 4]


def test_golden_prompt_is_byte_stable():
    records = [
        ChoiceRecord("6878***27", 12, DelayType.OTHERS, DelayPeriod.MORNING_PEAK, 35.0, False, 8.2, ChoiceLabel.WAIT),
        ChoiceRecord("3204***40", 12, DelayType.OTHERS, DelayPeriod.MORNING_PEAK, 22.5, True, 1.25, ChoiceLabel.ABANDON),
    ]
    text = build_prompt(records, EVENT).render()
    golden = (FIXTURES / "golden_prompt.txt").read_text(encoding="utf-8")
    assert text == golden


def test_rendering_is_pure():
    records = [_record(i) for i in range(3)]
    a = build_prompt(records, EVENT).render()
    b = build_prompt(records, EVENT).render()
    assert a == b


def test_oversized_batch_rejected():
    with pytest.raises(PromptError, match="oversized-batch"):
        build_prompt([_record(i) for i in range(11)], EVENT)


def test_empty_batch_rejected():
    with pytest.raises(PromptError, match="empty-batch"):
        build_prompt([], EVENT)


def test_template_requires_exactly_three_subquestions():
    with pytest.raises(PromptError):
        PromptTemplate(cot_questions=("one?", "two?"))


def test_labels_never_leak_into_the_prompt():
    labeled = [_record(1, ChoiceLabel.ABANDON), _record(2, ChoiceLabel.WAIT)]
    stripped = [r.without_label() for r in labeled]
    assert build_prompt(labeled, EVENT).render() == build_prompt(stripped, EVENT).render()
    # Case lines themselves carry no label field.
    for case in build_prompt(labeled, EVENT).cases:
        assert "label" not in case.lower()
        assert "Wait" not in case and "Abandon" not in case


def test_bundle_keys_track_record_identity():
    bundle = build_prompt([_record(3), _record(7)], EVENT)
    assert bundle.keys == (("card3", 12), ("card7", 12))


def test_custom_template_subquestions_rendered():
    template = PromptTemplate(cot_questions=("q one?", "q two?", "q three?"))
    text = build_prompt([_record(1)], EVENT, template).render()
    assert "Sub-question 1: q one?" in text
    assert "Sub-question 3: q three?" in text
