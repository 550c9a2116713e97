"""Prompt construction for the LLM choice predictor.

A prompt bundle carries a fixed-role preamble, a dataset description with
the feature glossary, the delay-event summary, the prediction task,
exactly three chain-of-thought sub-questions, the numbered cases (labels
stripped), and a strict output format demanding CHOICE and REASON lines
per case. Rendering is a pure function of (records, event, template):
identical inputs give identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .choices import ChoiceRecord
from .delays import DelayEvent

MAX_CASES_PER_PROMPT = 10

FEATURE_GLOSSARY = """- delay_type: cause category of the delay (VehicleFault, SignalingFault, PowerFault, ImproperOperation, Others)
- delay_period: time-of-day bucket of the delay start (MorningPeak, EveningPeak, OffPeak)
- avg_trip_duration_min: the rider's average completed trip time on this route, in minutes
- started_before_delay: true if the rider had already tapped in when the delay began
- entry_time_std_min: spread (standard deviation) of the rider's usual entry times, in minutes; a smaller spread means a tighter schedule and a more urgent trip"""

DEFAULT_SYSTEM_PREAMBLE = (
    "You are an operations analyst on duty for an urban metro network. "
    "Your job is to anticipate how affected frequent riders respond to a service delay."
)

DEFAULT_DATASET_DESCRIPTION = (
    "Each numbered case describes one frequent rider whose usual trip is caught "
    "in the delay below. Fields per case:\n" + FEATURE_GLOSSARY
)

DEFAULT_TASK_DESCRIPTION = (
    "For each numbered case, predict whether the rider WAITS for service to "
    "resume and completes the usual metro trip, or ABANDONS the metro for "
    "another transport mode."
)

DEFAULT_COT_QUESTIONS = (
    "How severely does this delay intersect the rider's planned trip in space and time?",
    "How urgent and inflexible is this rider, given entry_time_std_min and avg_trip_duration_min?",
    "Given started_before_delay and the delay period, is waiting cheaper for the rider than switching modes?",
)

DEFAULT_OUTPUT_FORMAT = """For every case output exactly two lines, prefixed by its case header:
Case N: CHOICE: WAIT or CHOICE: ABANDON
REASON: <one short sentence>
Use the same case numbers as above. Output nothing else."""


class PromptError(Exception):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    system_preamble: str = DEFAULT_SYSTEM_PREAMBLE
    dataset_description: str = DEFAULT_DATASET_DESCRIPTION
    task_description: str = DEFAULT_TASK_DESCRIPTION
    cot_questions: tuple[str, str, str] = DEFAULT_COT_QUESTIONS
    output_format_instruction: str = DEFAULT_OUTPUT_FORMAT
    max_cases: int = MAX_CASES_PER_PROMPT

    def __post_init__(self) -> None:
        if len(self.cot_questions) != 3:
            raise PromptError(f"need exactly 3 sub-questions, got {len(self.cot_questions)}")


@dataclass(frozen=True)
class PromptBundle:
    system_preamble: str
    dataset_description: str
    event_summary: str
    task_description: str
    cot_questions: tuple[str, str, str]
    cases: tuple[str, ...]
    output_format_instruction: str
    keys: tuple[tuple[str, int], ...]

    def render(self) -> str:
        cot = "\n".join(
            f"Sub-question {i}: {q}" for i, q in enumerate(self.cot_questions, start=1)
        )
        cases = "\n".join(self.cases)
        return (
            f"{self.system_preamble}\n"
            f"\n## Dataset description\n{self.dataset_description}\n"
            f"\n## Delay event\n{self.event_summary}\n"
            f"\n## Task\n{self.task_description}\n"
            f"\nThink through three sub-questions before answering each case:\n{cot}\n"
            f"\n## Cases\n{cases}\n"
            f"\n## Output format\n{self.output_format_instruction}\n"
        )


def serialize_case(number: int, record: ChoiceRecord) -> str:
    return (
        f"Case {number}: delay_type={record.v1.value}; "
        f"delay_period={record.v2.value}; "
        f"avg_trip_duration_min={record.p1:.3f}; "
        f"started_before_delay={'true' if record.p2 else 'false'}; "
        f"entry_time_std_min={record.p3:.3f}"
    )


def build_prompt(
    records: list[ChoiceRecord],
    event: DelayEvent,
    template: PromptTemplate | None = None,
) -> PromptBundle:
    """Render a batch of records for one event into a prompt bundle.

    Labels are stripped before serialization; a batch larger than the
    template's max_cases raises PromptError("oversized-batch").
    """
    template = template or PromptTemplate()
    if not records:
        raise PromptError("empty-batch")
    if len(records) > template.max_cases:
        raise PromptError(f"oversized-batch: {len(records)} > {template.max_cases}")
    stripped = [r.without_label() for r in records]
    cases = tuple(serialize_case(i, r) for i, r in enumerate(stripped, start=1))
    return PromptBundle(
        system_preamble=template.system_preamble,
        dataset_description=template.dataset_description,
        event_summary=event.summary(),
        task_description=template.task_description,
        cot_questions=template.cot_questions,
        cases=cases,
        output_format_instruction=template.output_format_instruction,
        keys=tuple(r.key for r in stripped),
    )
