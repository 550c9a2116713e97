"""Fare-collection stream parsing and per-card trip reconstruction.

Input rows carry five fields in fixed order: card id, timestamp
(yyyyMMddHHmmss), transaction type, operating company, and station or bus
route. Malformed rows never abort a batch; they are rejected with a
reason code. Reconstruction pairs each metro entry with the next metro
exit of the same card and surfaces everything else as anomalies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, datetime
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

DEFAULT_MAX_TRIP_MINUTES = 240.0


class TxnType(Enum):
    METRO_ENTRY = "Metro (Entry)"
    METRO_EXIT = "Metro (Exit)"
    BUS = "Bus"
    BUS_QR = "Bus QR Code"


_TXN_BY_STRING = {t.value: t for t in TxnType}


@dataclass(frozen=True)
class AfcRecord:
    card_id: str
    timestamp: datetime
    txn_type: TxnType
    operator: str
    location: str

    @property
    def is_metro(self) -> bool:
        return self.txn_type in (TxnType.METRO_ENTRY, TxnType.METRO_EXIT)


@dataclass(frozen=True)
class Trip:
    """One reconstructed entry-to-exit journey for a single card."""

    card_id: str
    origin: str
    entry_time: datetime
    dest: str
    exit_time: datetime
    same_station: bool = False

    @property
    def duration(self) -> float:
        return (self.exit_time - self.entry_time).total_seconds() / 60.0

    @property
    def travel_date(self) -> date:
        return self.entry_time.date()


@dataclass(frozen=True)
class RejectedRow:
    row_number: int
    reason: str
    raw: str


@dataclass(frozen=True)
class Anomaly:
    reason: str
    card_id: str
    record_count: int
    detail: str


@dataclass
class IngestReport:
    accepted: int = 0
    rejected: list[RejectedRow] = field(default_factory=list)
    anomalies: list[Anomaly] = field(default_factory=list)

    @property
    def input_rows(self) -> int:
        return self.accepted + len(self.rejected)


@dataclass(frozen=True)
class Calendar:
    """Explicit weekday calendar; dates not listed as weekday are filtered."""

    weekdays: frozenset[date]

    def allows(self, d: date) -> bool:
        return d in self.weekdays

    @classmethod
    def load(cls, path: str | Path) -> "Calendar":
        days = set()
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            for row in reader:
                if not row or row[0] == "date":
                    continue
                d, tag = row[0].strip(), row[1].strip().lower()
                if tag == "weekday":
                    days.add(date.fromisoformat(d))
        return cls(weekdays=frozenset(days))

    def dump(self, path: str | Path, excluded: Iterable[date] = ()) -> None:
        rows = [(d, "weekday") for d in self.weekdays]
        rows += [(d, "excluded") for d in excluded]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["date", "tag"])
            for d, tag in sorted(rows):
                writer.writerow([d.isoformat(), tag])


def parse_timestamp(text: str) -> datetime:
    """Parse a 14-digit yyyyMMddHHmmss stamp, validating the calendar instant."""
    if len(text) != 14 or not text.isdigit():
        raise ValueError(f"bad timestamp {text!r}")
    return datetime(
        int(text[0:4]),
        int(text[4:6]),
        int(text[6:8]),
        int(text[8:10]),
        int(text[10:12]),
        int(text[12:14]),
    )


def format_timestamp(dt: datetime) -> str:
    return f"{dt.year:04d}{dt.month:02d}{dt.day:02d}{dt.hour:02d}{dt.minute:02d}{dt.second:02d}"


def parse_afc(
    source: Iterable[str],
    calendar: Calendar | None = None,
) -> tuple[list[AfcRecord], IngestReport]:
    """Parse a raw transaction stream into records plus an ingest report.

    Valid records come back in input order. When a calendar is given,
    rows dated outside its weekdays are rejected with reason
    ``non-weekday``. Bus rows are kept; they matter later as abandonment
    evidence.
    """
    records: list[AfcRecord] = []
    report = IngestReport()
    for row_no, row in enumerate(csv.reader(source), start=1):
        if not row:
            continue
        raw = ",".join(row)
        if len(row) != 5:
            report.rejected.append(RejectedRow(row_no, "field-count", raw))
            continue
        card, ts_text, txn_text, operator, location = (f.strip() for f in row)
        if not card or not location:
            report.rejected.append(RejectedRow(row_no, "blank-field", raw))
            continue
        try:
            ts = parse_timestamp(ts_text)
        except ValueError:
            report.rejected.append(RejectedRow(row_no, "malformed-timestamp", raw))
            continue
        txn = _TXN_BY_STRING.get(txn_text)
        if txn is None:
            report.rejected.append(RejectedRow(row_no, "unknown-transaction-type", raw))
            continue
        if calendar is not None and not calendar.allows(ts.date()):
            report.rejected.append(RejectedRow(row_no, "non-weekday", raw))
            continue
        records.append(AfcRecord(card, ts, txn, operator, location))
        report.accepted += 1
    return records, report


def parse_afc_file(
    path: str | Path, calendar: Calendar | None = None
) -> tuple[list[AfcRecord], IngestReport]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_afc(fh, calendar)


def reconstruct_trips(
    records: Iterable[AfcRecord],
    max_trip_duration: float = DEFAULT_MAX_TRIP_MINUTES,
) -> tuple[list[Trip], list[Anomaly]]:
    """Pair metro entries with exits per card, in chronological order.

    Entries and exits that break alternation become anomalies, as do
    trips longer than ``max_trip_duration`` minutes or with non-positive
    duration. Bus records are never consumed. Output order is canonical:
    trips sorted by (card, entry time), so shuffled input yields the same
    result.
    """
    indexed = sorted(
        ((r, i) for i, r in enumerate(records) if r.is_metro),
        key=lambda pair: (pair[0].card_id, pair[0].timestamp, pair[1]),
    )
    trips: list[Trip] = []
    anomalies: list[Anomaly] = []
    pending: AfcRecord | None = None
    current_card: str | None = None

    def flush_pending() -> None:
        nonlocal pending
        if pending is not None:
            anomalies.append(
                Anomaly(
                    "unmatched-entry",
                    pending.card_id,
                    1,
                    f"entry {pending.location} @ {pending.timestamp.isoformat()}",
                )
            )
            pending = None

    for record, _ in indexed:
        if record.card_id != current_card:
            flush_pending()
            current_card = record.card_id
        if record.txn_type is TxnType.METRO_ENTRY:
            flush_pending()
            pending = record
        else:
            if pending is None:
                anomalies.append(
                    Anomaly(
                        "unmatched-exit",
                        record.card_id,
                        1,
                        f"exit {record.location} @ {record.timestamp.isoformat()}",
                    )
                )
                continue
            duration = (record.timestamp - pending.timestamp).total_seconds() / 60.0
            if duration <= 0:
                anomalies.append(
                    Anomaly(
                        "non-positive-duration",
                        record.card_id,
                        2,
                        f"{pending.location}->{record.location} @ {pending.timestamp.isoformat()}",
                    )
                )
            elif duration > max_trip_duration:
                anomalies.append(
                    Anomaly(
                        "over-long-trip",
                        record.card_id,
                        2,
                        f"{pending.location}->{record.location} {duration:.1f} min",
                    )
                )
            else:
                trips.append(
                    Trip(
                        card_id=record.card_id,
                        origin=pending.location,
                        entry_time=pending.timestamp,
                        dest=record.location,
                        exit_time=record.timestamp,
                        same_station=pending.location == record.location,
                    )
                )
            pending = None
    flush_pending()
    return trips, anomalies


TRIP_HEADER = ["card_id", "origin", "entry_time", "dest", "exit_time", "duration_minutes", "same_station"]


def write_trips(trips: Iterable[Trip], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIP_HEADER)
        for t in trips:
            writer.writerow(
                [
                    t.card_id,
                    t.origin,
                    t.entry_time.isoformat(sep=" "),
                    t.dest,
                    t.exit_time.isoformat(sep=" "),
                    f"{t.duration:.3f}",
                    "true" if t.same_station else "false",
                ]
            )


def read_trips(path: str | Path) -> list[Trip]:
    trips = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        for row in reader:
            entry = datetime.fromisoformat(row[2])
            exit_ = datetime.fromisoformat(row[4])
            trips.append(
                Trip(
                    card_id=row[0],
                    origin=row[1],
                    entry_time=entry,
                    dest=row[3],
                    exit_time=exit_,
                    same_station=row[6] == "true",
                )
            )
    return trips


def _record_iter_rows(records: Iterable[AfcRecord]) -> Iterator[list[str]]:
    for r in records:
        yield [r.card_id, format_timestamp(r.timestamp), r.txn_type.value, r.operator, r.location]


def write_afc(records: Iterable[AfcRecord], path: str | Path) -> None:
    """Write records in the five-column transaction format (no header)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in _record_iter_rows(records):
            writer.writerow(row)
