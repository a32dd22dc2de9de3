"""Parsing, validation and per-day grouping of raw sensor event logs and labels.

Event CSV:  participant_id,timestamp,location   (ISO-8601 timestamps, UTC)
Label CSV:  participant_id,date,label            (label: positive | negative)
"""

import datetime
import logging
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from csv_helper import iter_csv_rows
from errors import IngestError, LabelError

logger = logging.getLogger(__name__)

EVENT_HEADER = ('participant_id', 'timestamp', 'location')
LABEL_HEADER = ('participant_id', 'date', 'label')

# PIR locations plus the sleep mat, whose enter/exit events are read as "Bed".
SENSOR_LOCATIONS = ('Lounge', 'Kitchen', 'Hallway', 'Bedroom', 'Bathroom', 'Bed')
NOWHERE = 'Nowhere'

POSITIVE = 'positive'
NEGATIVE = 'negative'

EARLIEST = datetime.datetime(2000, 1, 1, tzinfo=datetime.timezone.utc)
LATEST = datetime.datetime(2100, 1, 1, tzinfo=datetime.timezone.utc)


@dataclass(frozen=True, order=True)
class SensorEvent:
    participant_id: str
    timestamp: datetime.datetime
    location: str

    def to_dict(self):
        return {
            "participant_id": self.participant_id,
            "timestamp": format_timestamp(self.timestamp),
            "location": self.location,
        }


@dataclass(frozen=True)
class DayRecord:
    participant_id: str
    date: datetime.date
    events: Tuple[SensorEvent, ...] = ()

    @property
    def key(self) -> Tuple[str, datetime.date]:
        return self.participant_id, self.date


@dataclass(frozen=True)
class Label:
    participant_id: str
    date: datetime.date
    polarity: str


@dataclass(frozen=True)
class LabelSet:
    entries: Tuple[Label, ...] = ()

    def __len__(self):
        return len(self.entries)

    def by_participant(self) -> Dict[str, List[Label]]:
        grouped: Dict[str, List[Label]] = defaultdict(list)
        for entry in self.entries:
            grouped[entry.participant_id].append(entry)
        return dict(grouped)


@dataclass
class ValidationReport:
    unknown_locations: int = 0
    out_of_range: int = 0
    duplicates: int = 0
    findings: List[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.unknown_locations + self.out_of_range + self.duplicates

    def to_dict(self):
        return {
            "unknown_locations": self.unknown_locations,
            "out_of_range": self.out_of_range,
            "duplicates": self.duplicates,
            "findings": list(self.findings),
        }


@dataclass(frozen=True)
class CohortSummary:
    participants: int
    days: int
    events: int
    days_min: int
    days_median: float
    days_mean: float
    days_max: int
    first_date: Optional[datetime.date]
    last_date: Optional[datetime.date]

    def to_dict(self):
        return {
            "participants": self.participants,
            "days": self.days,
            "events": self.events,
            "days_min": self.days_min,
            "days_median": self.days_median,
            "days_mean": self.days_mean,
            "days_max": self.days_max,
            "first_date": self.first_date.isoformat() if self.first_date else None,
            "last_date": self.last_date.isoformat() if self.last_date else None,
        }


# ----------------------------------------------------------------------------
# Timestamps
# ----------------------------------------------------------------------------
def parse_timestamp(raw: str) -> datetime.datetime:
    """ISO-8601 to an aware UTC datetime truncated to the second.

    Naive timestamps are taken to be UTC already.
    """
    text = raw.strip()
    if text.endswith('Z') or text.endswith('z'):
        text = text[:-1] + '+00:00'
    ts = datetime.datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=datetime.timezone.utc)
    else:
        ts = ts.astimezone(datetime.timezone.utc)
    return ts.replace(microsecond=0)


def format_timestamp(ts: datetime.datetime) -> str:
    return ts.astimezone(datetime.timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


def utc_date(ts: datetime.datetime) -> datetime.date:
    return ts.astimezone(datetime.timezone.utc).date()


# ----------------------------------------------------------------------------
# Events
# ----------------------------------------------------------------------------
def parse_events(stream) -> List[SensorEvent]:
    events: List[SensorEvent] = []
    for line, row in iter_csv_rows(stream, EVENT_HEADER):
        for name in EVENT_HEADER:
            if not (row.get(name) or '').strip():
                raise IngestError(f"missing field: {name}", line=line)
        try:
            ts = parse_timestamp(row['timestamp'])
        except ValueError:
            raise IngestError(f"malformed timestamp: {row['timestamp']!r}", line=line)
        events.append(SensorEvent(row['participant_id'].strip(), ts, row['location'].strip()))
    logger.debug(f"Parsed {len(events)} events")
    return events


def load_events(path) -> List[SensorEvent]:
    with open(path, 'rb') as f:
        return parse_events(f)


def group_days(events: Iterable[SensorEvent]) -> List[DayRecord]:
    grouped: Dict[Tuple[str, datetime.date], List[SensorEvent]] = defaultdict(list)
    for event in events:
        grouped[(event.participant_id, utc_date(event.timestamp))].append(event)
    return [
        DayRecord(pid, date, tuple(sorted(grouped[(pid, date)], key=lambda e: (e.timestamp, e.location))))
        for pid, date in sorted(grouped)
    ]


def flatten_days(days: Iterable[DayRecord]) -> List[SensorEvent]:
    return [event for day in days for event in day.events]


def densify_days(days: Sequence[DayRecord]) -> List[DayRecord]:
    """Fill calendar gaps between each participant's first and last recorded day."""
    by_participant: Dict[str, Dict[datetime.date, DayRecord]] = defaultdict(dict)
    for day in days:
        by_participant[day.participant_id][day.date] = day
    dense: List[DayRecord] = []
    for pid in sorted(by_participant):
        recorded = by_participant[pid]
        current, last = min(recorded), max(recorded)
        while current <= last:
            dense.append(recorded.get(current) or DayRecord(pid, current, ()))
            current += datetime.timedelta(days=1)
    return dense


def validate_events(events: Sequence[SensorEvent],
                    vocabulary: Optional[Iterable[str]] = None,
                    earliest: datetime.datetime = EARLIEST,
                    latest: datetime.datetime = LATEST) -> ValidationReport:
    known = set(vocabulary) if vocabulary is not None else set(SENSOR_LOCATIONS) | {NOWHERE}
    report = ValidationReport()
    seen = set()
    for i, event in enumerate(events):
        if event.location not in known:
            report.unknown_locations += 1
            report.findings.append(f"event {i}: unknown location {event.location!r}")
        if not (earliest <= event.timestamp < latest):
            report.out_of_range += 1
            report.findings.append(f"event {i}: timestamp {format_timestamp(event.timestamp)} out of range")
        if event in seen:
            report.duplicates += 1
            report.findings.append(f"event {i}: duplicate of an earlier row")
        else:
            seen.add(event)
    if report.total:
        logger.warning(f"Validation found {report.total} issue(s) in {len(events)} events")
    return report


# ----------------------------------------------------------------------------
# Labels
# ----------------------------------------------------------------------------
def parse_labels(stream) -> LabelSet:
    entries: Dict[Tuple[str, datetime.date], Label] = {}
    for line, row in iter_csv_rows(stream, LABEL_HEADER, LabelError):
        for name in LABEL_HEADER:
            if not (row.get(name) or '').strip():
                raise LabelError(f"missing field: {name}", line=line)
        polarity = row['label'].strip().lower()
        if polarity not in (POSITIVE, NEGATIVE):
            raise LabelError(f"unknown label {row['label']!r} (expected positive or negative)", line=line)
        try:
            date = datetime.date.fromisoformat(row['date'].strip())
        except ValueError:
            raise LabelError(f"malformed date: {row['date']!r}", line=line)
        label = Label(row['participant_id'].strip(), date, polarity)
        key = (label.participant_id, label.date)
        existing = entries.get(key)
        if existing is not None and existing.polarity != polarity:
            raise LabelError(
                f"conflicting labels for {label.participant_id} on {date.isoformat()}", line=line)
        entries[key] = label
    return LabelSet(tuple(entries[k] for k in sorted(entries)))


def load_labels(path) -> LabelSet:
    with open(path, 'rb') as f:
        return parse_labels(f)


# ----------------------------------------------------------------------------
# Cohort description
# ----------------------------------------------------------------------------
def summarize_cohort(days: Sequence[DayRecord]) -> CohortSummary:
    per_participant = Counter(day.participant_id for day in days)
    counts = list(per_participant.values())
    dates = [day.date for day in days]
    return CohortSummary(
        participants=len(per_participant),
        days=len(days),
        events=sum(len(day.events) for day in days),
        days_min=min(counts) if counts else 0,
        days_median=float(statistics.median(counts)) if counts else 0.0,
        days_mean=float(statistics.mean(counts)) if counts else 0.0,
        days_max=max(counts) if counts else 0,
        first_date=min(dates) if dates else None,
        last_date=max(dates) if dates else None,
    )


def location_histogram(events: Sequence[SensorEvent], bin_minutes: int = 60) -> pd.DataFrame:
    """Recordings per time-of-day bin and location."""
    if bin_minutes <= 0 or (24 * 60) % bin_minutes:
        raise IngestError(f"bin_minutes must divide a day, got {bin_minutes}")
    frame = pd.DataFrame({
        'bin': [(e.timestamp.hour * 60 + e.timestamp.minute) // bin_minutes for e in events],
        'location': [e.location for e in events],
    })
    if frame.empty:
        return pd.DataFrame(columns=['bin', 'location', 'count'])
    table = frame.groupby(['bin', 'location']).size().reset_index(name='count')
    return table.sort_values(['bin', 'location']).reset_index(drop=True)
