"""Patient record data model, JSONL corpus I/O, and patient-level splitting.

A corpus is a list of patient records; each record carries static
demographics plus chronologically ordered visits of timestamped coded
events. Timestamps are UTC epoch seconds (second resolution).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "Category",
    "Sex",
    "Race",
    "Marital",
    "Event",
    "Visit",
    "Record",
    "Corpus",
    "CorpusError",
    "ParseError",
    "InvariantError",
    "load_corpus",
    "save_corpus",
    "split_corpus",
    "iso_utc",
    "parse_iso_utc",
]


class Category(Enum):
    DIAGNOSIS = "DIAGNOSIS"
    PROCEDURE = "PROCEDURE"
    MEDICATION = "MEDICATION"
    LAB = "LAB"


class Sex(Enum):
    M = "M"
    F = "F"


class Race(Enum):
    ASIAN = "ASIAN"
    BLACK = "BLACK"
    HISPANIC = "HISPANIC"
    OTHER = "OTHER"
    UNKNOWN = "UNKNOWN"
    WHITE = "WHITE"


class Marital(Enum):
    DIVORCED = "DIVORCED"
    MARRIED = "MARRIED"
    SINGLE = "SINGLE"
    UNKNOWN = "UNKNOWN"
    WIDOWED = "WIDOWED"


class CorpusError(Exception):
    """Base error for corpus loading and validation."""


class ParseError(CorpusError):
    """Malformed JSONL input; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class InvariantError(CorpusError):
    """A record violates a data-model invariant; names patient and rule."""

    def __init__(self, patient_id: str, rule: str):
        super().__init__(f"patient {patient_id!r}: {rule}")
        self.patient_id = patient_id
        self.rule = rule


def iso_utc(ts: int) -> str:
    """Epoch seconds to ISO 8601 UTC string with second resolution."""
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_iso_utc(text: str) -> int:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


@dataclass(frozen=True)
class Event:
    """One coded clinical event; `value`/`unit` are present only for labs."""

    time: int
    category: Category
    code: str
    label: str
    value: float | None = None
    unit: str | None = None


@dataclass(frozen=True)
class Visit:
    admit_time: int
    discharge_time: int
    events: tuple[Event, ...]
    death: bool = False


@dataclass(frozen=True)
class Record:
    patient_id: str
    age_years: int
    sex: Sex
    race: Race
    marital: Marital
    year: int
    visits: tuple[Visit, ...]

    def codes(self) -> list[tuple[Category, str]]:
        return [(e.category, e.code) for v in self.visits for e in v.events]


@dataclass
class Corpus:
    records: list[Record]
    name: str = ""
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def validate_record(record: Record) -> None:
    """Raise InvariantError on the first violated data-model rule."""
    prev_admit = None
    for i, visit in enumerate(record.visits):
        if visit.discharge_time < visit.admit_time:
            raise InvariantError(record.patient_id, f"visit {i}: discharge before admit")
        if prev_admit is not None and visit.admit_time < prev_admit:
            raise InvariantError(record.patient_id, f"visit {i}: visits not sorted by admit time")
        prev_admit = visit.admit_time
        prev_time = None
        for j, event in enumerate(visit.events):
            if not event.code:
                raise InvariantError(record.patient_id, f"visit {i} event {j}: empty code")
            if (event.value is not None) != (event.category is Category.LAB):
                raise InvariantError(
                    record.patient_id,
                    f"visit {i} event {j}: value present iff category is LAB",
                )
            if prev_time is not None and event.time < prev_time:
                raise InvariantError(record.patient_id, f"visit {i}: events not sorted by time")
            prev_time = event.time
            if not (visit.admit_time <= event.time <= visit.discharge_time):
                raise InvariantError(
                    record.patient_id, f"visit {i} event {j}: event time outside visit window"
                )
        if visit.death and i != len(record.visits) - 1:
            raise InvariantError(record.patient_id, f"visit {i}: death on a non-final visit")


def _event_to_json(event: Event) -> dict:
    out = {
        "time": iso_utc(event.time),
        "category": event.category.value,
        "code": event.code,
        "label": event.label,
    }
    if event.value is not None:
        out["value"] = event.value
    if event.unit is not None:
        out["unit"] = event.unit
    return out


def _record_to_json(record: Record) -> dict:
    return {
        "patient_id": record.patient_id,
        "age_years": record.age_years,
        "sex": record.sex.value,
        "race": record.race.value,
        "marital": record.marital.value,
        "year": record.year,
        "visits": [
            {
                "admit_time": iso_utc(v.admit_time),
                "discharge_time": iso_utc(v.discharge_time),
                "death": v.death,
                "events": [_event_to_json(e) for e in v.events],
            }
            for v in record.visits
        ],
    }


def _record_from_json(obj: dict) -> Record:
    visits = []
    for v in obj["visits"]:
        events = tuple(
            Event(
                time=parse_iso_utc(e["time"]),
                category=Category(e["category"]),
                code=e["code"],
                label=e["label"],
                value=e.get("value"),
                unit=e.get("unit"),
            )
            for e in v["events"]
        )
        visits.append(
            Visit(
                admit_time=parse_iso_utc(v["admit_time"]),
                discharge_time=parse_iso_utc(v["discharge_time"]),
                events=events,
                death=bool(v["death"]),
            )
        )
    return Record(
        patient_id=obj["patient_id"],
        age_years=int(obj["age_years"]),
        sex=Sex(obj["sex"]),
        race=Race(obj["race"]),
        marital=Marital(obj["marital"]),
        year=int(obj["year"]),
        visits=tuple(visits),
    )


def record_to_line(record: Record) -> str:
    """Deterministic single-line JSON serialization (fixed key order)."""
    return json.dumps(_record_to_json(record), separators=(",", ":"))


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write one record per line; key order is fixed for reproducible diffs."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for record in corpus.records:
            fh.write(record_to_line(record))
            fh.write("\n")


def load_corpus(path: str | Path, name: str | None = None) -> Corpus:
    """Load a JSONL corpus, validating every record invariant.

    Raises ParseError with the offending line number on malformed JSON and
    InvariantError naming the patient and rule on schema violations.
    """
    path = Path(path)
    records: list[Record] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(line_no, f"invalid JSON ({exc.msg})") from exc
            try:
                record = _record_from_json(obj)
            except (KeyError, ValueError, TypeError) as exc:
                raise ParseError(line_no, f"bad record field: {exc}") from exc
            validate_record(record)
            if record.patient_id in seen_ids:
                raise InvariantError(record.patient_id, "duplicate patient_id in corpus")
            seen_ids.add(record.patient_id)
            records.append(record)
    return Corpus(records=records, name=name if name is not None else path.stem)


def split_corpus(
    corpus: Corpus, ratios: tuple[float, float, float], seed: int
) -> tuple[Corpus, Corpus, Corpus]:
    """Patient-level split into (train, val, test).

    Val and test get floor(n * ratio) patients; the remainder stays in
    train. The shuffle is a deterministic permutation of record order.
    """
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(corpus.records)
    if n < 3:
        raise ValueError(f"need at least 3 patients to split, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test
    shuffled = [corpus.records[i] for i in order]
    make = lambda recs, tag: Corpus(records=recs, name=f"{corpus.name}.{tag}", seed=seed)
    return (
        make(shuffled[:n_train], "train"),
        make(shuffled[n_train : n_train + n_val], "val"),
        make(shuffled[n_train + n_val :], "test"),
    )
