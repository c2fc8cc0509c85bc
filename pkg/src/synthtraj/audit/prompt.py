"""Trajectory serialization and auditor prompt rendering."""

from __future__ import annotations

import csv
import io

from ..records import Record, iso_utc, parse_iso_utc
from ..vocab import Vocabulary, age_bin_token

__all__ = ["AUDIT_PROMPT_TEMPLATE", "CSV_PLACEHOLDER", "record_to_csv", "render_prompt"]

CSV_PLACEHOLDER = "[CSV Content Inserted Here]"

AUDIT_PROMPT_TEMPLATE = """You are an expert Chief Medical Officer and Data Quality Auditor. You are reviewing a patient record for clinical and logical validity.

### DATA FORMAT
You will be provided with a CSV content representing a patient's timeline.
- **time**: ISO 8601 timestamp. Events are chronological.
- **code**: The raw clinical identifier (e.g., ICD10CM, ICD10PCS, ATC, LAB test, Demographic tags like `SEX_F').
- **numerical_value**: The result for lab tests. NOTE: This field is empty/NaN for non-lab rows. Ignore empty values.
- **code_label**: Human-readable description of the code.

### EVALUATION CRITERIA
Analyze the record across three dimensions:
1. **Clinical Plausibility**: Do diagnoses, procedures, medications, and laboratory values make clinical sense together?
2. **Logical Consistency**: Check demographics (Age, Sex). Does a male patient have a pregnancy code?
3. **Temporal Coherence**: Are events ordered and spaced in a clinically realistic timeframe?

### SCORING RUBRIC
1-2: Clearly artificial; repetitive patterns, impossible values, or severe logic breaks.
3-4: Largely synthetic with frequent errors or "hallucinations".
5-6: Plausible but has subtle inconsistencies (e.g., odd medication choices).
7-8: Mostly realistic; minor temporal oddities but clinically sound.
9-10: Indistinguishable from real-world EHR trajectories.

### PATIENT RECORD from the csv
[CSV Content Inserted Here]

### OUTPUT FORMAT
You must respond in the following JSON format:
{
  "realism_score": <INTEGER 1-10>,
  "reasoning": "A brief summary of your analysis, highlighting realistic vs. synthetic elements."
}"""


def _demographic_rows(record: Record) -> list[tuple[str, str, str, str]]:
    t0 = record.visits[0].admit_time if record.visits else parse_iso_utc(
        f"{record.year:04d}-01-01T00:00:00Z"
    )
    when = iso_utc(t0)
    age_tok = age_bin_token(record.age_years)
    lo = (record.age_years // 5) * 5
    return [
        (when, age_tok, "", f"Age {lo} to {lo + 5} years"),
        (when, f"SEX_{record.sex.value}", "", f"Sex {record.sex.value}"),
        (when, f"RACE_{record.race.value}", "", f"Race {record.race.value.title()}"),
        (when, f"MARITAL_STATUS_{record.marital.value}", "", f"Marital status {record.marital.value.title()}"),
        (when, f"YEAR_{record.year}", "", f"First admission year {record.year}"),
    ]


def record_to_csv(record: Record, vocab: Vocabulary | None = None) -> str:
    """Serialize a record as the auditor's timeline table.

    Header time,code,numerical_value,code_label; leading demographic tag
    rows at the first admission timestamp, then events in ascending time
    order. numerical_value is empty for non-lab rows. RFC 4180 quoting.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL)
    writer.writerow(["time", "code", "numerical_value", "code_label"])
    for row in _demographic_rows(record):
        writer.writerow(row)
    events = [e for v in record.visits for e in v.events]
    events.sort(key=lambda e: e.time)
    for e in events:
        value = "" if e.value is None else repr(float(e.value))
        writer.writerow([iso_utc(e.time), e.code, value, e.label])
    if record.visits and record.visits[-1].death:
        last = record.visits[-1]
        writer.writerow([iso_utc(last.discharge_time), "DEATH", "", "In-hospital death"])
    return buf.getvalue()


def render_prompt(csv_text: str) -> str:
    """Substitute the CSV into the audit prompt at its placeholder."""
    if not csv_text:
        raise ValueError("empty CSV content")
    assert AUDIT_PROMPT_TEMPLATE.count(CSV_PLACEHOLDER) == 1
    return AUDIT_PROMPT_TEMPLATE.replace(CSV_PLACEHOLDER, csv_text)
