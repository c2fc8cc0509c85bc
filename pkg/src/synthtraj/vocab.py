"""Atomic token vocabulary and sequence codec.

Every clinical concept is one indivisible token, so generated sequences can
never recombine fragments into non-existent codes. Continuous quantities are
discretized: lab values into 10 shared decile-bin tokens (edges learned per
test from training data) and time gaps into 14 fixed duration-interval
tokens. All gap intervals are closed on the upper edge.
"""

from __future__ import annotations

import json
import warnings
from bisect import bisect_left
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .records import Category, Corpus, Event, Marital, Race, Record, Sex, Visit, parse_iso_utc

__all__ = [
    "TokenKind",
    "Vocabulary",
    "TokenSequence",
    "Violation",
    "UnknownTokenError",
    "StructureError",
    "VocabError",
    "GAP_BIN_NAMES",
    "GAP_BIN_UPPER_SECONDS",
    "build_vocab",
    "gap_token",
    "lab_bin",
    "encode_record",
    "decode_sequence",
    "validate_sequence",
    "save_vocab",
    "load_vocab",
    "age_bin_token",
    "demographic_tokens",
]


class TokenKind(Enum):
    AGE = "AGE"
    SEX = "SEX"
    RACE = "RACE"
    MARITAL = "MARITAL"
    YEAR = "YEAR"
    DIAGNOSIS = "DIAGNOSIS"
    PROCEDURE = "PROCEDURE"
    MEDICATION = "MEDICATION"
    LAB_TEST = "LAB_TEST"
    LAB_QUANTILE = "LAB_QUANTILE"
    TIME_GAP = "TIME_GAP"
    DEATH = "DEATH"
    START_RECORD = "START_RECORD"
    START_VISIT = "START_VISIT"
    END_VISIT = "END_VISIT"
    END_RECORD = "END_RECORD"
    PADDING = "PADDING"


class VocabError(Exception):
    pass


class UnknownTokenError(VocabError):
    pass


class StructureError(VocabError):
    """Structurally invalid token sequence; carries the token index."""

    def __init__(self, index: int, message: str):
        super().__init__(f"token {index}: {message}")
        self.index = index


# 14 duration bins spanning minutes to months; upper edges in seconds,
# upper-edge inclusive. A month counts as 30 days.
_MIN, _HOUR, _DAY = 60, 3600, 86_400
_WEEK, _MONTH = 7 * _DAY, 30 * _DAY
GAP_BIN_NAMES = (
    "_<=5m", "_5m-15m", "_15m-1h", "_1h-2h", "_2h-6h", "_6h-12h", "_12h-1d",
    "_1d-3d", "_3d-1w", "_1w-2w", "_2w-1m", "_1m-3m", "_3m-6m", "_>6mt",
)
GAP_BIN_UPPER_SECONDS = (
    5 * _MIN, 15 * _MIN, _HOUR, 2 * _HOUR, 6 * _HOUR, 12 * _HOUR, _DAY,
    3 * _DAY, _WEEK, 2 * _WEEK, _MONTH, 3 * _MONTH, 6 * _MONTH, float("inf"),
)
# The open-ended top bin needs a finite ceiling when materializing durations.
_TOP_GAP_SAMPLING_CAP = 12 * _MONTH

STRUCTURE_TOKENS = ("START_RECORD", "START_VISIT", "END_VISIT", "END_RECORD", "PADDING")
QUANTILE_TOKENS = tuple(f"_Q{k}" for k in range(1, 11))

_CATEGORY_PREFIX = {
    Category.DIAGNOSIS: "DIAG_",
    Category.PROCEDURE: "PROC_",
    Category.MEDICATION: "MED_",
    Category.LAB: "LAB_",
}
_CATEGORY_KIND = {
    Category.DIAGNOSIS: TokenKind.DIAGNOSIS,
    Category.PROCEDURE: TokenKind.PROCEDURE,
    Category.MEDICATION: TokenKind.MEDICATION,
    Category.LAB: TokenKind.LAB_TEST,
}
_EVENT_KINDS = frozenset(
    {TokenKind.DIAGNOSIS, TokenKind.PROCEDURE, TokenKind.MEDICATION, TokenKind.LAB_TEST}
)
_DEMOGRAPHIC_KINDS = (TokenKind.AGE, TokenKind.SEX, TokenKind.RACE, TokenKind.MARITAL, TokenKind.YEAR)


def age_bin_token(age_years: int) -> str:
    lo = (int(age_years) // 5) * 5
    return f"AGE_{lo}_{lo + 5}_years"


def event_token(category: Category, code: str) -> str:
    return _CATEGORY_PREFIX[category] + code


@dataclass
class Vocabulary:
    """Bijective token registry with per-lab decile edges.

    Ids are contiguous from 0 in a deterministic layout: structure tokens,
    DEATH, the 10 shared quantile tokens, the 14 gap tokens, static
    demographic tokens, then event tokens sorted by (category, code).
    """

    token_to_id: dict[str, int]
    id_to_token: list[str]
    kinds: list[TokenKind]
    lab_bin_edges: dict[int, list[float]]  # LAB_TEST token id -> 11 ascending edges

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise UnknownTokenError(f"token not in vocabulary: {token!r}") from None

    def kind(self, token_id: int) -> TokenKind:
        return self.kinds[token_id]

    def ids_of_kind(self, kind: TokenKind) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k is kind]

    @property
    def quantile_ids(self) -> list[int]:
        return [self.token_to_id[t] for t in QUANTILE_TOKENS]

    def quantile_ids_for(self, lab_test_id: int) -> list[int]:
        if lab_test_id not in self.lab_bin_edges:
            raise UnknownTokenError(f"id {lab_test_id} is not a known lab test token")
        return self.quantile_ids

    @property
    def start_record_id(self) -> int:
        return self.token_to_id["START_RECORD"]

    @property
    def start_visit_id(self) -> int:
        return self.token_to_id["START_VISIT"]

    @property
    def end_visit_id(self) -> int:
        return self.token_to_id["END_VISIT"]

    @property
    def end_record_id(self) -> int:
        return self.token_to_id["END_RECORD"]

    @property
    def padding_id(self) -> int:
        return self.token_to_id["PADDING"]

    @property
    def death_id(self) -> int:
        return self.token_to_id["DEATH"]


@dataclass
class TokenSequence:
    ids: list[int]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Violation:
    index: int
    message: str


def _decile_edges(values: list[float], code: str) -> list[float]:
    """Empirical decile edges with min/max as outer edges.

    Inner edge k sits at the ceil(k*n/10)-th order statistic, so with n
    divisible by 10 and distinct values every bin holds exactly n/10 points.
    """
    s = sorted(values)
    n = len(s)
    edges = [s[0]]
    for k in range(1, 10):
        idx = max(0, min(n - 1, -(-k * n // 10) - 1))
        edges.append(s[idx])
    edges.append(s[-1])
    if len(set(s)) < 10:
        warnings.warn(
            f"lab {code}: fewer than 10 distinct training values, decile edges collapse ties",
            stacklevel=3,
        )
    return [float(e) for e in edges]


def build_vocab(train_corpus: Corpus) -> Vocabulary:
    """Build the token registry from a training corpus.

    Registers one token per distinct (category, code), the full enumerable
    static-attribute sets (all twenty 5-year age bins, sexes, races, marital
    statuses) plus the observed span of admission years, the shared quantile
    and gap tokens, the structure tokens, and DEATH.
    """
    if not train_corpus.records:
        raise VocabError("cannot build a vocabulary from an empty corpus")

    event_codes: set[tuple[str, str]] = set()
    lab_values: dict[str, list[float]] = {}
    years: set[int] = set()
    for record in train_corpus.records:
        years.add(record.year)
        for visit in record.visits:
            for ev in visit.events:
                event_codes.add((ev.category.value, ev.code))
                if ev.category is Category.LAB:
                    lab_values.setdefault(ev.code, []).append(float(ev.value))

    tokens: list[tuple[str, TokenKind]] = []
    tokens += [(t, TokenKind[t]) for t in STRUCTURE_TOKENS]
    tokens.append(("DEATH", TokenKind.DEATH))
    tokens += [(t, TokenKind.LAB_QUANTILE) for t in QUANTILE_TOKENS]
    tokens += [(t, TokenKind.TIME_GAP) for t in GAP_BIN_NAMES]
    tokens += [(age_bin_token(lo), TokenKind.AGE) for lo in range(0, 100, 5)]
    tokens += [(f"SEX_{s.value}", TokenKind.SEX) for s in Sex]
    tokens += [(f"RACE_{r.value}", TokenKind.RACE) for r in sorted(Race, key=lambda r: r.value)]
    tokens += [
        (f"MARITAL_STATUS_{m.value}", TokenKind.MARITAL)
        for m in sorted(Marital, key=lambda m: m.value)
    ]
    tokens += [(f"YEAR_{y}", TokenKind.YEAR) for y in range(min(years), max(years) + 1)]
    for cat_value, code in sorted(event_codes):
        cat = Category(cat_value)
        tokens.append((event_token(cat, code), _CATEGORY_KIND[cat]))

    token_to_id = {name: i for i, (name, _) in enumerate(tokens)}
    if len(token_to_id) != len(tokens):
        raise VocabError("token name collision while building vocabulary")
    vocab = Vocabulary(
        token_to_id=token_to_id,
        id_to_token=[name for name, _ in tokens],
        kinds=[kind for _, kind in tokens],
        lab_bin_edges={},
    )
    for code, values in sorted(lab_values.items()):
        lab_id = token_to_id[event_token(Category.LAB, code)]
        vocab.lab_bin_edges[lab_id] = _decile_edges(values, code)
    return vocab


def gap_bin_index(duration_seconds: float) -> int:
    """Map a non-negative duration to its 0-based gap-bin index."""
    if duration_seconds < 0:
        raise ValueError("duration must be non-negative")
    for i, upper in enumerate(GAP_BIN_UPPER_SECONDS):
        if duration_seconds <= upper:
            return i
    raise AssertionError("unreachable: last bin is unbounded")


def gap_token(duration_seconds: float, vocab: Vocabulary) -> int:
    return vocab.token_to_id[GAP_BIN_NAMES[gap_bin_index(duration_seconds)]]


def gap_bin_bounds(index: int) -> tuple[int, int]:
    """Closed integer sampling range [lo, hi] for a gap bin."""
    lo = 0 if index == 0 else int(GAP_BIN_UPPER_SECONDS[index - 1]) + 1
    upper = GAP_BIN_UPPER_SECONDS[index]
    hi = _TOP_GAP_SAMPLING_CAP if upper == float("inf") else int(upper)
    return lo, hi


def lab_bin(lab_test_id: int, value: float, vocab: Vocabulary) -> int:
    """Quantile token id for a lab value: bin k covers (edge[k-1], edge[k]].

    Values below the training minimum clamp to _Q1 and above the maximum to
    _Q10. Tied edges leave the intervening bins empty, preserving
    monotonicity.
    """
    edges = vocab.lab_bin_edges.get(lab_test_id)
    if edges is None:
        raise UnknownTokenError(f"id {lab_test_id} is not a known lab test token")
    k = 1 + bisect_left(edges[1:10], value)
    k = min(max(k, 1), 10)
    return vocab.quantile_ids[k - 1]


def quantile_bounds(lab_test_id: int, quantile_index: int, vocab: Vocabulary) -> tuple[float, float]:
    """Value range (edges) covered by 1-based quantile bin `quantile_index`."""
    edges = vocab.lab_bin_edges[lab_test_id]
    return edges[quantile_index - 1], edges[quantile_index]


def demographic_tokens(record: Record, vocab: Vocabulary) -> list[int]:
    """The fixed 5-token static prefix: age, sex, race, marital, year."""
    names = [
        age_bin_token(record.age_years),
        f"SEX_{record.sex.value}",
        f"RACE_{record.race.value}",
        f"MARITAL_STATUS_{record.marital.value}",
        f"YEAR_{record.year}",
    ]
    return [vocab.id(n) for n in names]


def encode_record(record: Record, vocab: Vocabulary, max_len: int | None = None) -> TokenSequence:
    """Encode a record as its token layout.

    Layout: START_RECORD, the 5 demographic tokens, then per visit an
    inter-visit gap token (visits after the first), START_VISIT, time-ordered
    events with an intra-visit gap token only when the gap from the previous
    event exceeds the first bin, labs as a LAB_TEST token immediately
    followed by a quantile token, END_VISIT; then DEATH when the final visit
    is fatal, and END_RECORD.
    """
    ids = [vocab.start_record_id]
    ids.extend(demographic_tokens(record, vocab))
    prev_discharge: int | None = None
    for visit in record.visits:
        if prev_discharge is not None:
            ids.append(gap_token(max(0, visit.admit_time - prev_discharge), vocab))
        ids.append(vocab.start_visit_id)
        cursor = visit.admit_time
        for ev in visit.events:
            gap = ev.time - cursor
            if gap > GAP_BIN_UPPER_SECONDS[0]:
                ids.append(gap_token(gap, vocab))
            cursor = ev.time
            tok_id = vocab.id(event_token(ev.category, ev.code))
            ids.append(tok_id)
            if ev.category is Category.LAB:
                ids.append(lab_bin(tok_id, float(ev.value), vocab))
        ids.append(vocab.end_visit_id)
        prev_discharge = visit.discharge_time
    if record.visits and record.visits[-1].death:
        ids.append(vocab.death_id)
    ids.append(vocab.end_record_id)
    truncated = False
    if max_len is not None and len(ids) > max_len:
        ids = ids[:max_len]
        truncated = True
    return TokenSequence(ids=ids, truncated=truncated)


def validate_sequence(
    tokens: list[int], vocab: Vocabulary, partial: bool = False
) -> list[Violation]:
    """Check the record grammar; returns violations as data (empty iff valid).

    With partial=True the sequence is validated as a prefix: end-of-input
    conditions (missing END_RECORD, unterminated visit, pending quantile)
    are not flagged.
    """
    out: list[Violation] = []
    n = len(tokens)
    if n == 0:
        return out if partial else [Violation(0, "empty sequence")]
    if tokens[0] != vocab.start_record_id:
        out.append(Violation(0, "sequence must start with START_RECORD"))
    for pos, want in enumerate(_DEMOGRAPHIC_KINDS, start=1):
        if pos >= n:
            if not partial:
                out.append(Violation(n - 1, f"truncated demographic prefix, missing {want.value}"))
            return out
        got = vocab.kind(tokens[pos])
        if got is not want:
            out.append(Violation(pos, f"expected {want.value} token at position {pos}, got {got.value}"))

    in_visit = False
    expect_quantile = False
    seen_death = False
    ended = False
    for i in range(6, n):
        kind = vocab.kind(tokens[i])
        if ended:
            out.append(Violation(i, "token after END_RECORD"))
            continue
        if expect_quantile:
            expect_quantile = False
            if kind is not TokenKind.LAB_QUANTILE:
                out.append(Violation(i, "lab test not followed by a quantile token"))
            else:
                continue
        elif kind is TokenKind.LAB_QUANTILE:
            out.append(Violation(i, "orphan quantile token"))
            continue
        if seen_death and kind is not TokenKind.END_RECORD:
            out.append(Violation(i, "only END_RECORD may follow DEATH"))
            continue
        if kind is TokenKind.PADDING:
            out.append(Violation(i, "padding token inside sequence"))
        elif kind is TokenKind.START_RECORD:
            out.append(Violation(i, "START_RECORD after position 0"))
        elif kind in (TokenKind.AGE, TokenKind.SEX, TokenKind.RACE, TokenKind.MARITAL, TokenKind.YEAR):
            out.append(Violation(i, "demographic token outside the static prefix"))
        elif kind is TokenKind.START_VISIT:
            if in_visit:
                out.append(Violation(i, "START_VISIT inside an open visit"))
            in_visit = True
        elif kind is TokenKind.END_VISIT:
            if not in_visit:
                out.append(Violation(i, "END_VISIT outside a visit"))
            in_visit = False
        elif kind in _EVENT_KINDS:
            if not in_visit:
                out.append(Violation(i, "clinical event outside a visit"))
            if kind is TokenKind.LAB_TEST:
                expect_quantile = True
        elif kind is TokenKind.TIME_GAP:
            pass  # permitted anywhere in the record body
        elif kind is TokenKind.DEATH:
            if in_visit:
                out.append(Violation(i, "DEATH inside an open visit"))
            seen_death = True
        elif kind is TokenKind.END_RECORD:
            if in_visit:
                out.append(Violation(i, "unterminated visit at END_RECORD"))
            ended = True
    if not partial:
        if expect_quantile:
            out.append(Violation(n - 1, "lab test not followed by a quantile token"))
        if not ended and not (seen_death and vocab.kind(tokens[-1]) is TokenKind.DEATH):
            if in_visit:
                out.append(Violation(n - 1, "unterminated visit at end of sequence"))
            out.append(Violation(n - 1, "sequence does not end with END_RECORD or DEATH"))
    return out


def _sample_gap(index: int, rng: np.random.Generator) -> int:
    lo, hi = gap_bin_bounds(index)
    return int(rng.integers(lo, hi + 1))


def decode_sequence(
    tokens: list[int],
    vocab: Vocabulary,
    rng: np.random.Generator,
    patient_id: str = "decoded",
    epoch: int | None = None,
) -> Record:
    """Materialize a token sequence into a concrete record.

    Inverse of encode_record up to discretization: gap tokens become
    durations sampled uniformly within their bin, quantile tokens become lab
    values sampled uniformly within the lab's bin edges, and timestamps
    accumulate from Jan 1 of the YEAR token (or a caller-supplied epoch).
    """
    violations = validate_sequence(tokens, vocab)
    if violations:
        v = violations[0]
        raise StructureError(v.index, v.message)

    age_name = vocab.id_to_token[tokens[1]]
    lo = int(age_name.split("_")[1])
    age = int(rng.integers(lo, lo + 5))
    sex = Sex(vocab.id_to_token[tokens[2]].removeprefix("SEX_"))
    race = Race(vocab.id_to_token[tokens[3]].removeprefix("RACE_"))
    marital = Marital(vocab.id_to_token[tokens[4]].removeprefix("MARITAL_STATUS_"))
    year = int(vocab.id_to_token[tokens[5]].removeprefix("YEAR_"))
    if epoch is None:
        epoch = parse_iso_utc(f"{year:04d}-01-01T00:00:00Z")

    visits: list[Visit] = []
    death = False
    cursor = epoch  # discharge of the previous visit, or the epoch
    pending_gap = 0
    admit = None
    event_cursor = None
    events: list[Event] = []
    i = 6
    n = len(tokens)
    while i < n:
        tok = tokens[i]
        kind = vocab.kind(tok)
        if kind is TokenKind.TIME_GAP:
            pending_gap += _sample_gap(GAP_BIN_NAMES.index(vocab.id_to_token[tok]), rng)
        elif kind is TokenKind.START_VISIT:
            admit = cursor + pending_gap
            pending_gap = 0
            event_cursor = admit
            events = []
        elif kind in _EVENT_KINDS:
            event_cursor += pending_gap
            pending_gap = 0
            name = vocab.id_to_token[tok]
            if kind is TokenKind.LAB_TEST:
                q_name = vocab.id_to_token[tokens[i + 1]]
                q = int(q_name.removeprefix("_Q"))
                lo_v, hi_v = quantile_bounds(tok, q, vocab)
                value = round(float(rng.uniform(lo_v, hi_v)), 4)
                code = name.removeprefix("LAB_")
                events.append(
                    Event(event_cursor, Category.LAB, code, label=code, value=value, unit=None)
                )
                i += 1
            else:
                for cat, prefix in _CATEGORY_PREFIX.items():
                    if name.startswith(prefix):
                        code = name.removeprefix(prefix)
                        events.append(Event(event_cursor, cat, code, label=code))
                        break
        elif kind is TokenKind.END_VISIT:
            discharge = event_cursor
            visits.append(Visit(admit_time=admit, discharge_time=discharge, events=tuple(events)))
            cursor = discharge
            pending_gap = 0
        elif kind is TokenKind.DEATH:
            death = True
        elif kind is TokenKind.END_RECORD:
            break
        i += 1

    if death and visits:
        last = visits[-1]
        visits[-1] = Visit(last.admit_time, last.discharge_time, last.events, death=True)
    return Record(
        patient_id=patient_id,
        age_years=age,
        sex=sex,
        race=race,
        marital=marital,
        year=year,
        visits=tuple(visits),
    )


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    obj = {
        "tokens": vocab.id_to_token,
        "kinds": [k.value for k in vocab.kinds],
        "lab_bin_edges": {vocab.id_to_token[i]: e for i, e in sorted(vocab.lab_bin_edges.items())},
    }
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    tokens = list(obj["tokens"])
    token_to_id = {t: i for i, t in enumerate(tokens)}
    return Vocabulary(
        token_to_id=token_to_id,
        id_to_token=tokens,
        kinds=[TokenKind(k) for k in obj["kinds"]],
        lab_bin_edges={token_to_id[name]: [float(x) for x in e] for name, e in obj["lab_bin_edges"].items()},
    )
