"""Rule-based oracle corpus simulator.

The simulator is a first-order rule engine: per visit it draws base events
independently by prevalence, and each drawn trigger diagnosis pulls in its
implied medications/procedures/labs with per-implication probabilities.
Because every probability is known, any fidelity metric computed on a
simulated corpus has brute-force computable ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .records import Category, Corpus, Event, Marital, Race, Record, Sex, Visit, parse_iso_utc

__all__ = [
    "Implication",
    "ConditionRule",
    "LabDist",
    "BaseEvent",
    "SimulatorSpec",
    "simulate_corpus",
    "default_spec",
    "load_spec",
    "save_spec",
]

_SECONDS_PER_DAY = 86_400


@dataclass(frozen=True)
class Implication:
    category: Category
    code: str
    label: str
    prob: float


@dataclass(frozen=True)
class ConditionRule:
    """Trigger diagnosis implies each listed event with its probability."""

    trigger: str
    implications: tuple[Implication, ...]


@dataclass(frozen=True)
class LabDist:
    label: str
    unit: str
    mean: float
    sd: float


@dataclass(frozen=True)
class BaseEvent:
    category: Category
    code: str
    label: str
    prevalence: float


@dataclass
class SimulatorSpec:
    n_patients: int
    base_events: tuple[BaseEvent, ...]
    rules: tuple[ConditionRule, ...]
    labs: dict[str, LabDist]
    visit_count_probs: tuple[float, ...]
    intra_gap_log_mean: float = 8.0
    intra_gap_log_sd: float = 1.0
    inter_gap_log_mean: float = 15.0
    inter_gap_log_sd: float = 0.9
    mortality_prob: float = 0.05
    age_range: tuple[int, int] = (20, 90)
    year_range: tuple[int, int] = (2015, 2017)
    race_probs: dict[str, float] = field(
        default_factory=lambda: {
            "WHITE": 0.62,
            "BLACK": 0.14,
            "HISPANIC": 0.08,
            "ASIAN": 0.06,
            "OTHER": 0.05,
            "UNKNOWN": 0.05,
        }
    )
    marital_probs: dict[str, float] = field(
        default_factory=lambda: {
            "MARRIED": 0.43,
            "SINGLE": 0.37,
            "WIDOWED": 0.09,
            "DIVORCED": 0.06,
            "UNKNOWN": 0.05,
        }
    )
    sex_probs: dict[str, float] = field(default_factory=lambda: {"F": 0.53, "M": 0.47})

    def validate(self) -> None:
        if self.n_patients <= 0:
            raise ValueError("n_patients must be positive")
        for ev in self.base_events:
            if not 0.0 <= ev.prevalence <= 1.0:
                raise ValueError(f"prevalence out of [0,1] for {ev.code}")
            if ev.category is Category.LAB and ev.code not in self.labs:
                raise ValueError(f"base lab {ev.code} has no value distribution")
        base_diags = {e.code for e in self.base_events if e.category is Category.DIAGNOSIS}
        for rule in self.rules:
            if rule.trigger not in base_diags:
                raise ValueError(f"rule trigger {rule.trigger} is not a base diagnosis")
            for imp in rule.implications:
                if not 0.0 <= imp.prob <= 1.0:
                    raise ValueError(f"implication prob out of [0,1] for {imp.code}")
                if imp.category is Category.LAB and imp.code not in self.labs:
                    raise ValueError(f"implied lab {imp.code} has no value distribution")
        for code, lab in self.labs.items():
            if lab.sd <= 0:
                raise ValueError(f"lab {code} needs positive sd")
        probs = self.visit_count_probs
        if not probs or abs(sum(probs) - 1.0) > 1e-9 or any(p < 0 for p in probs):
            raise ValueError("visit_count_probs must be non-negative and sum to 1")
        if self.intra_gap_log_sd <= 0 or self.inter_gap_log_sd <= 0:
            raise ValueError("gap log-sd must be positive")
        if not 0.0 <= self.mortality_prob <= 1.0:
            raise ValueError("mortality_prob out of [0,1]")


def _choice(rng: np.random.Generator, probs: dict[str, float]) -> str:
    keys = sorted(probs)
    weights = np.array([probs[k] for k in keys], dtype=float)
    return keys[rng.choice(len(keys), p=weights / weights.sum())]


def _year_start(year: int) -> int:
    return parse_iso_utc(f"{year:04d}-01-01T00:00:00Z")


def _simulate_visit(
    spec: SimulatorSpec,
    rules_by_trigger: dict[str, ConditionRule],
    rng: np.random.Generator,
    admit: int,
) -> tuple[Visit, int]:
    drawn: list[tuple[Category, str, str]] = []
    for base in spec.base_events:
        if rng.random() < base.prevalence:
            drawn.append((base.category, base.code, base.label))
            rule = rules_by_trigger.get(base.code) if base.category is Category.DIAGNOSIS else None
            if rule is not None:
                for imp in rule.implications:
                    if rng.random() < imp.prob:
                        drawn.append((imp.category, imp.code, imp.label))
    events = []
    cursor = admit
    for i, (category, code, label) in enumerate(drawn):
        if i > 0:
            cursor += int(rng.lognormal(spec.intra_gap_log_mean, spec.intra_gap_log_sd))
        value = unit = None
        if category is Category.LAB:
            lab = spec.labs[code]
            value = round(float(rng.normal(lab.mean, lab.sd)), 4)
            unit = lab.unit
        events.append(Event(time=cursor, category=category, code=code, label=label, value=value, unit=unit))
    discharge = cursor + int(rng.lognormal(spec.intra_gap_log_mean, spec.intra_gap_log_sd))
    return Visit(admit_time=admit, discharge_time=discharge, events=tuple(events)), discharge


def simulate_corpus(spec: SimulatorSpec, seed: int) -> Corpus:
    """Deterministically simulate `spec.n_patients` records for a seed."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    rules_by_trigger = {r.trigger: r for r in spec.rules}
    n_counts = len(spec.visit_count_probs)
    count_probs = np.asarray(spec.visit_count_probs, dtype=float)
    records = []
    for idx in range(spec.n_patients):
        age = int(rng.integers(spec.age_range[0], spec.age_range[1]))
        sex = Sex(_choice(rng, spec.sex_probs))
        race = Race(_choice(rng, spec.race_probs))
        marital = Marital(_choice(rng, spec.marital_probs))
        year = int(rng.integers(spec.year_range[0], spec.year_range[1] + 1))
        n_visits = int(rng.choice(n_counts, p=count_probs)) + 1
        # First admission stays inside the sampled calendar year.
        admit = _year_start(year) + int(rng.integers(0, 300)) * _SECONDS_PER_DAY
        visits: list[Visit] = []
        for _ in range(n_visits):
            visit, discharge = _simulate_visit(spec, rules_by_trigger, rng, admit)
            visits.append(visit)
            admit = discharge + int(rng.lognormal(spec.inter_gap_log_mean, spec.inter_gap_log_sd))
        if rng.random() < spec.mortality_prob:
            last = visits[-1]
            visits[-1] = Visit(last.admit_time, last.discharge_time, last.events, death=True)
        records.append(
            Record(
                patient_id=f"sim-{idx:06d}",
                age_years=age,
                sex=sex,
                race=race,
                marital=marital,
                year=year,
                visits=tuple(visits),
            )
        )
    return Corpus(records=records, name=f"oracle-{seed}", seed=seed)


def default_spec(n_patients: int = 2000) -> SimulatorSpec:
    """Desk-scale oracle world: ~110 event codes wired through condition rules.

    The D_HTN -> M_ACEI implication is deliberately deterministic (prob 1.0)
    so rule preservation can be checked on generated cohorts.
    """
    diag = lambda c, l, p: BaseEvent(Category.DIAGNOSIS, c, l, p)
    med = lambda c, l, p: BaseEvent(Category.MEDICATION, c, l, p)
    proc = lambda c, l, p: BaseEvent(Category.PROCEDURE, c, l, p)
    lab = lambda c, l, p: BaseEvent(Category.LAB, c, l, p)
    imp = lambda cat, c, l, p: Implication(cat, c, l, p)

    base: list[BaseEvent] = [
        diag("D_HTN", "Essential hypertension", 0.32),
        diag("D_T2DM", "Type 2 diabetes mellitus", 0.24),
        diag("D_CKD", "Chronic kidney disease", 0.12),
        diag("D_PNEU", "Bacterial pneumonia", 0.14),
        diag("D_AFIB", "Atrial fibrillation", 0.10),
        diag("D_CHF", "Congestive heart failure", 0.11),
        diag("D_COPD", "Chronic obstructive pulmonary disease", 0.09),
        diag("D_ANEM", "Iron deficiency anemia", 0.08),
        diag("D_UTI", "Urinary tract infection", 0.09),
        diag("D_HLD", "Hyperlipidemia", 0.22),
        med("M_ANALG", "Acetaminophen", 0.25),
        med("M_PPI", "Omeprazole", 0.12),
        proc("P_CHESTXR", "Chest radiograph", 0.10),
        lab("L_NA", "Sodium", 0.40),
        lab("L_K", "Potassium", 0.35),
        lab("L_GLUC", "Glucose", 0.30),
        lab("L_PLT", "Platelets", 0.18),
        lab("L_LACT", "Lactate", 0.05),
    ]
    # Long-tail filler codes give the vocabulary its Zipf-like body.
    for i in range(28):
        base.append(diag(f"D_X{i:02d}", f"Uncommon diagnosis {i}", 0.015 + 0.002 * (i % 5)))
    for i in range(18):
        base.append(med(f"M_X{i:02d}", f"Uncommon medication {i}", 0.012 + 0.002 * (i % 4)))
    for i in range(14):
        base.append(proc(f"P_X{i:02d}", f"Uncommon procedure {i}", 0.012 + 0.002 * (i % 3)))

    labs = {
        "L_NA": LabDist("Sodium", "mEq/L", 139.0, 3.0),
        "L_K": LabDist("Potassium", "mEq/L", 4.1, 0.5),
        "L_GLUC": LabDist("Glucose", "mg/dL", 112.0, 28.0),
        "L_CREAT": LabDist("Creatinine", "mg/dL", 1.1, 0.4),
        "L_HBA1C": LabDist("Hemoglobin A1c", "%", 6.6, 1.2),
        "L_WBC": LabDist("White blood cells", "K/uL", 8.4, 2.8),
        "L_HGB": LabDist("Hemoglobin", "g/dL", 12.6, 1.9),
        "L_BNP": LabDist("B-type natriuretic peptide", "pg/mL", 420.0, 260.0),
        "L_TROP": LabDist("Troponin T", "ng/mL", 0.04, 0.03),
        "L_LDL": LabDist("LDL cholesterol", "mg/dL", 118.0, 32.0),
        "L_FERR": LabDist("Ferritin", "ng/mL", 95.0, 60.0),
        "L_CRP": LabDist("C-reactive protein", "mg/L", 18.0, 14.0),
        "L_LACT": LabDist("Lactate", "mmol/L", 1.6, 0.7),
        "L_PLT": LabDist("Platelets", "K/uL", 240.0, 70.0),
    }
    rules = (
        ConditionRule(
            "D_HTN",
            (
                imp(Category.MEDICATION, "M_ACEI", "Lisinopril", 1.0),
                imp(Category.LAB, "L_CREAT", "Creatinine", 0.70),
                imp(Category.MEDICATION, "M_THIAZ", "Hydrochlorothiazide", 0.30),
            ),
        ),
        ConditionRule(
            "D_T2DM",
            (
                imp(Category.MEDICATION, "M_METF", "Metformin", 0.90),
                imp(Category.LAB, "L_HBA1C", "Hemoglobin A1c", 0.95),
                imp(Category.MEDICATION, "M_INSUL", "Insulin glargine", 0.25),
                imp(Category.LAB, "L_GLUC", "Glucose", 0.60),
            ),
        ),
        ConditionRule(
            "D_CKD",
            (
                imp(Category.LAB, "L_CREAT", "Creatinine", 1.0),
                imp(Category.PROCEDURE, "P_DIAL", "Hemodialysis", 0.30),
                imp(Category.MEDICATION, "M_EPO", "Epoetin alfa", 0.20),
            ),
        ),
        ConditionRule(
            "D_PNEU",
            (
                imp(Category.MEDICATION, "M_ABX", "Ceftriaxone", 0.95),
                imp(Category.PROCEDURE, "P_CHESTXR", "Chest radiograph", 0.80),
                imp(Category.LAB, "L_WBC", "White blood cells", 0.90),
                imp(Category.LAB, "L_CRP", "C-reactive protein", 0.40),
            ),
        ),
        ConditionRule(
            "D_AFIB",
            (
                imp(Category.MEDICATION, "M_ANTICOAG", "Apixaban", 0.85),
                imp(Category.PROCEDURE, "P_ECG", "Electrocardiogram", 0.90),
                imp(Category.MEDICATION, "M_BBLOCK", "Metoprolol", 0.60),
            ),
        ),
        ConditionRule(
            "D_CHF",
            (
                imp(Category.MEDICATION, "M_LOOP", "Furosemide", 0.90),
                imp(Category.LAB, "L_BNP", "B-type natriuretic peptide", 0.85),
                imp(Category.PROCEDURE, "P_ECHO", "Echocardiogram", 0.55),
                imp(Category.LAB, "L_TROP", "Troponin T", 0.35),
            ),
        ),
        ConditionRule(
            "D_COPD",
            (
                imp(Category.MEDICATION, "M_BRONCH", "Albuterol", 0.90),
                imp(Category.PROCEDURE, "P_SPIRO", "Spirometry", 0.45),
            ),
        ),
        ConditionRule(
            "D_ANEM",
            (
                imp(Category.LAB, "L_HGB", "Hemoglobin", 0.95),
                imp(Category.LAB, "L_FERR", "Ferritin", 0.55),
                imp(Category.MEDICATION, "M_IRON", "Ferrous sulfate", 0.70),
            ),
        ),
        ConditionRule(
            "D_UTI",
            (
                imp(Category.MEDICATION, "M_NITRO", "Nitrofurantoin", 0.85),
                imp(Category.PROCEDURE, "P_UA", "Urinalysis", 0.90),
            ),
        ),
        ConditionRule(
            "D_HLD",
            (
                imp(Category.MEDICATION, "M_STATIN", "Atorvastatin", 0.92),
                imp(Category.LAB, "L_LDL", "LDL cholesterol", 0.75),
            ),
        ),
    )
    return SimulatorSpec(
        n_patients=n_patients,
        base_events=tuple(base),
        rules=rules,
        labs=labs,
        visit_count_probs=(0.55, 0.27, 0.12, 0.06),
        intra_gap_log_mean=7.8,  # median gap ~40 min
        intra_gap_log_sd=1.1,
        inter_gap_log_mean=14.9,  # median gap ~34 days
        inter_gap_log_sd=0.9,
        mortality_prob=0.06,
    )


def _spec_to_json(spec: SimulatorSpec) -> dict:
    return {
        "n_patients": spec.n_patients,
        "base_events": [
            {"category": e.category.value, "code": e.code, "label": e.label, "prevalence": e.prevalence}
            for e in spec.base_events
        ],
        "rules": [
            {
                "trigger": r.trigger,
                "implications": [
                    {"category": i.category.value, "code": i.code, "label": i.label, "prob": i.prob}
                    for i in r.implications
                ],
            }
            for r in spec.rules
        ],
        "labs": {
            code: {"label": l.label, "unit": l.unit, "mean": l.mean, "sd": l.sd}
            for code, l in spec.labs.items()
        },
        "visit_count_probs": list(spec.visit_count_probs),
        "intra_gap_log_mean": spec.intra_gap_log_mean,
        "intra_gap_log_sd": spec.intra_gap_log_sd,
        "inter_gap_log_mean": spec.inter_gap_log_mean,
        "inter_gap_log_sd": spec.inter_gap_log_sd,
        "mortality_prob": spec.mortality_prob,
        "age_range": list(spec.age_range),
        "year_range": list(spec.year_range),
        "race_probs": spec.race_probs,
        "marital_probs": spec.marital_probs,
        "sex_probs": spec.sex_probs,
    }


def save_spec(spec: SimulatorSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_spec_to_json(spec), indent=2) + "\n", encoding="utf-8")


def load_spec(path: str | Path) -> SimulatorSpec:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    spec = SimulatorSpec(
        n_patients=int(obj["n_patients"]),
        base_events=tuple(
            BaseEvent(Category(e["category"]), e["code"], e["label"], float(e["prevalence"]))
            for e in obj["base_events"]
        ),
        rules=tuple(
            ConditionRule(
                r["trigger"],
                tuple(
                    Implication(Category(i["category"]), i["code"], i["label"], float(i["prob"]))
                    for i in r["implications"]
                ),
            )
            for r in obj["rules"]
        ),
        labs={
            code: LabDist(l["label"], l["unit"], float(l["mean"]), float(l["sd"]))
            for code, l in obj["labs"].items()
        },
        visit_count_probs=tuple(obj["visit_count_probs"]),
        intra_gap_log_mean=float(obj["intra_gap_log_mean"]),
        intra_gap_log_sd=float(obj["intra_gap_log_sd"]),
        inter_gap_log_mean=float(obj["inter_gap_log_mean"]),
        inter_gap_log_sd=float(obj["inter_gap_log_sd"]),
        mortality_prob=float(obj["mortality_prob"]),
        age_range=tuple(obj["age_range"]),
        year_range=tuple(obj["year_range"]),
        race_probs=obj["race_probs"],
        marital_probs=obj["marital_probs"],
        sex_probs=obj["sex_probs"],
    )
    spec.validate()
    return spec
