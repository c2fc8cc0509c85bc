"""Fidelity, utility, and privacy evaluation of synthetic cohorts.

Probabilistic fidelity compares unigram / same-visit / sequential-visit
code probability tables; agreement is quantified with R-squared and
Bland-Altman limits, distributional similarity with the two-sample KS
statistic and histogram overlap, downstream utility with a
train-on-synthetic test-on-real protocol, and privacy with membership and
attribute inference attacks. Everything here is a pure function.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .audit.stats import rankdata
from .engine import Tape, Tensor, ops
from .records import Category, Corpus, Record
from .train import AdamWState, adamw_step
from .vocab import UnknownTokenError, Vocabulary, encode_record

__all__ = [
    "ProbMode",
    "ProbTable",
    "BlandAltman",
    "TstrTask",
    "AttackReport",
    "code_probs",
    "pair_tables",
    "r2",
    "bland_altman",
    "ks_stat",
    "overlap_coeff",
    "auroc",
    "cooccur_matrix",
    "cooccur_matrix_corr",
    "tstr_eval",
    "mia_attack",
    "aia_attack",
    "filter_by_token_length",
    "structural_samples",
    "code_key",
]


class ProbMode(Enum):
    UNIGRAM = "UNIGRAM"
    SAME_VISIT = "SAME_VISIT"
    SEQUENTIAL = "SEQUENTIAL"


@dataclass
class ProbTable:
    mode: ProbMode
    probs: dict
    support: int

    def __post_init__(self):
        if self.probs:
            total = sum(self.probs.values())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"probabilities sum to {total}, not 1")


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    loa_low: float
    loa_high: float
    n: int


@dataclass(frozen=True)
class AttackReport:
    attack: str
    accuracy: float
    f1: float
    baseline: float


def code_key(category: Category, code: str) -> str:
    return f"{category.value}:{code}"


def _visit_code_sets(record: Record) -> list[list[str]]:
    return [sorted({code_key(e.category, e.code) for e in v.events}) for v in record.visits]


def code_probs(corpus: Corpus, mode: ProbMode) -> ProbTable:
    """Normalized code or code-pair probability table.

    UNIGRAM counts every event occurrence; SAME_VISIT counts each unordered
    pair of distinct codes present in a visit once per visit; SEQUENTIAL
    counts ordered pairs (code in visit i, code in visit i+1) once per
    consecutive visit pair.
    """
    if not corpus.records:
        raise ValueError("cannot compute probabilities on an empty corpus")
    counts: dict = {}
    if mode is ProbMode.UNIGRAM:
        for record in corpus.records:
            for visit in record.visits:
                for e in visit.events:
                    k = code_key(e.category, e.code)
                    counts[k] = counts.get(k, 0) + 1
    elif mode is ProbMode.SAME_VISIT:
        for record in corpus.records:
            for codes in _visit_code_sets(record):
                for i in range(len(codes)):
                    for j in range(i + 1, len(codes)):
                        pair = (codes[i], codes[j])
                        counts[pair] = counts.get(pair, 0) + 1
    elif mode is ProbMode.SEQUENTIAL:
        any_multi = False
        for record in corpus.records:
            sets = _visit_code_sets(record)
            for a, b in zip(sets, sets[1:]):
                any_multi = True
                for ka in a:
                    for kb in b:
                        pair = (ka, kb)
                        counts[pair] = counts.get(pair, 0) + 1
        if not any_multi:
            warnings.warn("no multi-visit records; sequential table is empty", stacklevel=2)
            return ProbTable(mode=mode, probs={}, support=0)
    support = sum(counts.values())
    probs = {k: v / support for k, v in counts.items()} if support else {}
    return ProbTable(mode=mode, probs=probs, support=support)


def pair_tables(real: ProbTable, synthetic: ProbTable) -> tuple[np.ndarray, np.ndarray]:
    """Align two tables on the union of keys, zero-filling missing entries."""
    keys = sorted(set(real.probs) | set(synthetic.probs))
    x = np.array([real.probs.get(k, 0.0) for k in keys])
    y = np.array([synthetic.probs.get(k, 0.0) for k in keys])
    return x, y


def r2(x, y) -> float:
    """Coefficient of determination of the least-squares line of y on x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or len(x) < 2:
        raise ValueError("r2 needs two equal-length vectors of size >= 2")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("zero variance in y")
    var_x = float(((x - x.mean()) ** 2).sum())
    if var_x == 0:
        raise ValueError("zero variance in x")
    slope = float(((x - x.mean()) * (y - y.mean())).sum()) / var_x
    intercept = y.mean() - slope * x.mean()
    ss_res = float(((y - (slope * x + intercept)) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def bland_altman(x, y) -> BlandAltman:
    """Bias and 1.96-SD limits of agreement of the paired differences y - x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or len(x) < 2:
        raise ValueError("bland_altman needs paired vectors of size >= 2")
    d = y - x
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(bias=bias, loa_low=bias - 1.96 * sd, loa_high=bias + 1.96 * sd, n=len(d))


def ks_stat(sample_a, sample_b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |ECDF_a - ECDF_b|."""
    a = np.sort(np.asarray(sample_a, dtype=float))
    b = np.sort(np.asarray(sample_b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.abs(fa - fb).max())


def overlap_coeff(sample_a, sample_b, bins: int | np.ndarray = 50) -> float:
    """Histogram overlap sum_i min(p_i, q_i) on a shared binning."""
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    if isinstance(bins, (int, np.integer)):
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        if lo == hi:
            return 1.0  # both distributions are the same point mass
        edges = np.linspace(lo, hi, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=float)
    pa, _ = np.histogram(a, bins=edges)
    pb, _ = np.histogram(b, bins=edges)
    return float(np.minimum(pa / len(a), pb / len(b)).sum())


def auroc(labels, scores) -> float:
    """Area under the ROC curve via the rank-statistic formulation."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: test labels are single-class")
    ranks = rankdata(s)
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Co-occurrence structure


def _top_diagnosis_codes(corpus: Corpus, top_k: int) -> list[str]:
    counts: dict[str, int] = {}
    for record in corpus.records:
        for visit in record.visits:
            for e in visit.events:
                if e.category is Category.DIAGNOSIS:
                    counts[e.code] = counts.get(e.code, 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [code for code, _ in ordered[:top_k]]


def cooccur_matrix(corpus: Corpus, codes: list[str]) -> np.ndarray:
    """Symmetric same-visit co-occurrence counts over a fixed code list."""
    index = {c: i for i, c in enumerate(codes)}
    m = np.zeros((len(codes), len(codes)))
    for record in corpus.records:
        for visit in record.visits:
            present = sorted(
                {index[e.code] for e in visit.events if e.category is Category.DIAGNOSIS and e.code in index}
            )
            for i in range(len(present)):
                for j in range(i + 1, len(present)):
                    m[present[i], present[j]] += 1
                    m[present[j], present[i]] += 1
    return m


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    if x.std() == 0 or y.std() == 0:
        raise ValueError("constant matrix: correlation undefined")
    return float(np.corrcoef(x, y)[0, 1])


def cooccur_matrix_corr(
    real: Corpus, synthetic: Corpus, top_k: int = 150
) -> tuple[float, float]:
    """Pearson and Spearman correlation of upper-triangle co-occurrence counts.

    Matrices are built over the top_k most frequent real diagnosis codes
    (frequency order) and compared entrywise above the diagonal.
    """
    codes = _top_diagnosis_codes(real, top_k)
    if len(codes) < top_k:
        raise ValueError(f"real corpus has {len(codes)} distinct diagnosis codes, need {top_k}")
    mr = cooccur_matrix(real, codes)
    ms = cooccur_matrix(synthetic, codes)
    iu = np.triu_indices(len(codes), k=1)
    xr, xs = mr[iu], ms[iu]
    pearson = _pearson(xr, xs)
    spearman = _pearson(rankdata(xr), rankdata(xs))
    return pearson, spearman


# ---------------------------------------------------------------------------
# Downstream utility (train on synthetic, test on real)


class TstrTask(Enum):
    MORTALITY = "MORTALITY"
    READMISSION_30D = "READMISSION_30D"
    LOS_10CLASS = "LOS_10CLASS"
    PHENOTYPE_MULTILABEL = "PHENOTYPE_MULTILABEL"


_N_PHENOTYPES = 25
_READMIT_WINDOW = 30 * 86_400
_LR_STEPS = 300
_LR_RATE = 0.05
_LR_DECAY = 1e-4


def _record_codes(record: Record, whole_record: bool) -> list[str]:
    visits = record.visits if whole_record else record.visits[:1]
    return [code_key(e.category, e.code) for v in visits for e in v.events]


def _phenotype_groups(corpus: Corpus, n: int = _N_PHENOTYPES) -> list[str]:
    counts: dict[str, int] = {}
    for record in corpus.records:
        groups = {
            e.code[:3]
            for v in record.visits
            for e in v.events
            if e.category is Category.DIAGNOSIS
        }
        for g in groups:
            counts[g] = counts.get(g, 0) + 1
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [g for g, _ in ordered[:n]]


def _labels(record: Record, task: TstrTask, groups: list[str] | None) -> np.ndarray | int:
    if task is TstrTask.MORTALITY:
        return int(any(v.death for v in record.visits))
    if task is TstrTask.READMISSION_30D:
        if len(record.visits) < 2:
            return 0
        return int(record.visits[1].admit_time - record.visits[0].discharge_time <= _READMIT_WINDOW)
    if task is TstrTask.LOS_10CLASS:
        v = record.visits[0]
        los_days = (v.discharge_time - v.admit_time) // 86_400
        return int(min(max(los_days, 0), 9))
    present = {
        e.code[:3] for v in record.visits for e in v.events if e.category is Category.DIAGNOSIS
    }
    return np.array([1 if g in present else 0 for g in groups], dtype=np.float64)


def _features(corpus: Corpus, feature_codes: list[str], whole_record: bool) -> np.ndarray:
    index = {c: i for i, c in enumerate(feature_codes)}
    x = np.zeros((len(corpus.records), len(feature_codes) + 1))
    for row, record in enumerate(corpus.records):
        for key in _record_codes(record, whole_record):
            col = index.get(key)
            if col is not None:
                x[row, col] += 1.0
    x[:, :-1] = np.log1p(x[:, :-1])
    x[:, -1] = 1.0  # intercept column
    return x


def _fit_linear(x: np.ndarray, y: np.ndarray, n_out: int, loss_kind: str) -> np.ndarray:
    """Logistic / softmax / multilabel regression trained with the engine."""
    w = Tensor(np.zeros((n_out, x.shape[1])), requires_grad=True)
    params = {"w": w}
    state = AdamWState.for_params(params)
    xs = ops.constant(x)
    for _ in range(_LR_STEPS):
        w.grad = None
        with Tape() as tape:
            scores = ops.linear(xs, w)
            if loss_kind == "softmax":
                loss = ops.cross_entropy(scores, y.astype(np.int64))
            else:
                target = y[:, None] if y.ndim == 1 else y
                if target.shape[1] != n_out:
                    raise ValueError("label width mismatch")
                loss = ops.bce_with_logits(scores, target)
            tape.backward(loss)
        adamw_step(params, {"w": w.grad}, state, lr=_LR_RATE, weight_decay=_LR_DECAY)
    return w.data


def _macro_f1_recall(y_true: np.ndarray, y_pred: np.ndarray, classes) -> tuple[float, float]:
    f1s, recalls = [], []
    for c in classes:
        tp = int(((y_pred == c) & (y_true == c)).sum())
        fp = int(((y_pred == c) & (y_true != c)).sum())
        fn = int(((y_pred != c) & (y_true == c)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        recalls.append(rec)
    return float(np.mean(f1s)), float(np.mean(recalls))


def tstr_eval(train_corpus: Corpus, test_corpus: Corpus, task: TstrTask, seed: int = 0) -> dict:
    """Train a bag-of-codes linear classifier on one corpus, test on another.

    Features are log1p code counts from events before the task cutoff
    (first visit for mortality/LOS/readmission, whole record for
    phenotyping). Reports AUROC (macro for multiclass/multilabel), F1 and
    recall at the 0.5 threshold or argmax, and a 1000-resample bootstrap
    95% CI for AUROC.
    """
    if not train_corpus.records or not test_corpus.records:
        raise ValueError("train and test corpora must be non-empty")
    whole = task is TstrTask.PHENOTYPE_MULTILABEL
    feature_codes = sorted(
        {key for r in train_corpus.records for key in _record_codes(r, whole)}
    )
    groups = _phenotype_groups(train_corpus) if whole else None
    x_train = _features(train_corpus, feature_codes, whole)
    x_test = _features(test_corpus, feature_codes, whole)
    y_train = np.array([_labels(r, task, groups) for r in train_corpus.records])
    y_test = np.array([_labels(r, task, groups) for r in test_corpus.records])

    if task is TstrTask.LOS_10CLASS:
        w = _fit_linear(x_train, y_train, 10, "softmax")
        z = x_test @ w.T
        z -= z.max(axis=1, keepdims=True)
        proba = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        classes = sorted(set(int(c) for c in y_test))
        if len(classes) < 2:
            raise ValueError("test labels are single-class")
        per_class = [
            auroc((y_test == c).astype(int), proba[:, c])
            for c in classes
            if 0 < (y_test == c).sum() < len(y_test)
        ]
        auc_fn = lambda idx: float(
            np.mean(
                [
                    auroc((y_test[idx] == c).astype(int), proba[idx, c])
                    for c in classes
                    if 0 < (y_test[idx] == c).sum() < len(idx)
                ]
            )
        )
        auc = float(np.mean(per_class))
        pred = proba.argmax(axis=1)
        f1, recall = _macro_f1_recall(y_test, pred, classes)
    elif task is TstrTask.PHENOTYPE_MULTILABEL:
        w = _fit_linear(x_train, y_train, len(groups), "bce")
        proba = 1.0 / (1.0 + np.exp(-(x_test @ w.T)))
        valid = [j for j in range(len(groups)) if 0 < y_test[:, j].sum() < len(y_test)]
        if not valid:
            raise ValueError("test labels are single-class for every phenotype")
        auc_fn = lambda idx: float(
            np.mean(
                [
                    auroc(y_test[idx, j].astype(int), proba[idx, j])
                    for j in valid
                    if 0 < y_test[idx, j].sum() < len(idx)
                ]
            )
        )
        auc = float(np.mean([auroc(y_test[:, j].astype(int), proba[:, j]) for j in valid]))
        pred = (proba >= 0.5).astype(int)
        f1s, recalls = zip(
            *[_macro_f1_recall(y_test[:, j], pred[:, j], [1]) for j in valid]
        )
        f1, recall = float(np.mean(f1s)), float(np.mean(recalls))
    else:
        w = _fit_linear(x_train, y_train.astype(np.float64), 1, "bce")
        proba = 1.0 / (1.0 + np.exp(-(x_test @ w.T)))[:, 0]
        y_bin = y_test.astype(int)
        auc = auroc(y_bin, proba)
        auc_fn = lambda idx: auroc(y_bin[idx], proba[idx]) if 0 < y_bin[idx].sum() < len(idx) else None
        pred = (proba >= 0.5).astype(int)
        f1, recall = _macro_f1_recall(y_bin, pred, [1])

    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(test_corpus.records)
    boot = []
    for _ in range(1000):
        idx = rng.integers(0, n, size=n)
        try:
            value = auc_fn(idx)
        except ValueError:
            value = None
        if value is not None and not math.isnan(value):
            boot.append(value)
    ci_low, ci_high = (
        (float(np.percentile(boot, 2.5)), float(np.percentile(boot, 97.5)))
        if boot
        else (float("nan"), float("nan"))
    )
    return {"auroc": auc, "f1": f1, "recall": recall, "ci_low": ci_low, "ci_high": ci_high}


# ---------------------------------------------------------------------------
# Privacy attacks


def _code_set(record: Record) -> frozenset[str]:
    return frozenset(code_key(e.category, e.code) for v in record.visits for e in v.events)


def _jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def _max_jaccard_scores(records: list[Record], synthetic: list[Record]) -> np.ndarray:
    syn_sets = [_code_set(r) for r in synthetic]
    return np.array([max(_jaccard(_code_set(r), s) for s in syn_sets) for r in records])


def mia_attack(
    members: list[Record], nonmembers: list[Record], synthetic: list[Record], seed: int = 0
) -> AttackReport:
    """Membership inference via nearest-synthetic-record Jaccard similarity.

    Member/nonmember sets are balanced by subsampling the larger one, then
    split 50/50 into calibration and holdout halves. The decision threshold
    is the midpoint of the calibration medians of the two groups (a balanced
    operating point), and accuracy/F1 are reported on the holdout half
    against the 0.5 random-guess baseline.
    """
    if not synthetic:
        raise ValueError("synthetic set is empty")
    if len(members) < 4 or len(nonmembers) < 4:
        raise ValueError("need at least 4 members and 4 nonmembers")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = min(len(members), len(nonmembers))
    mem = [members[i] for i in rng.permutation(len(members))[:n]]
    non = [nonmembers[i] for i in rng.permutation(len(nonmembers))[:n]]
    half = n // 2
    s_mem = _max_jaccard_scores(mem, synthetic)
    s_non = _max_jaccard_scores(non, synthetic)

    thr = 0.5 * (np.median(s_mem[:half]) + np.median(s_non[:half]))
    scores = np.concatenate([s_mem[half:], s_non[half:]])
    truth = np.concatenate([np.ones(n - half), np.zeros(n - half)])
    pred = (scores > thr).astype(int)
    accuracy = float((pred == truth).mean())
    tp = int(((pred == 1) & (truth == 1)).sum())
    fp = int(((pred == 1) & (truth == 0)).sum())
    fn = int(((pred == 0) & (truth == 1)).sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return AttackReport(attack="MIA", accuracy=accuracy, f1=float(f1), baseline=0.5)


def aia_attack(records: list[Record], sensitive_attr: str = "sex", k: int = 5) -> AttackReport:
    """Attribute inference: leave-one-out k-NN majority vote on code bags.

    Neighbors rank by Jaccard similarity of event-code sets (ties broken by
    index). Reports accuracy and macro F1 against a majority-class baseline.
    """
    if len(records) < k + 1:
        raise ValueError(f"dataset of {len(records)} records is smaller than k+1={k + 1}")
    values = [str(getattr(r, sensitive_attr).value if hasattr(getattr(r, sensitive_attr), "value") else getattr(r, sensitive_attr)) for r in records]
    sets = [_code_set(r) for r in records]
    classes = sorted(set(values))
    preds = []
    for i in range(len(records)):
        sims = [(-_jaccard(sets[i], sets[j]), j) for j in range(len(records)) if j != i]
        sims.sort()
        votes: dict[str, int] = {}
        for _, j in sims[:k]:
            votes[values[j]] = votes.get(values[j], 0) + 1
        best = max(votes.items(), key=lambda kv: (kv[1], -classes.index(kv[0])))
        preds.append(best[0])
    y_true = np.array(values)
    y_pred = np.array(preds)
    accuracy = float((y_true == y_pred).mean())
    f1, _ = _macro_f1_recall(y_true, y_pred, classes)
    majority = max(classes, key=lambda c: (values.count(c), c))
    base_f1, _ = _macro_f1_recall(y_true, np.full(len(records), majority), classes)
    return AttackReport(attack="AIA", accuracy=accuracy, f1=f1, baseline=base_f1)


# ---------------------------------------------------------------------------
# Structural helpers


def filter_by_token_length(corpus: Corpus, vocab: Vocabulary, max_tokens: int = 2048) -> Corpus:
    """Keep records whose encoded length fits the context window.

    Records containing codes outside the vocabulary cannot be measured (or
    modeled) and are dropped with a warning.
    """
    kept = []
    unknown = 0
    for record in corpus.records:
        try:
            if len(encode_record(record, vocab).ids) <= max_tokens:
                kept.append(record)
        except UnknownTokenError:
            unknown += 1
    if unknown:
        warnings.warn(f"dropped {unknown} records with out-of-vocabulary codes", stacklevel=2)
    return Corpus(records=kept, name=f"{corpus.name}.fits{max_tokens}", seed=corpus.seed)


def structural_samples(corpus: Corpus) -> dict[str, np.ndarray]:
    """Plottable structural distributions: visit counts, visit density,
    length of stay (days), event-to-event gaps (minutes), inter-visit gaps
    (days)."""
    visits_per_patient = [len(r.visits) for r in corpus.records]
    codes_per_visit = [len(v.events) for r in corpus.records for v in r.visits]
    los_days = [
        (v.discharge_time - v.admit_time) / 86_400 for r in corpus.records for v in r.visits
    ]
    event_gaps = [
        (b.time - a.time) / 60
        for r in corpus.records
        for v in r.visits
        for a, b in zip(v.events, v.events[1:])
    ]
    intervisit = [
        (b.admit_time - a.discharge_time) / 86_400
        for r in corpus.records
        for a, b in zip(r.visits, r.visits[1:])
    ]
    return {
        "visits_per_patient": np.asarray(visits_per_patient, dtype=float),
        "codes_per_visit": np.asarray(codes_per_visit, dtype=float),
        "los_days": np.asarray(los_days, dtype=float),
        "event_gap_minutes": np.asarray(event_gaps, dtype=float),
        "intervisit_gap_days": np.asarray(intervisit, dtype=float),
    }
