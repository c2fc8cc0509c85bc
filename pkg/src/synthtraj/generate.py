"""Grammar-constrained autoregressive cohort generation.

Each sampling step masks the vocabulary down to tokens the record grammar
allows in the current context (quantiles only right after a lab test, visit
delimiters balanced, DEATH only once every visit is closed), then applies
nucleus sampling over the surviving logits. Generation stops at END_RECORD
or DEATH, or sets the truncated flag when the token budget runs out.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, forward
from .records import Corpus, Record
from .vocab import (
    TokenKind,
    TokenSequence,
    Vocabulary,
    decode_sequence,
    demographic_tokens,
    validate_sequence,
)

__all__ = [
    "SamplerConfig",
    "GenerationReport",
    "transition_mask",
    "nucleus_sample",
    "generate_record",
    "generate_cohort",
]

_DEMO_ORDER = (TokenKind.AGE, TokenKind.SEX, TokenKind.RACE, TokenKind.MARITAL, TokenKind.YEAR)
_EVENT_KINDS = (TokenKind.DIAGNOSIS, TokenKind.PROCEDURE, TokenKind.MEDICATION, TokenKind.LAB_TEST)


@dataclass
class SamplerConfig:
    top_p: float = 0.98
    temperature: float = 1.0
    max_tokens: int = 2048
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


@dataclass
class GenerationReport:
    n_requested: int = 0
    n_complete: int = 0
    n_truncated: int = 0
    structural_violations: int = 0
    token_counts: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "n_requested": self.n_requested,
            "n_complete": self.n_complete,
            "n_truncated": self.n_truncated,
            "structural_violations": self.structural_violations,
            "token_counts": self.token_counts,
        }


class _KindSets:
    """Precomputed per-kind id masks for one vocabulary."""

    _cache: dict[int, "_KindSets"] = {}

    def __init__(self, vocab: Vocabulary):
        v = vocab.size
        self.by_kind = {kind: np.zeros(v, dtype=bool) for kind in TokenKind}
        for i, kind in enumerate(vocab.kinds):
            self.by_kind[kind][i] = True
        self.quantiles = self.by_kind[TokenKind.LAB_QUANTILE]
        self.events = np.zeros(v, dtype=bool)
        for kind in _EVENT_KINDS:
            self.events |= self.by_kind[kind]

    @classmethod
    def for_vocab(cls, vocab: Vocabulary) -> "_KindSets":
        key = id(vocab)
        if key not in cls._cache:
            cls._cache.clear()  # one live vocabulary at a time is the norm
            cls._cache[key] = cls(vocab)
        return cls._cache[key]


def transition_mask(context: list[int], vocab: Vocabulary) -> np.ndarray:
    """Boolean allow-mask over the vocabulary for the next token.

    The context must be a valid sequence prefix (validated as such).
    PADDING is never allowed; demographic tokens only inside the 6-token
    prefix; quantiles exactly when the last token is a lab test.
    """
    violations = validate_sequence(context, vocab, partial=True)
    if violations:
        v = violations[0]
        raise ValueError(f"invalid prefix at token {v.index}: {v.message}")
    sets = _KindSets.for_vocab(vocab)
    v_size = vocab.size
    mask = np.zeros(v_size, dtype=bool)
    n = len(context)
    if n == 0:
        mask[vocab.start_record_id] = True
        return mask
    if n < 6:
        return sets.by_kind[_DEMO_ORDER[n - 1]].copy()

    if vocab.kind(context[-1]) is TokenKind.LAB_TEST:
        return sets.quantiles.copy()

    in_visit = False
    closed_visits = 0
    for tok in context[6:]:
        kind = vocab.kind(tok)
        if kind is TokenKind.START_VISIT:
            in_visit = True
        elif kind is TokenKind.END_VISIT:
            in_visit = False
            closed_visits += 1
    mask |= sets.by_kind[TokenKind.TIME_GAP]
    if in_visit:
        mask |= sets.events
        mask[vocab.end_visit_id] = True
    else:
        mask[vocab.start_visit_id] = True
        mask[vocab.end_record_id] = True
        if closed_visits > 0:
            mask[vocab.death_id] = True
    return mask


def nucleus_sample(
    logits: np.ndarray, allow_mask: np.ndarray, cfg: SamplerConfig, rng: np.random.Generator
) -> int:
    """Top-p sampling over the allowed tokens.

    Temperature-scaled masked softmax, then the smallest descending-
    probability prefix reaching cumulative mass top_p, renormalized.
    Ties order by token id for determinism.
    """
    allow = np.asarray(allow_mask, dtype=bool)
    if not allow.any():
        raise ValueError("nucleus_sample: empty allow-set")
    z = np.where(allow, np.asarray(logits, dtype=np.float64) / cfg.temperature, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.lexsort((np.arange(len(p)), -p))
    cum = np.cumsum(p[order])
    cut = int(np.searchsorted(cum, cfg.top_p - 1e-12)) + 1
    nucleus = order[:cut]
    weights = p[nucleus] / p[nucleus].sum()
    return int(nucleus[rng.choice(len(nucleus), p=weights)])


def generate_record(
    params: ModelParams,
    demo_tokens: list[int],
    vocab: Vocabulary,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> TokenSequence:
    """Generate one token sequence seeded with the 5 demographic tokens."""
    if len(demo_tokens) != 5:
        raise ValueError("demographic seed must be exactly 5 tokens")
    if params.config.vocab_size != vocab.size:
        raise ValueError("model and vocabulary sizes differ")
    context = [vocab.start_record_id, *demo_tokens]
    budget = min(cfg.max_tokens, params.config.context_len)
    stop_ids = (vocab.end_record_id, vocab.death_id)
    while len(context) < budget:
        logits = forward(params, np.asarray(context, dtype=np.int64)).data[-1]
        mask = transition_mask(context, vocab)
        tok = nucleus_sample(logits, mask, cfg, rng)
        context.append(tok)
        if tok in stop_ids:
            return TokenSequence(ids=context, truncated=False)
    return TokenSequence(ids=context, truncated=True)


def generate_cohort(
    params: ModelParams,
    seed_corpus: Corpus,
    vocab: Vocabulary,
    n: int,
    cfg: SamplerConfig,
) -> tuple[list[Record], GenerationReport]:
    """Generate n records seeded with held-out demographics.

    Demographic seeds are taken in corpus order, then sampled with
    replacement beyond the available supply. Truncated sequences are counted
    but not materialized. Record i uses an rng derived from (seed, i), so
    cohorts are reproducible regardless of scheduling.
    """
    if not seed_corpus.records:
        raise ValueError("seed corpus is empty")
    pick_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 2))))
    report = GenerationReport(n_requested=n)
    out: list[Record] = []
    n_avail = len(seed_corpus.records)
    for i in range(n):
        source = seed_corpus.records[i] if i < n_avail else seed_corpus.records[int(pick_rng.integers(0, n_avail))]
        demo = demographic_tokens(source, vocab)
        rec_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 1, i))))
        seq = generate_record(params, demo, vocab, cfg, rec_rng)
        report.token_counts.append(len(seq.ids))
        report.structural_violations += len(validate_sequence(seq.ids, vocab, partial=seq.truncated))
        if seq.truncated:
            report.n_truncated += 1
            continue
        report.n_complete += 1
        out.append(decode_sequence(seq.ids, vocab, rec_rng, patient_id=f"syn-{i:05d}"))
    return out, report
