"""Causal-language-model training loop and scaling-law fitting utilities.

AdamW with decoupled weight decay (decay applied before the moment update),
linear warmup into cosine decay down to a floor fraction of the peak rate,
per-epoch validation with patience-based early stopping, and least-squares
utilities for compute-budget studies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import NonFiniteError, Tape, Tensor, ops
from .model import ModelParams, forward_batch
from .records import Corpus
from .vocab import UnknownTokenError, Vocabulary, encode_record

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "HistoryRow",
    "IsoflopPoint",
    "IsoflopFit",
    "PowerLawFit",
    "FitError",
    "AdamWState",
    "EarlyStopper",
    "clm_loss",
    "lr_at",
    "adamw_step",
    "train_model",
    "encode_for_training",
    "fit_isoflop",
    "fit_power_law",
    "write_history_csv",
]


@dataclass
class TrainConfig:
    base_lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.1
    warmup_fraction: float = 0.01
    final_lr_fraction: float = 0.1
    batch_size: int = 32
    max_epochs: int = 10
    eval_interval: int = 1  # epochs between validation evals
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass(frozen=True)
class HistoryRow:
    step: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    best_step: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False


def clm_loss(logits: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean next-token NLL over non-pad targets; accepts (T,V) or (B,T,V)."""
    targets = np.asarray(targets)
    if logits.ndim == 3:
        logits = ops.reshape(logits, (logits.shape[0] * logits.shape[1], logits.shape[2]))
        targets = targets.reshape(-1)
    return ops.cross_entropy(logits, targets, ignore_index=pad_id)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to the floor fraction."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(cfg.warmup_fraction * total_steps)
    if step <= warmup:
        return cfg.base_lr * (step / warmup) if warmup else cfg.base_lr
    span = max(total_steps - warmup, 1)
    progress = (step - warmup) / span
    floor = cfg.final_lr_fraction
    return cfg.base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamWState":
        return cls(
            step=0,
            m={n: np.zeros_like(t.data) for n, t in params.items() if t.requires_grad},
            v={n: np.zeros_like(t.data) for n, t in params.items() if t.requires_grad},
        )


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.1,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    The multiplicative decay param *= (1 - lr*wd) is applied before the
    moment update. Tensors with requires_grad False are never touched. A
    non-finite gradient rejects the whole step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}; step rejected")
    state.step += 1
    b1, b2 = betas
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if not p.requires_grad:
            continue
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


class EarlyStopper:
    """Stops after `patience` consecutive evals without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_evals = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_evals = 0
            return True, False
        self.bad_evals += 1
        return False, self.bad_evals >= self.patience


def encode_for_training(
    corpus: Corpus, vocab: Vocabulary, context_len: int
) -> tuple[list[list[int]], int]:
    """Encode records, truncating to the context; unknown-code records are
    skipped (possible for held-out corpora) and counted."""
    seqs: list[list[int]] = []
    skipped = 0
    for record in corpus.records:
        try:
            seqs.append(encode_record(record, vocab, max_len=context_len).ids)
        except UnknownTokenError:
            skipped += 1
    return seqs, skipped


def _pad_batch(seqs: list[list[int]], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _eval_loss(params: ModelParams, seqs: list[list[int]], pad_id: int, batch_size: int) -> float:
    total, count = 0.0, 0
    for start in range(0, len(seqs), batch_size):
        batch = _pad_batch(seqs[start : start + batch_size], pad_id)
        logits = forward_batch(params, batch[:, :-1], train=False)
        targets = batch[:, 1:]
        n_valid = int((targets != pad_id).sum())
        loss = clm_loss(logits, targets, pad_id)
        total += loss.item() * n_valid
        count += n_valid
    return total / max(count, 1)


def train_model(
    params: ModelParams,
    train_seqs: list[list[int]],
    val_seqs: list[list[int]],
    cfg: TrainConfig,
    pad_id: int,
) -> tuple[ModelParams, TrainHistory]:
    """Train to the validation optimum; returns the best-val parameters.

    Sequences shorter than the context are padded (loss-masked), never packed
    across records. Fully deterministic for a fixed config seed.
    """
    if not train_seqs or not val_seqs:
        raise ValueError("train and validation corpora must be non-empty")
    trainable = dict(params.trainable_items())
    state = AdamWState.for_params(trainable)
    steps_per_epoch = math.ceil(len(train_seqs) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs
    stopper = EarlyStopper(cfg.patience)
    history = TrainHistory()
    best_arrays = params.clone_arrays()
    global_step = 0

    for epoch in range(cfg.max_epochs):
        shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 1, epoch))))
        order = shuffle_rng.permutation(len(train_seqs))
        epoch_loss, epoch_tokens = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch_seqs = [train_seqs[i] for i in order[start : start + cfg.batch_size]]
            batch = _pad_batch(batch_seqs, pad_id)
            inputs, targets = batch[:, :-1], batch[:, 1:]
            drop_rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence((cfg.seed, 2, global_step)))
            )
            for t in trainable.values():
                t.grad = None
            with Tape() as tape:
                logits = forward_batch(params, inputs, train=True, rng=drop_rng)
                loss = clm_loss(logits, targets, pad_id)
                tape.backward(loss)
            grads = {n: t.grad for n, t in trainable.items() if t.grad is not None}
            global_step += 1
            lr = lr_at(global_step, total_steps, cfg)
            adamw_step(trainable, grads, state, lr=lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
            n_valid = int((targets != pad_id).sum())
            epoch_loss += loss.item() * n_valid
            epoch_tokens += n_valid

        if (epoch + 1) % cfg.eval_interval:
            continue
        val_loss = _eval_loss(params, val_seqs, pad_id, cfg.batch_size)
        history.rows.append(
            HistoryRow(
                step=global_step,
                train_loss=epoch_loss / max(epoch_tokens, 1),
                val_loss=val_loss,
                lr=lr_at(global_step, total_steps, cfg),
            )
        )
        improved, should_stop = stopper.update(val_loss)
        if improved:
            history.best_step = global_step
            history.best_val_loss = val_loss
            best_arrays = params.clone_arrays()
        if should_stop:
            history.stopped_early = True
            break

    params.load_arrays(best_arrays)
    return params, history


def write_history_csv(history: TrainHistory, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "train_loss", "val_loss", "lr"])
        for row in history.rows:
            writer.writerow([row.step, f"{row.train_loss:.6f}", f"{row.val_loss:.6f}", f"{row.lr:.8g}"])


# ---------------------------------------------------------------------------
# Compute-budget studies


class FitError(Exception):
    pass


@dataclass(frozen=True)
class IsoflopPoint:
    flop_budget: float
    param_count: float
    val_loss: float

    def __post_init__(self):
        if self.flop_budget <= 0 or self.param_count <= 0 or self.val_loss <= 0:
            raise ValueError("isoflop point fields must be positive")


@dataclass(frozen=True)
class IsoflopFit:
    flop_budget: float
    coeffs: tuple[float, float, float]  # a, b, c of a*x^2 + b*x + c, x = ln(params)
    argmin_log_params: float

    @property
    def argmin_params(self) -> float:
        return math.exp(self.argmin_log_params)


def fit_isoflop(points: list[IsoflopPoint]) -> dict[float, IsoflopFit]:
    """Per-budget least-squares quadratic of val_loss against ln(param_count).

    The interior argmin is -b/(2a); an opening-down or flat parabola
    (a <= 0) has no interior minimum and is rejected.
    """
    by_budget: dict[float, list[IsoflopPoint]] = {}
    for p in points:
        by_budget.setdefault(p.flop_budget, []).append(p)
    fits: dict[float, IsoflopFit] = {}
    for budget, group in sorted(by_budget.items()):
        if len(group) < 3:
            raise FitError(f"budget {budget:g}: need at least 3 points, got {len(group)}")
        x = np.log([p.param_count for p in group])
        y = np.array([p.val_loss for p in group])
        if len(set(np.round(x, 12))) < 3:
            raise FitError(f"budget {budget:g}: degenerate (collinear) inputs")
        design = np.stack([x * x, x, np.ones_like(x)], axis=1)
        coeffs, *_ = np.linalg.lstsq(design, y, rcond=None)
        a, b, c = (float(v) for v in coeffs)
        if a <= 0:
            raise FitError(f"budget {budget:g}: no interior minimum (a={a:g})")
        fits[budget] = IsoflopFit(budget, (a, b, c), argmin_log_params=-b / (2 * a))
    return fits


@dataclass(frozen=True)
class PowerLawFit:
    slope: float
    intercept: float  # natural-log intercept
    r2: float


def fit_power_law(x: list[float], y: list[float]) -> PowerLawFit:
    """Ordinary least squares in log-log space; inputs must be positive."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 2:
        raise FitError("need at least 2 paired points")
    if (x <= 0).any() or (y <= 0).any():
        raise FitError("power-law fit needs positive values")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(((ly - pred) ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(slope=float(slope), intercept=float(intercept), r2=r2)
