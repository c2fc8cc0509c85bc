"""Decoder-only transformer over the atomic clinical vocabulary.

Input embeddings are factorized (a small per-token factor projected up to
the model width) and enriched with frozen knowledge rows passed through
trainable projections and scalar gates. Blocks are pre-RMSNorm with rotary
positions, grouped-query attention, and SwiGLU feed-forward; the output
head reuses the token factor matrix, so logits cost only one extra
width-to-factor projection.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .engine import ShapeError, Tensor, ops
from .tensorfile import load_tensors, save_tensors

if TYPE_CHECKING:
    from .knowledge import FusedEmbeddings

__all__ = [
    "ModelConfig",
    "ModelParams",
    "ParamBreakdown",
    "count_params",
    "init_model",
    "forward",
    "forward_batch",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    factor_dim: int = 100
    model_dim: int = 384
    ffn_hidden: int = 1024
    layers: int = 6
    heads: int = 6
    kv_heads: int = 2
    context_len: int = 2048
    dropout: float = 0.1
    rope_base: float = 10_000.0
    struct_dim: int = 384
    sem_dim: int = 768

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.heads % self.kv_heads:
            raise ValueError("heads must be divisible by kv_heads")
        if self.factor_dim > self.model_dim:
            raise ValueError("factor_dim must not exceed model_dim")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class ParamBreakdown:
    """Per-component parameter counts; (count, trainable) per component."""

    components: dict[str, tuple[int, bool]]

    @property
    def total(self) -> int:
        return sum(c for c, _ in self.components.values())

    @property
    def trainable(self) -> int:
        return sum(c for c, t in self.components.values() if t)

    @property
    def frozen(self) -> int:
        return sum(c for c, t in self.components.values() if not t)


def count_params(config: ModelConfig) -> ParamBreakdown:
    """Closed-form parameter accounting, kept in lockstep with init_model."""
    v, e, d, h = config.vocab_size, config.factor_dim, config.model_dim, config.ffn_hidden
    kv_dim = config.kv_heads * config.head_dim
    block = (
        d  # attention norm gain
        + d * d  # query projection
        + 2 * kv_dim * d  # key and value projections
        + d * d  # output projection
        + d  # feed-forward norm gain
        + 2 * h * d  # SwiGLU gate and up
        + d * h  # SwiGLU down
    )
    components = {
        "token_embeddings": (v * e, True),
        "token_projection": (d * e, True),
        "hierarchy_embeddings": (v * config.struct_dim, False),
        "hierarchy_projection": (d * config.struct_dim, True),
        "hierarchy_norm": (d, True),
        "alpha_struct": (1, True),
        "semantic_embeddings": (v * config.sem_dim, False),
        "semantic_projection": (d * config.sem_dim, True),
        "semantic_norm": (d, True),
        "alpha_sem": (1, True),
        "decoder_blocks": (config.layers * block, True),
        "final_norm": (d, True),
        "output_projection": (e * d, True),
    }
    return ParamBreakdown(components=components)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    frozen: frozenset[str]
    seed: int = 0

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if n not in self.frozen]

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def clone_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, arr in arrays.items():
            self.tensors[n].data = arr.copy()


_FROZEN_NAMES = frozenset({"know_struct_raw", "know_sem_raw"})


def init_model(
    config: ModelConfig, fused: "FusedEmbeddings", seed: int, dtype=np.float32
) -> ModelParams:
    """Seeded initialization; frozen knowledge rows are installed verbatim.

    Trainable matrices draw from N(0, 0.02); norm gains start at one. The
    knowledge projections, gains, and gates are copied from the fused bundle
    so the input embedding starts at the bundle's fused rows, then trains.
    """
    if fused.struct_raw.shape != (config.vocab_size, config.struct_dim):
        raise ShapeError(
            f"fused struct matrix {fused.struct_raw.shape} does not match "
            f"(vocab {config.vocab_size}, struct_dim {config.struct_dim})"
        )
    if fused.sem_raw.shape != (config.vocab_size, config.sem_dim):
        raise ShapeError(f"fused semantic matrix {fused.sem_raw.shape} mismatch")
    rng = np.random.Generator(np.random.PCG64(seed))
    d, e, h = config.model_dim, config.factor_dim, config.ffn_hidden
    kv_dim = config.kv_heads * config.head_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype), requires_grad=True)

    def gain(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    tensors: dict[str, Tensor] = {
        "tok_embed": w(config.vocab_size, e),
        "tok_proj": w(d, e),
        "know_struct_raw": Tensor(fused.struct_raw.astype(dtype), requires_grad=False),
        "know_struct_proj": Tensor(fused.w_struct.astype(dtype), requires_grad=True),
        "know_struct_gain": Tensor(fused.gain_struct.astype(dtype), requires_grad=True),
        "know_alpha_struct": Tensor(np.asarray(fused.alpha_struct, dtype=dtype), requires_grad=True),
        "know_sem_raw": Tensor(fused.sem_raw.astype(dtype), requires_grad=False),
        "know_sem_proj": Tensor(fused.w_sem.astype(dtype), requires_grad=True),
        "know_sem_gain": Tensor(fused.gain_sem.astype(dtype), requires_grad=True),
        "know_alpha_sem": Tensor(np.asarray(fused.alpha_sem, dtype=dtype), requires_grad=True),
    }
    for i in range(config.layers):
        tensors[f"blocks.{i}.attn_gain"] = gain(d)
        tensors[f"blocks.{i}.wq"] = w(d, d)
        tensors[f"blocks.{i}.wk"] = w(kv_dim, d)
        tensors[f"blocks.{i}.wv"] = w(kv_dim, d)
        tensors[f"blocks.{i}.wo"] = w(d, d)
        tensors[f"blocks.{i}.ffn_gain"] = gain(d)
        tensors[f"blocks.{i}.ffn_gate"] = w(h, d)
        tensors[f"blocks.{i}.ffn_up"] = w(h, d)
        tensors[f"blocks.{i}.ffn_down"] = w(d, h)
    tensors["final_gain"] = gain(d)
    tensors["out_proj"] = w(e, d)

    params = ModelParams(config=config, tensors=tensors, frozen=_FROZEN_NAMES, seed=seed)
    breakdown = count_params(config)
    actual = sum(t.data.size for t in tensors.values())
    if actual != breakdown.total:
        raise AssertionError(f"parameter accounting drifted: {actual} != {breakdown.total}")
    return params


def _input_embedding(params: ModelParams, ids: np.ndarray, train: bool, rng) -> Tensor:
    t = params.tensors
    x = ops.linear(ops.embedding_lookup(t["tok_embed"], ids), t["tok_proj"])
    struct = ops.rms_norm(
        ops.linear(ops.embedding_lookup(t["know_struct_raw"], ids), t["know_struct_proj"]),
        t["know_struct_gain"],
    )
    sem = ops.rms_norm(
        ops.linear(ops.embedding_lookup(t["know_sem_raw"], ids), t["know_sem_proj"]),
        t["know_sem_gain"],
    )
    x = x + t["know_alpha_struct"] * struct + t["know_alpha_sem"] * sem
    return ops.dropout(x, params.config.dropout, rng, train)


def forward_batch(
    params: ModelParams, token_ids: np.ndarray, train: bool = False, rng=None
) -> Tensor:
    """Causal logits for a (batch, seq) id matrix; returns (batch, seq, vocab)."""
    cfg = params.config
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ShapeError("forward_batch expects a 2-D id array")
    b, seq = ids.shape
    if seq > cfg.context_len:
        raise ShapeError(f"sequence length {seq} exceeds context {cfg.context_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ShapeError("token id out of range")
    if train and rng is None:
        raise ValueError("training forward needs an rng for dropout")

    t = params.tensors
    positions = np.arange(seq)
    causal = np.tril(np.ones((seq, seq), dtype=bool))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    groups = cfg.heads // cfg.kv_heads

    x = _input_embedding(params, ids, train, rng)
    for i in range(cfg.layers):
        xn = ops.rms_norm(x, t[f"blocks.{i}.attn_gain"])
        q = ops.reshape(ops.linear(xn, t[f"blocks.{i}.wq"]), (b, seq, cfg.heads, cfg.head_dim))
        k = ops.reshape(ops.linear(xn, t[f"blocks.{i}.wk"]), (b, seq, cfg.kv_heads, cfg.head_dim))
        v = ops.reshape(ops.linear(xn, t[f"blocks.{i}.wv"]), (b, seq, cfg.kv_heads, cfg.head_dim))
        q = ops.rotary_rotate(q, positions, cfg.rope_base)
        k = ops.rotary_rotate(k, positions, cfg.rope_base)
        q = ops.transpose(q, (0, 2, 1, 3))
        k = ops.transpose(ops.repeat_heads(k, groups), (0, 2, 1, 3))
        v = ops.transpose(ops.repeat_heads(v, groups), (0, 2, 1, 3))
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * scale
        probs = ops.masked_softmax(scores, causal)
        probs = ops.dropout(probs, cfg.dropout, rng, train)
        attn = ops.reshape(ops.transpose(ops.matmul(probs, v), (0, 2, 1, 3)), (b, seq, cfg.model_dim))
        x = x + ops.dropout(ops.linear(attn, t[f"blocks.{i}.wo"]), cfg.dropout, rng, train)

        xn = ops.rms_norm(x, t[f"blocks.{i}.ffn_gain"])
        gate = ops.silu(ops.linear(xn, t[f"blocks.{i}.ffn_gate"]))
        up = ops.linear(xn, t[f"blocks.{i}.ffn_up"])
        ffn = ops.linear(ops.mul(gate, up), t[f"blocks.{i}.ffn_down"])
        x = x + ops.dropout(ffn, cfg.dropout, rng, train)

    xn = ops.rms_norm(x, t["final_gain"])
    factors = ops.linear(xn, t["out_proj"])  # (b, seq, factor_dim)
    return ops.linear(factors, t["tok_embed"])  # tied head: (b, seq, vocab)


def forward(params: ModelParams, token_ids, train: bool = False, rng=None) -> Tensor:
    """Logits (seq_len, vocab) for a single token sequence."""
    ids = np.asarray(token_ids)
    if ids.ndim != 1:
        raise ShapeError("forward expects a 1-D id sequence")
    logits = forward_batch(params, ids[None, :], train=train, rng=rng)
    return ops.reshape(logits, (ids.shape[0], params.config.vocab_size))


def save_checkpoint(params: ModelParams, path: str | Path, step: int = 0, extra: dict | None = None) -> None:
    meta = {
        "config": asdict(params.config),
        "seed": params.seed,
        "step": step,
        "frozen": sorted(params.frozen),
    }
    if extra:
        meta.update(extra)
    save_tensors(path, {n: t.data for n, t in params.tensors.items()}, meta=meta)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    tensors, meta = load_tensors(path)
    config = ModelConfig(**meta["config"])
    frozen = frozenset(meta["frozen"])
    wrapped = {
        n: Tensor(arr, requires_grad=(n not in frozen)) for n, arr in tensors.items()
    }
    return ModelParams(config=config, tensors=wrapped, frozen=frozen, seed=meta.get("seed", 0)), meta
