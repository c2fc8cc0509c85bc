"""Frozen knowledge-grounded token embeddings.

A typed-edge graph is encoded with a relational graph network trained on an
edge reconstruction objective; each token's structural vector is the mean of
its anchor-node embeddings (zero when unmapped). A deterministic text
provider embeds code descriptions. Both components are projected into the
model dimension, RMS-normalized, gated by scalars, and summed; the raw
matrices are frozen thereafter.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import Tape, Tensor, ops
from .records import Category
from .tensorfile import load_tensors, save_tensors
from .vocab import Vocabulary

__all__ = [
    "KnowledgeGraph",
    "KnowledgeBundle",
    "RgcnConfig",
    "RgcnParams",
    "FusedEmbeddings",
    "KnowledgeConfig",
    "KnowledgeError",
    "load_kg",
    "save_kg",
    "rgcn_layer",
    "run_rgcn",
    "train_rgcn",
    "edge_scores",
    "struct_embed",
    "HashedTextProvider",
    "FileVectorProvider",
    "semantic_embed",
    "fuse",
    "build_fused_embeddings",
    "save_fused",
    "load_fused",
    "toy_kg_from_spec",
]


class KnowledgeError(Exception):
    pass


@dataclass
class KnowledgeGraph:
    """Directed typed-edge graph; nodes are implied by edges unless declared."""

    nodes: list[str]
    relations: list[str]
    edges: list[tuple[str, str, str]]  # (head, relation, tail)

    def __post_init__(self):
        self.node_index = {n: i for i, n in enumerate(self.nodes)}
        node_set = set(self.nodes)
        rel_set = set(self.relations)
        for h, r, t in self.edges:
            if h not in node_set or t not in node_set:
                raise KnowledgeError(f"dangling edge endpoint in ({h}, {r}, {t})")
            if r not in rel_set:
                raise KnowledgeError(f"unknown relation {r!r}")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


@dataclass
class KnowledgeBundle:
    graph: KnowledgeGraph
    anchors: dict[str, tuple[str, ...]]  # token name -> anchor nodes
    descriptions: dict[str, str]  # token name -> description text

    def __post_init__(self):
        node_set = set(self.graph.nodes)
        for token, anchor_nodes in self.anchors.items():
            for node in anchor_nodes:
                if node not in node_set:
                    raise KnowledgeError(f"anchor for {token!r} references absent node {node!r}")


def load_kg(path: str | Path) -> KnowledgeBundle:
    """Load edges.tsv, anchors.json, descriptions.json (and optional nodes.txt)."""
    path = Path(path)
    edges = []
    relations: list[str] = []
    endpoints: list[str] = []
    for line_no, line in enumerate((path / "edges.tsv").read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise KnowledgeError(f"edges.tsv line {line_no}: expected 3 tab-separated fields")
        h, r, t = parts
        edges.append((h, r, t))
        if r not in relations:
            relations.append(r)
        endpoints += [h, t]
    nodes_file = path / "nodes.txt"
    if nodes_file.exists():
        nodes = [n for n in nodes_file.read_text(encoding="utf-8").splitlines() if n]
    else:
        nodes = sorted(set(endpoints))
    graph = KnowledgeGraph(nodes=nodes, relations=relations, edges=edges)
    anchors_raw = json.loads((path / "anchors.json").read_text(encoding="utf-8"))
    descriptions = json.loads((path / "descriptions.json").read_text(encoding="utf-8"))
    anchors = {k: tuple(v) for k, v in anchors_raw.items()}
    return KnowledgeBundle(graph=graph, anchors=anchors, descriptions=descriptions)


def save_kg(bundle: KnowledgeBundle, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{h}\t{r}\t{t}" for h, r, t in bundle.graph.edges]
    (path / "edges.tsv").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    (path / "nodes.txt").write_text("\n".join(bundle.graph.nodes) + "\n", encoding="utf-8")
    (path / "anchors.json").write_text(
        json.dumps({k: list(v) for k, v in sorted(bundle.anchors.items())}, indent=1) + "\n",
        encoding="utf-8",
    )
    (path / "descriptions.json").write_text(
        json.dumps(dict(sorted(bundle.descriptions.items())), indent=1) + "\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# Relational graph network


@dataclass
class RgcnConfig:
    dims: tuple[int, ...] = (64, 384)  # d(0)..d(L)
    epochs: int = 150
    lr: float = 0.01
    negatives_per_edge: int = 4
    seed: int = 0


@dataclass
class RgcnParams:
    dims: tuple[int, ...]
    relations: list[str]
    node_features: np.ndarray  # fixed seeded inputs h(0), shape (N, d0)
    layer_weights: list[dict[str, Tensor]]  # per layer: relation -> W_r, plus "_self"
    score_vectors: dict[str, Tensor]  # per-relation bilinear (diagonal) score vector

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layer_weights):
            for rel, w in layer.items():
                out[f"layer{i}/{rel}"] = w
        for rel, v in self.score_vectors.items():
            out[f"score/{rel}"] = v
        return out


def _norm_adjacency(graph: KnowledgeGraph) -> dict[str, np.ndarray]:
    """Row-normalized dense adjacency per relation: A[v, u] = 1/|N_r(v)|."""
    n = graph.n_nodes
    mats = {r: np.zeros((n, n)) for r in graph.relations}
    for h, r, t in graph.edges:
        mats[r][graph.node_index[t], graph.node_index[h]] = 1.0
    for r, m in mats.items():
        deg = m.sum(axis=1, keepdims=True)
        np.divide(m, deg, out=m, where=deg > 0)
    return mats


def rgcn_layer(
    graph: KnowledgeGraph,
    h: Tensor,
    layer_params: dict[str, Tensor],
    activation: str = "relu",
    adjacency: dict[str, np.ndarray] | None = None,
) -> Tensor:
    """One message-passing layer.

    out_v = act( sum_r mean_{u in N_r(v)} W_r h_u + W_self h_v ), where
    N_r(v) are the in-neighbors of v under relation r. `activation` may be
    "identity" for linearity tests.
    """
    if adjacency is None:
        adjacency = _norm_adjacency(graph)
    out = ops.linear(h, layer_params["_self"])
    for rel in graph.relations:
        if rel not in layer_params:
            continue
        messages = ops.linear(h, layer_params[rel])
        out = out + ops.matmul(ops.constant(adjacency[rel], dtype=h.dtype), messages)
    if activation == "relu":
        return ops.relu(out)
    if activation == "identity":
        return out
    raise ValueError(f"unknown activation {activation!r}")


def run_rgcn(graph: KnowledgeGraph, params: RgcnParams,
             adjacency: dict[str, np.ndarray] | None = None) -> Tensor:
    if adjacency is None:
        adjacency = _norm_adjacency(graph)
    h = ops.constant(params.node_features)
    for layer in params.layer_weights:
        h = rgcn_layer(graph, h, layer, activation="relu", adjacency=adjacency)
    return h


def edge_scores(embeddings: Tensor, score_vec: Tensor, heads: np.ndarray, tails: np.ndarray) -> Tensor:
    """Diagonal bilinear score s(u, r, v) = sum_d e_u[d] * r[d] * e_v[d]."""
    eu = ops.embedding_lookup(embeddings, heads)
    ev = ops.embedding_lookup(embeddings, tails)
    return ops.sum_(ops.mul(ops.mul(eu, ev), score_vec), axis=-1)


def _init_rgcn_params(graph: KnowledgeGraph, config: RgcnConfig) -> RgcnParams:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    dims = tuple(config.dims)
    node_features = rng.normal(0.0, 1.0, size=(graph.n_nodes, dims[0]))
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        layer = {"_self": Tensor(rng.normal(0, 0.1, size=(d_out, d_in)), requires_grad=True)}
        for rel in graph.relations:
            layer[rel] = Tensor(rng.normal(0, 0.1, size=(d_out, d_in)), requires_grad=True)
        layers.append(layer)
    scores = {
        rel: Tensor(rng.normal(0, 0.1, size=(dims[-1],)), requires_grad=True)
        for rel in graph.relations
    }
    return RgcnParams(
        dims=dims,
        relations=list(graph.relations),
        node_features=node_features,
        layer_weights=layers,
        score_vectors=scores,
    )


def train_rgcn(graph: KnowledgeGraph, config: RgcnConfig) -> tuple[RgcnParams, list[float]]:
    """Fit the graph encoder by scoring true edges above uniform negatives.

    Binary cross-entropy over diagonal bilinear edge scores, with
    `negatives_per_edge` tail-corrupted negatives per positive. Returns the
    trained parameters and the per-epoch loss trace.
    """
    if not graph.edges:
        raise KnowledgeError("cannot train on a graph with no edges")
    from .train import AdamWState, adamw_step  # local import: train depends on model, not on us

    params = _init_rgcn_params(graph, config)
    adjacency = _norm_adjacency(graph)
    rng = np.random.Generator(np.random.PCG64(config.seed + 1))
    named = params.named_tensors()
    state = AdamWState.for_params(named)
    n = graph.n_nodes
    by_rel: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for rel in graph.relations:
        pairs = [(graph.node_index[h], graph.node_index[t]) for h, r, t in graph.edges if r == rel]
        if pairs:
            arr = np.array(pairs)
            by_rel[rel] = (arr[:, 0], arr[:, 1])

    trace: list[float] = []
    for _ in range(config.epochs):
        for t in named.values():
            t.grad = None
        with Tape() as tape:
            emb = run_rgcn(graph, params, adjacency)
            total = None
            n_terms = 0
            for rel, (heads, tails) in by_rel.items():
                k = config.negatives_per_edge
                neg_heads = np.repeat(heads, k)
                neg_tails = rng.integers(0, n, size=len(heads) * k)
                s_pos = edge_scores(emb, params.score_vectors[rel], heads, tails)
                s_neg = edge_scores(emb, params.score_vectors[rel], neg_heads, neg_tails)
                term = ops.bce_with_logits(s_pos, np.ones(len(heads))) * float(len(heads))
                term = term + ops.bce_with_logits(s_neg, np.zeros(len(neg_heads))) * float(len(neg_heads))
                total = term if total is None else total + term
                n_terms += len(heads) + len(neg_heads)
            loss = total * (1.0 / n_terms)
            tape.backward(loss)
        trace.append(loss.item())
        grads = {name: t.grad for name, t in named.items() if t.grad is not None}
        adamw_step(named, grads, state, lr=config.lr, weight_decay=0.0)
    return params, trace


def struct_embed(token: str, node_embeddings: np.ndarray, node_index: dict[str, int],
                 anchors: dict[str, tuple[str, ...]]) -> np.ndarray:
    """Mean of anchor-node embeddings; the zero vector when unanchored."""
    anchor_nodes = anchors.get(token, ())
    if not anchor_nodes:
        return np.zeros(node_embeddings.shape[1])
    rows = [node_embeddings[node_index[a]] for a in anchor_nodes]
    return np.mean(rows, axis=0)


# ---------------------------------------------------------------------------
# Semantic text embeddings


class HashedTextProvider:
    """Deterministic stand-in text encoder: hash-seeded unit random vector."""

    def __init__(self, dim: int = 768):
        self.dim = dim
        self.provider_id = f"hashed-v1-{dim}"

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.Generator(np.random.PCG64(seed))
        vec = rng.normal(0.0, 1.0, size=self.dim)
        return vec / np.linalg.norm(vec)


class FileVectorProvider:
    """Serves precomputed per-token vectors loaded from a JSON file."""

    def __init__(self, path: str | Path):
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in obj.items()}
        dims = {v.shape[0] for v in self.vectors.values()}
        if len(dims) > 1:
            raise KnowledgeError(f"inconsistent vector dims in {path}: {sorted(dims)}")
        self.dim = dims.pop() if dims else 768
        self.provider_id = f"file-{Path(path).name}"

    def embed(self, key: str) -> np.ndarray:
        if key not in self.vectors:
            raise KnowledgeError(f"file provider has no vector for {key!r}")
        return self.vectors[key]


def semantic_embed(text: str, provider) -> np.ndarray:
    return provider.embed(text)


# ---------------------------------------------------------------------------
# Fusion


@dataclass
class FusionParams:
    w_struct: np.ndarray  # (D, d_struct)
    w_sem: np.ndarray  # (D, d_sem)
    gain_struct: np.ndarray  # (D,)
    gain_sem: np.ndarray  # (D,)
    alpha_struct: float = 1.0
    alpha_sem: float = 1.0


def _rms_normalize(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * gain


def fuse(struct_vec: np.ndarray, sem_vec: np.ndarray, fusion: FusionParams) -> np.ndarray:
    """Gated sum of the RMS-normalized projected components.

    The projections carry no bias, so a zero structural vector contributes
    exactly zero and the row depends on the semantic path alone.
    """
    h_struct = fusion.w_struct @ struct_vec
    h_sem = fusion.w_sem @ sem_vec
    return fusion.alpha_struct * _rms_normalize(h_struct, fusion.gain_struct) + (
        fusion.alpha_sem * _rms_normalize(h_sem, fusion.gain_sem)
    )


@dataclass
class KnowledgeConfig:
    model_dim: int = 384
    sem_dim: int = 768
    rgcn: RgcnConfig = field(default_factory=RgcnConfig)

    @property
    def struct_dim(self) -> int:
        return self.rgcn.dims[-1]


@dataclass
class FusedEmbeddings:
    z: np.ndarray  # (V, D) fused rows, frozen
    struct_raw: np.ndarray  # (V, d_struct), zero rows for unanchored tokens
    sem_raw: np.ndarray  # (V, d_sem)
    w_struct: np.ndarray
    w_sem: np.ndarray
    gain_struct: np.ndarray
    gain_sem: np.ndarray
    alpha_struct: float
    alpha_sem: float
    has_anchor: np.ndarray  # (V,) bool
    meta: dict


def build_fused_embeddings(
    vocab: Vocabulary,
    bundle: KnowledgeBundle,
    config: KnowledgeConfig,
    seed: int,
    provider=None,
) -> FusedEmbeddings:
    """Train the graph encoder, pool anchors, embed descriptions, and fuse.

    Tokens without a description (structure, gap, quantile tokens) fall back
    to hashing their own token name through the semantic path, so every row
    is defined and deterministic for a fixed (bundle, config, seed).
    """
    provider = provider or HashedTextProvider(config.sem_dim)
    if provider.dim != config.sem_dim:
        raise KnowledgeError(f"provider dim {provider.dim} != configured sem_dim {config.sem_dim}")
    rgcn_cfg = RgcnConfig(
        dims=config.rgcn.dims,
        epochs=config.rgcn.epochs,
        lr=config.rgcn.lr,
        negatives_per_edge=config.rgcn.negatives_per_edge,
        seed=seed,
    )
    params, _ = train_rgcn(bundle.graph, rgcn_cfg)
    node_emb = run_rgcn(bundle.graph, params).data

    v_size = vocab.size
    d_struct, d_sem, d_model = config.struct_dim, config.sem_dim, config.model_dim
    struct_raw = np.zeros((v_size, d_struct))
    sem_raw = np.zeros((v_size, d_sem))
    has_anchor = np.zeros(v_size, dtype=bool)
    for i, token in enumerate(vocab.id_to_token):
        struct_raw[i] = struct_embed(token, node_emb, bundle.graph.node_index, bundle.anchors)
        has_anchor[i] = bool(bundle.anchors.get(token))
        sem_raw[i] = provider.embed(bundle.descriptions.get(token) or token)

    rng = np.random.Generator(np.random.PCG64(seed + 17))
    fusion = FusionParams(
        w_struct=rng.normal(0, 0.02, size=(d_model, d_struct)),
        w_sem=rng.normal(0, 0.02, size=(d_model, d_sem)),
        gain_struct=np.ones(d_model),
        gain_sem=np.ones(d_model),
    )
    z = np.zeros((v_size, d_model))
    for i in range(v_size):
        z[i] = fuse(struct_raw[i], sem_raw[i], fusion)
    return FusedEmbeddings(
        z=z,
        struct_raw=struct_raw,
        sem_raw=sem_raw,
        w_struct=fusion.w_struct,
        w_sem=fusion.w_sem,
        gain_struct=fusion.gain_struct,
        gain_sem=fusion.gain_sem,
        alpha_struct=fusion.alpha_struct,
        alpha_sem=fusion.alpha_sem,
        has_anchor=has_anchor,
        meta={
            "vocab_size": v_size,
            "model_dim": d_model,
            "struct_dim": d_struct,
            "sem_dim": d_sem,
            "seed": seed,
            "provider": provider.provider_id,
        },
    )


def save_fused(fused: FusedEmbeddings, path: str | Path) -> None:
    save_tensors(
        path,
        {
            "z": fused.z,
            "struct_raw": fused.struct_raw,
            "sem_raw": fused.sem_raw,
            "w_struct": fused.w_struct,
            "w_sem": fused.w_sem,
            "gain_struct": fused.gain_struct,
            "gain_sem": fused.gain_sem,
            "alphas": np.array([fused.alpha_struct, fused.alpha_sem]),
            "has_anchor": fused.has_anchor.astype(np.uint8),
        },
        meta=fused.meta,
    )


def load_fused(path: str | Path) -> FusedEmbeddings:
    tensors, meta = load_tensors(path)
    return FusedEmbeddings(
        z=tensors["z"],
        struct_raw=tensors["struct_raw"],
        sem_raw=tensors["sem_raw"],
        w_struct=tensors["w_struct"],
        w_sem=tensors["w_sem"],
        gain_struct=tensors["gain_struct"],
        gain_sem=tensors["gain_sem"],
        alpha_struct=float(tensors["alphas"][0]),
        alpha_sem=float(tensors["alphas"][1]),
        has_anchor=tensors["has_anchor"].astype(bool),
        meta=meta,
    )


_RELATION_BY_CATEGORY = {
    Category.MEDICATION: "treats",
    Category.PROCEDURE: "procedure_for",
    Category.LAB: "measures",
    Category.DIAGNOSIS: "associated_with",
}


def toy_kg_from_spec(sim_spec) -> KnowledgeBundle:
    """Derive a small typed graph from a simulator spec's condition rules.

    Each implication becomes a forward edge (implied, relation, trigger) plus
    its inverse, so message passing reaches both endpoints. Anchors map each
    event token to its own code node; descriptions carry the event labels.
    """
    from .vocab import event_token  # deferred: vocab imports records only

    nodes: list[str] = []
    edges: list[tuple[str, str, str]] = []
    relations: list[str] = []
    descriptions: dict[str, str] = {}
    anchors: dict[str, tuple[str, ...]] = {}

    def ensure_node(code: str) -> None:
        if code not in nodes:
            nodes.append(code)

    def ensure_rel(rel: str) -> None:
        if rel not in relations:
            relations.append(rel)

    for base in sim_spec.base_events:
        ensure_node(base.code)
        token = event_token(base.category, base.code)
        anchors[token] = (base.code,)
        descriptions[token] = base.label
    for rule in sim_spec.rules:
        ensure_node(rule.trigger)
        for imp in rule.implications:
            ensure_node(imp.code)
            token = event_token(imp.category, imp.code)
            anchors.setdefault(token, (imp.code,))
            descriptions.setdefault(token, imp.label)
            rel = _RELATION_BY_CATEGORY[imp.category]
            ensure_rel(rel)
            ensure_rel(rel + "_inv")
            edges.append((imp.code, rel, rule.trigger))
            edges.append((rule.trigger, rel + "_inv", imp.code))
    graph = KnowledgeGraph(nodes=nodes, relations=relations, edges=edges)
    return KnowledgeBundle(graph=graph, anchors=anchors, descriptions=descriptions)
