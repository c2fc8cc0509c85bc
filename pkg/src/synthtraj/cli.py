"""Pipeline orchestration: one subcommand per stage plus an end-to-end runner.

Every stage writes its outputs plus a manifest (config hash, input/output
digests, seed, wall clock) sufficient to re-run it bit-identically. Exit
codes: 0 ok, 1 stage failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, evaluate as ev
from .audit import (
    AuditorConfig,
    StubAuditorServer,
    audit_cohort,
    cohens_d,
    rank_sum_p,
)
from .generate import SamplerConfig, generate_cohort
from .knowledge import (
    KnowledgeConfig,
    RgcnConfig,
    build_fused_embeddings,
    load_fused,
    load_kg,
    save_fused,
    save_kg,
    toy_kg_from_spec,
)
from .model import ModelConfig, count_params, init_model, load_checkpoint, save_checkpoint
from .records import Corpus, load_corpus, save_corpus, split_corpus
from .simulate import default_spec, load_spec, save_spec, simulate_corpus
from .train import (
    IsoflopPoint,
    TrainConfig,
    encode_for_training,
    fit_isoflop,
    fit_power_law,
    train_model,
    write_history_csv,
)
from .vocab import build_vocab, load_vocab, save_vocab

USAGE_ERROR, STAGE_ERROR = 2, 1


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(
    out_dir: Path,
    command: str,
    seed: int,
    config: dict,
    inputs: dict[str, Path],
    outputs: dict[str, Path],
    started: float,
) -> Path:
    """Atomically write the stage manifest; wall clock is the only field
    expected to differ between identical runs."""
    manifest = {
        "command": command,
        "seed": seed,
        "package_version": __version__,
        "config_sha256": _config_hash(config),
        "inputs": {name: _sha256(Path(p)) for name, p in sorted(inputs.items())},
        "outputs": {name: _sha256(Path(p)) for name, p in sorted(outputs.items())},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "manifest.json"
    tmp = target.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, target)
    return target


# ---------------------------------------------------------------------------
# Stage implementations


def stage_simulate(args) -> int:
    started = time.time()
    spec = load_spec(args.spec) if args.spec else default_spec(args.n or 2000)
    if args.n:
        spec.n_patients = args.n
    corpus = simulate_corpus(spec, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out)
    spec_path = out.parent / (out.stem + ".spec.json")
    save_spec(spec, spec_path)
    cfg = {"n_patients": spec.n_patients, "spec": args.spec or "default"}
    write_manifest(out.parent, "simulate", args.seed, cfg, {}, {out.name: out, spec_path.name: spec_path}, started)
    print(f"simulated {len(corpus)} records -> {out}")
    return 0


def stage_build_vocab(args) -> int:
    started = time.time()
    corpus = load_corpus(args.corpus)
    vocab = build_vocab(corpus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_vocab(vocab, out)
    write_manifest(out.parent, "build-vocab", 0, {"corpus": str(args.corpus)},
                   {"corpus": Path(args.corpus)}, {out.name: out}, started)
    print(f"vocabulary of {vocab.size} tokens -> {out}")
    return 0


def stage_embed_kg(args) -> int:
    started = time.time()
    vocab = load_vocab(args.vocab)
    bundle = load_kg(args.kg)
    dims = tuple(int(d) for d in args.rgcn_dims.split(","))
    cfg = KnowledgeConfig(
        model_dim=args.model_dim,
        rgcn=RgcnConfig(dims=dims, epochs=args.epochs),
    )
    fused = build_fused_embeddings(vocab, bundle, cfg, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fused(fused, out)
    write_manifest(
        out.parent, "embed-kg", args.seed,
        {"model_dim": args.model_dim, "rgcn_dims": list(dims), "epochs": args.epochs},
        {"vocab": Path(args.vocab)}, {out.name: out}, started,
    )
    print(f"fused embeddings {fused.z.shape} -> {out}")
    return 0


def _model_config(vocab_size: int, fused_meta: dict, overrides: dict) -> ModelConfig:
    base = {
        "vocab_size": vocab_size,
        "struct_dim": fused_meta["struct_dim"],
        "sem_dim": fused_meta["sem_dim"],
        "model_dim": fused_meta["model_dim"],
    }
    base.update(overrides)
    return ModelConfig(**base)


def stage_train(args) -> int:
    started = time.time()
    cfg_obj = json.loads(Path(args.config).read_text()) if args.config else {}
    vocab = load_vocab(args.vocab)
    fused = load_fused(args.embeddings)
    train_corpus = load_corpus(Path(args.corpus_dir) / "train.jsonl")
    val_corpus = load_corpus(Path(args.corpus_dir) / "val.jsonl")
    model_cfg = _model_config(vocab.size, fused.meta, cfg_obj.get("model", {}))
    train_cfg = TrainConfig(**cfg_obj.get("train", {}))
    params = init_model(model_cfg, fused, seed=train_cfg.seed)
    train_seqs, _ = encode_for_training(train_corpus, vocab, model_cfg.context_len)
    val_seqs, skipped = encode_for_training(val_corpus, vocab, model_cfg.context_len)
    if skipped:
        print(f"note: skipped {skipped} validation records with out-of-vocabulary codes")
    params, history = train_model(params, train_seqs, val_seqs, train_cfg, vocab.padding_id)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(params, ckpt, step=history.best_step)
    hist_path = out_dir / "history.csv"
    write_history_csv(history, hist_path)
    write_manifest(
        out_dir, "train", train_cfg.seed, cfg_obj,
        {"vocab": Path(args.vocab), "embeddings": Path(args.embeddings)},
        {"model.ckpt": ckpt, "history.csv": hist_path}, started,
    )
    print(
        f"trained to best val loss {history.best_val_loss:.4f} at step {history.best_step}"
        f" (early stop: {history.stopped_early}) -> {ckpt}"
    )
    return 0


def _trainable_count(cfg: ModelConfig) -> int:
    return count_params(cfg).trainable


def run_scale_grid(
    train_seqs, val_seqs, vocab, fused, budgets, model_dims, seed, batch_size=16
) -> list[IsoflopPoint]:
    """Desk-scale isoflop grid: train each width until its flop budget is
    spent (6 * trainable-params flops per token), then record val loss."""
    from .engine import Tape
    from .model import forward_batch
    from .train import AdamWState, adamw_step, clm_loss, _eval_loss, _pad_batch

    points = []
    for budget in budgets:
        for dim in model_dims:
            heads = 2 if dim % 4 == 0 else 1
            cfg = ModelConfig(
                vocab_size=vocab.size,
                factor_dim=max(4, dim // 2),
                model_dim=dim,
                ffn_hidden=dim * 2,
                layers=2,
                heads=heads,
                kv_heads=heads,
                context_len=256,
                dropout=0.0,
                struct_dim=fused.meta["struct_dim"],
                sem_dim=fused.meta["sem_dim"],
            )
            params = init_model(cfg, fused, seed=seed)
            n_trainable = _trainable_count(cfg)
            token_budget = budget / (6.0 * n_trainable)
            trainable = dict(params.trainable_items())
            state = AdamWState.for_params(trainable)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, dim))))
            tokens_seen, step = 0, 0
            while tokens_seen < token_budget:
                idx = rng.integers(0, len(train_seqs), size=batch_size)
                batch = _pad_batch([train_seqs[i] for i in idx], vocab.padding_id)
                inputs, targets = batch[:, :-1], batch[:, 1:]
                for t in trainable.values():
                    t.grad = None
                with Tape() as tape:
                    loss = clm_loss(forward_batch(params, inputs, train=False), targets, vocab.padding_id)
                    tape.backward(loss)
                grads = {n: t.grad for n, t in trainable.items() if t.grad is not None}
                adamw_step(trainable, grads, state, lr=3e-4, weight_decay=0.0)
                tokens_seen += int((targets != vocab.padding_id).sum())
                step += 1
            val = _eval_loss(params, val_seqs, vocab.padding_id, batch_size)
            points.append(IsoflopPoint(flop_budget=float(budget), param_count=float(n_trainable), val_loss=val))
    return points


def _fit_report(points: list[IsoflopPoint]) -> dict:
    report: dict = {"points": [vars(p) for p in points], "fits": {}, "power_laws": {}}
    budgets, optima = [], []
    for budget in sorted({p.flop_budget for p in points}):
        group = [p for p in points if p.flop_budget == budget]
        try:
            fit = fit_isoflop(group)[budget]
            report["fits"][f"{budget:g}"] = {
                "coeffs": list(fit.coeffs),
                "argmin_log_params": fit.argmin_log_params,
                "argmin_params": fit.argmin_params,
            }
            budgets.append(budget)
            optima.append(fit.argmin_params)
        except Exception as exc:  # noqa: BLE001 - fit failures are data here
            report["fits"][f"{budget:g}"] = {"error": str(exc)}
    if len(budgets) >= 2:
        pl = fit_power_law(budgets, optima)
        report["power_laws"]["optimal_params"] = {
            "slope": pl.slope, "intercept": pl.intercept, "r2": pl.r2,
        }
    return report


def stage_scale_study(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.points:
        raw = json.loads(Path(args.points).read_text())
        points = [IsoflopPoint(**p) for p in raw]
        inputs = {"points": Path(args.points)}
        cfg = {"mode": "points"}
    else:
        vocab = load_vocab(args.vocab)
        fused = load_fused(args.embeddings)
        train_corpus = load_corpus(Path(args.corpus_dir) / "train.jsonl")
        val_corpus = load_corpus(Path(args.corpus_dir) / "val.jsonl")
        train_seqs, _ = encode_for_training(train_corpus, vocab, 256)
        val_seqs, _ = encode_for_training(val_corpus, vocab, 256)
        budgets = [float(b) for b in args.budgets.split(",")]
        dims = [int(d) for d in args.model_dims.split(",")]
        points = run_scale_grid(train_seqs, val_seqs, vocab, fused, budgets, dims, args.seed)
        inputs = {"vocab": Path(args.vocab)}
        cfg = {"mode": "grid", "budgets": budgets, "model_dims": dims}
    report = _fit_report(points)
    out = out_dir / "isoflop.json"
    _write_json(out, report)
    write_manifest(out_dir, "scale-study", args.seed, cfg, inputs, {"isoflop.json": out}, started)
    print(f"scale study ({len(points)} points) -> {out}")
    return 0


def stage_generate(args) -> int:
    started = time.time()
    params, _ = load_checkpoint(args.model)
    vocab = load_vocab(args.vocab)
    seeds = load_corpus(args.seeds)
    cfg = SamplerConfig(top_p=args.top_p, temperature=args.temperature,
                        max_tokens=args.max_tokens, seed=args.seed)
    records, report = generate_cohort(params, seeds, vocab, args.n, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(Corpus(records=records, name="synthetic", seed=args.seed), out)
    report_path = Path(args.report) if args.report else out.parent / "generation_report.json"
    _write_json(report_path, report.to_json())
    write_manifest(
        out.parent, "generate", args.seed,
        {"n": args.n, "top_p": args.top_p, "temperature": args.temperature, "max_tokens": args.max_tokens},
        {"model": Path(args.model), "seeds": Path(args.seeds)},
        {out.name: out, report_path.name: report_path}, started,
    )
    print(
        f"generated {report.n_complete} complete / {report.n_truncated} truncated"
        f" (violations: {report.structural_violations}) -> {out}"
    )
    return 0


def _auditor_from_args(base_url: str | None, stub: StubAuditorServer | None) -> AuditorConfig:
    if stub is not None:
        return AuditorConfig(base_url=stub.base_url, model_name="stub-auditor",
                             backoff_base_seconds=0.01)
    cfg = AuditorConfig.from_env()
    if base_url:
        cfg.base_url = base_url
    if not cfg.base_url:
        raise ValueError("no auditor endpoint: pass --base-url, --stub, or set AUDITOR_BASE_URL")
    return cfg


def stage_audit(args) -> int:
    started = time.time()
    corpus = load_corpus(args.infile)
    stub_ctx = StubAuditorServer() if args.stub else None
    if stub_ctx:
        stub_ctx.__enter__()
    try:
        config = _auditor_from_args(args.base_url, stub_ctx)
        kept, report = audit_cohort(corpus.records, None, config, threshold=args.threshold)
    finally:
        if stub_ctx:
            stub_ctx.__exit__(None, None, None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(Corpus(records=kept, name="audited"), out)
    report_path = Path(args.report)
    _write_json(report_path, report.to_json())
    write_manifest(
        out.parent, "audit", 0, {"threshold": args.threshold, "stub": bool(args.stub)},
        {"in": Path(args.infile)}, {out.name: out, report_path.name: report_path}, started,
    )
    print(f"kept {report.n_kept}/{len(corpus)} records (failed: {report.n_failed}) -> {out}")
    return 0


def _fidelity_metrics(real: Corpus, syn: Corpus, top_k: int) -> tuple[dict, dict]:
    metrics: dict = {}
    csv_blobs: dict[str, str] = {}
    for mode in ev.ProbMode:
        tr = ev.code_probs(real, mode)
        ts = ev.code_probs(syn, mode)
        x, y = ev.pair_tables(tr, ts)
        entry: dict = {"support_real": tr.support, "support_synthetic": ts.support}
        if len(x) >= 2 and x.std() > 0 and y.std() > 0:
            ba = ev.bland_altman(x, y)
            entry.update(
                r2=ev.r2(x, y), bias=ba.bias, loa_low=ba.loa_low, loa_high=ba.loa_high, n=ba.n
            )
            rows = ["key,real,synthetic"]
            keys = sorted(set(tr.probs) | set(ts.probs))
            for k, xi, yi in zip(keys, x, y):
                kk = k if isinstance(k, str) else "|".join(k)
                rows.append(f"{kk},{xi:.10g},{yi:.10g}")
            csv_blobs[f"bland_altman_{mode.value.lower()}.csv"] = "\n".join(rows) + "\n"
        metrics[mode.value.lower()] = entry
    structural = {}
    sr, ss = ev.structural_samples(real), ev.structural_samples(syn)
    for name in sr:
        if len(sr[name]) and len(ss[name]):
            structural[name] = {
                "ks": ev.ks_stat(sr[name], ss[name]),
                "overlap": ev.overlap_coeff(sr[name], ss[name]),
                "median_real": float(np.median(sr[name])),
                "median_synthetic": float(np.median(ss[name])),
            }
            grid = np.sort(np.concatenate([sr[name], ss[name]]))
            fa = np.searchsorted(np.sort(sr[name]), grid, side="right") / len(sr[name])
            fb = np.searchsorted(np.sort(ss[name]), grid, side="right") / len(ss[name])
            rows = ["value,ecdf_real,ecdf_synthetic"]
            rows += [f"{v:.10g},{a:.10g},{b:.10g}" for v, a, b in zip(grid, fa, fb)]
            csv_blobs[f"ecdf_{name}.csv"] = "\n".join(rows) + "\n"
    metrics["structural"] = structural
    try:
        pearson, spearman = ev.cooccur_matrix_corr(real, syn, top_k=top_k)
        metrics["cooccurrence"] = {"pearson": pearson, "spearman": spearman, "top_k": top_k}
        codes = ev._top_diagnosis_codes(real, top_k)
        for tag, corpus in (("real", real), ("synthetic", syn)):
            m = ev.cooccur_matrix(corpus, codes)
            rows = ["," + ",".join(codes)]
            rows += [codes[i] + "," + ",".join(f"{v:g}" for v in m[i]) for i in range(len(codes))]
            csv_blobs[f"cooccur_{tag}.csv"] = "\n".join(rows) + "\n"
    except ValueError as exc:
        metrics["cooccurrence"] = {"error": str(exc)}
    return metrics, csv_blobs


def stage_evaluate(args) -> int:
    started = time.time()
    real = load_corpus(args.real)
    syn = load_corpus(args.syn)
    vocab = load_vocab(args.vocab)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    syn_fit = ev.filter_by_token_length(syn, vocab, max_tokens=args.max_tokens)
    metrics, csv_blobs = _fidelity_metrics(real, syn_fit, args.top_k)
    metrics["tstr"] = {}
    for task in ev.TstrTask:
        entry = {}
        try:
            entry["synthetic"] = ev.tstr_eval(syn_fit, real, task, seed=args.seed)
        except ValueError as exc:
            entry["synthetic"] = {"error": str(exc)}
        if args.real_train:
            real_train = load_corpus(args.real_train)
            try:
                entry["real"] = ev.tstr_eval(real_train, real, task, seed=args.seed)
            except ValueError as exc:
                entry["real"] = {"error": str(exc)}
        metrics["tstr"][task.value.lower()] = entry
    outputs = {}
    metrics_path = out_dir / "metrics.json"
    _write_json(metrics_path, metrics)
    outputs["metrics.json"] = metrics_path
    for name, blob in csv_blobs.items():
        p = out_dir / name
        p.write_text(blob, encoding="utf-8")
        outputs[name] = p
    inputs = {"real": Path(args.real), "syn": Path(args.syn), "vocab": Path(args.vocab)}
    if args.real_train:
        inputs["real_train"] = Path(args.real_train)
    write_manifest(out_dir, "evaluate", args.seed, {"top_k": args.top_k}, inputs, outputs, started)
    print(f"evaluation metrics -> {metrics_path}")
    return 0


def stage_attack(args) -> int:
    started = time.time()
    train_corpus = load_corpus(args.train)
    test_corpus = load_corpus(args.test)
    syn = load_corpus(args.syn)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    size = min(args.mia_size, len(train_corpus), len(test_corpus))
    members = [train_corpus.records[i] for i in rng.permutation(len(train_corpus))[:size]]
    nonmembers = [test_corpus.records[i] for i in rng.permutation(len(test_corpus))[:size]]
    mia = ev.mia_attack(members, nonmembers, syn.records, seed=args.seed)
    aia_syn = ev.aia_attack(syn.records, k=args.k) if len(syn) > args.k else None
    aia_real = ev.aia_attack(test_corpus.records, k=args.k)
    report = {
        "mia": vars(mia),
        "aia_real": vars(aia_real),
        "aia_synthetic": vars(aia_syn) if aia_syn else {"error": "synthetic set too small"},
    }
    out_dir = Path(args.out)
    out = out_dir / "privacy.json"
    _write_json(out, report)
    write_manifest(
        out_dir, "attack", args.seed, {"k": args.k, "mia_size": args.mia_size},
        {"train": Path(args.train), "test": Path(args.test), "syn": Path(args.syn)},
        {"privacy.json": out}, started,
    )
    print(f"privacy report -> {out}")
    return 0


# ---------------------------------------------------------------------------
# End-to-end pipeline


_DESK_DEFAULTS = {
    "seed": 11,
    "simulate": {"n_patients": 600},
    "split": {"ratios": [0.81, 0.09, 0.10]},
    "knowledge": {"rgcn_dims": [16, 24], "epochs": 40, "model_dim": 48},
    "model": {
        "factor_dim": 24, "model_dim": 48, "ffn_hidden": 96, "layers": 2,
        "heads": 4, "kv_heads": 2, "context_len": 256, "dropout": 0.1,
    },
    "train": {"batch_size": 16, "max_epochs": 3, "patience": 10, "seed": 11},
    "generate": {"n": 120, "top_p": 0.98, "temperature": 1.0, "max_tokens": 256},
    "audit": {"threshold": 7, "real_sample": 40},
    "evaluate": {"top_k": 12},
    "attack": {"k": 5, "mia_size": 50},
    "scale_study": None,
}


def _merged_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(_DESK_DEFAULTS))  # deep copy
    if path:
        user = json.loads(Path(path).read_text())
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(value)
            else:
                cfg[key] = value
    return cfg


def stage_pipeline(args) -> int:
    started = time.time()
    cfg = _merged_config(args.config)
    seed = int(cfg["seed"])
    root = Path(args.out or "pipeline-run")
    root.mkdir(parents=True, exist_ok=True)

    # 1. simulate + split
    spec = default_spec(cfg["simulate"]["n_patients"])
    corpus = simulate_corpus(spec, seed)
    corpus_dir = root / "corpus"
    corpus_dir.mkdir(exist_ok=True)
    save_corpus(corpus, corpus_dir / "full.jsonl")
    train_c, val_c, test_c = split_corpus(corpus, tuple(cfg["split"]["ratios"]), seed)
    for name, part in (("train", train_c), ("val", val_c), ("test", test_c)):
        save_corpus(part, corpus_dir / f"{name}.jsonl")
    save_spec(spec, corpus_dir / "spec.json")

    # 2. vocabulary
    vocab = build_vocab(train_c)
    save_vocab(vocab, root / "vocab.json")

    # 3. knowledge embeddings from the rule-derived toy graph
    bundle = toy_kg_from_spec(spec)
    save_kg(bundle, root / "kg")
    kcfg = cfg["knowledge"]
    know = KnowledgeConfig(
        model_dim=kcfg.get("model_dim", cfg["model"]["model_dim"]),
        rgcn=RgcnConfig(dims=tuple(kcfg["rgcn_dims"]), epochs=kcfg["epochs"]),
    )
    fused = build_fused_embeddings(vocab, bundle, know, seed=seed)
    save_fused(fused, root / "embeddings.stf")

    # 4. train
    model_cfg = _model_config(vocab.size, fused.meta, cfg["model"])
    train_cfg = TrainConfig(**{**cfg["train"], "seed": seed})
    params = init_model(model_cfg, fused, seed=seed)
    train_seqs, _ = encode_for_training(train_c, vocab, model_cfg.context_len)
    val_seqs, _ = encode_for_training(val_c, vocab, model_cfg.context_len)
    params, history = train_model(params, train_seqs, val_seqs, train_cfg, vocab.padding_id)
    train_dir = root / "train"
    train_dir.mkdir(exist_ok=True)
    save_checkpoint(params, train_dir / "model.ckpt", step=history.best_step)
    write_history_csv(history, train_dir / "history.csv")

    # 5. optional scale study
    if cfg.get("scale_study"):
        sc = cfg["scale_study"]
        points = run_scale_grid(
            train_seqs, val_seqs, vocab, fused,
            [float(b) for b in sc["budgets"]], [int(d) for d in sc["model_dims"]], seed,
        )
        _write_json(root / "scale" / "isoflop.json", _fit_report(points))

    # 6. generate
    gen_cfg = SamplerConfig(
        top_p=cfg["generate"]["top_p"], temperature=cfg["generate"]["temperature"],
        max_tokens=cfg["generate"]["max_tokens"], seed=seed,
    )
    syn_records, gen_report = generate_cohort(params, test_c, vocab, cfg["generate"]["n"], gen_cfg)
    gen_dir = root / "generate"
    gen_dir.mkdir(exist_ok=True)
    save_corpus(Corpus(records=syn_records, name="synthetic", seed=seed), gen_dir / "synthetic.jsonl")
    _write_json(gen_dir / "generation_report.json", gen_report.to_json())

    # 7. audit against the bundled stub, plus a real-vs-synthetic score contrast
    audit_dir = root / "audit"
    audit_dir.mkdir(exist_ok=True)
    with StubAuditorServer() as stub:
        aud_cfg = AuditorConfig(base_url=stub.base_url, model_name="stub-auditor",
                                backoff_base_seconds=0.01)
        kept, audit_report = audit_cohort(
            syn_records, vocab, aud_cfg, threshold=cfg["audit"]["threshold"]
        )
        n_real = min(cfg["audit"]["real_sample"], len(test_c))
        _, real_report = audit_cohort(test_c.records[:n_real], vocab, aud_cfg, threshold=cfg["audit"]["threshold"])
    save_corpus(Corpus(records=kept, name="audited", seed=seed), audit_dir / "audited.jsonl")
    comparison = {}
    if len(real_report.scores()) >= 2 and len(audit_report.scores()) >= 2:
        kept_scores = [
            r.realism_score for r in audit_report.results
            if not r.failed and r.realism_score >= cfg["audit"]["threshold"]
        ]
        comparison = {
            "effect_size_before": cohens_d(real_report.scores(), audit_report.scores()),
            "rank_sum_p_before": rank_sum_p(real_report.scores(), audit_report.scores()),
        }
        if len(kept_scores) >= 2:
            comparison["effect_size_after"] = cohens_d(real_report.scores(), kept_scores)
            comparison["rank_sum_p_after"] = rank_sum_p(real_report.scores(), kept_scores)
    _write_json(audit_dir / "audit_report.json", {**audit_report.to_json(), "comparison": comparison})

    # 8. evaluate + 9. attack
    eval_dir = root / "evaluate"
    eval_dir.mkdir(exist_ok=True)
    syn_corpus = Corpus(records=kept, name="audited", seed=seed)
    eval_source = syn_corpus if len(syn_corpus) >= 10 else Corpus(records=syn_records, name="synthetic")
    metrics, csv_blobs = _fidelity_metrics(test_c, eval_source, cfg["evaluate"]["top_k"])
    metrics["tstr"] = {}
    for task in ev.TstrTask:
        try:
            metrics["tstr"][task.value.lower()] = {
                "synthetic": ev.tstr_eval(eval_source, test_c, task, seed=seed),
                "real": ev.tstr_eval(train_c, test_c, task, seed=seed),
            }
        except ValueError as exc:
            metrics["tstr"][task.value.lower()] = {"error": str(exc)}
    _write_json(eval_dir / "metrics.json", metrics)
    for name, blob in csv_blobs.items():
        (eval_dir / name).write_text(blob, encoding="utf-8")

    attack_dir = root / "attack"
    attack_dir.mkdir(exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    size = min(cfg["attack"]["mia_size"], len(train_c), len(test_c))
    members = [train_c.records[i] for i in rng.permutation(len(train_c))[:size]]
    nonmembers = [test_c.records[i] for i in rng.permutation(len(test_c))[:size]]
    privacy: dict = {}
    syn_for_attack = eval_source.records
    if syn_for_attack:
        privacy["mia"] = vars(ev.mia_attack(members, nonmembers, syn_for_attack, seed=seed))
        if len(syn_for_attack) > cfg["attack"]["k"]:
            privacy["aia_synthetic"] = vars(ev.aia_attack(syn_for_attack, k=cfg["attack"]["k"]))
    privacy["aia_real"] = vars(ev.aia_attack(test_c.records, k=cfg["attack"]["k"]))
    _write_json(attack_dir / "privacy.json", privacy)

    outputs = {
        "corpus/full.jsonl": corpus_dir / "full.jsonl",
        "corpus/train.jsonl": corpus_dir / "train.jsonl",
        "corpus/val.jsonl": corpus_dir / "val.jsonl",
        "corpus/test.jsonl": corpus_dir / "test.jsonl",
        "vocab.json": root / "vocab.json",
        "embeddings.stf": root / "embeddings.stf",
        "train/model.ckpt": train_dir / "model.ckpt",
        "train/history.csv": train_dir / "history.csv",
        "generate/synthetic.jsonl": gen_dir / "synthetic.jsonl",
        "audit/audited.jsonl": audit_dir / "audited.jsonl",
        "evaluate/metrics.json": eval_dir / "metrics.json",
        "attack/privacy.json": attack_dir / "privacy.json",
    }
    write_manifest(root, "pipeline", seed, cfg, {}, outputs, started)
    print(f"pipeline complete -> {root}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthtraj", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate an oracle corpus")
    p.add_argument("--spec", help="simulator spec JSON (default: built-in desk spec)")
    p.add_argument("--n", type=int, help="override patient count")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=stage_simulate)

    p = sub.add_parser("build-vocab", help="build the token vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=stage_build_vocab)

    p = sub.add_parser("embed-kg", help="build frozen knowledge embeddings")
    p.add_argument("--vocab", required=True)
    p.add_argument("--kg", required=True, help="directory with edges.tsv/anchors.json/descriptions.json")
    p.add_argument("--out", required=True)
    p.add_argument("--model-dim", type=int, default=48)
    p.add_argument("--rgcn-dims", default="16,24")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=stage_embed_kg)

    p = sub.add_parser("train", help="train the sequence model")
    p.add_argument("--config", help="JSON with 'model' and 'train' sections")
    p.add_argument("--corpus-dir", required=True, help="directory with train.jsonl and val.jsonl")
    p.add_argument("--vocab", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=stage_train)

    p = sub.add_parser("scale-study", help="isoflop grid and power-law fits")
    p.add_argument("--points", help="precomputed points JSON; otherwise a grid is trained")
    p.add_argument("--corpus-dir")
    p.add_argument("--vocab")
    p.add_argument("--embeddings")
    p.add_argument("--budgets", default="2e9,4e9,8e9")
    p.add_argument("--model-dims", default="16,24,32,48")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=stage_scale_study)

    p = sub.add_parser("generate", help="generate a synthetic cohort")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--seeds", required=True, help="corpus providing demographic seeds")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--top-p", type=float, default=0.98)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-tokens", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=stage_generate)

    p = sub.add_parser("audit", help="score records through the auditor endpoint")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--threshold", type=int, default=7)
    p.add_argument("--base-url", help="auditor endpoint (default: AUDITOR_BASE_URL)")
    p.add_argument("--stub", action="store_true", help="run the bundled offline stub")
    p.set_defaults(fn=stage_audit)

    p = sub.add_parser("evaluate", help="fidelity/utility metrics real vs synthetic")
    p.add_argument("--real", required=True)
    p.add_argument("--syn", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--real-train", help="real training corpus for the baseline TSTR row")
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=int, default=150)
    p.add_argument("--max-tokens", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=stage_evaluate)

    p = sub.add_parser("attack", help="membership and attribute inference attacks")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--syn", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--mia-size", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=stage_attack)

    p = sub.add_parser("pipeline", help="run every stage end to end on the oracle corpus")
    p.add_argument("--config", help="pipeline config JSON (merged over desk defaults)")
    p.add_argument("--out", help="output root directory")
    p.set_defaults(fn=stage_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - stage boundary
        print(f"stage {args.command!r} failed: {exc}", file=sys.stderr)
        return STAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
