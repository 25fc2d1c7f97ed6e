"""Command-line entry point: ``python -m corona <command>``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import yaml

from .config import PipelineConfig, dump_config, load_config
from .errors import CoronaError, ValidationError
from .evaluation import MODES, cold_start_slice, evaluate, run_ablation
from .gnn import GnnParams
from .llm import Gateway, ResponseCache
from .optim import TrainConfig
from .pipeline import (AblationSetup, Dataset, FitConfig, RecommenderModel, fit_ranker, fit_retriever,
                       latest_checkpoint, next_checkpoint, synthetic_ablation)
from .retrieval import Retriever, RetrieverParams
from .synth import SynthConfig, generate

log = logging.getLogger("corona")

# flag name -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "k": "retrieval.k",
    "workspace": "paths.workspace",
    "cache_dir": "paths.cache_dir",
    "checkpoint_dir": "paths.checkpoint_dir",
}


def _config(args) -> PipelineConfig:
    overrides = list(args.set or [])
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def _fit_config(cfg: PipelineConfig) -> FitConfig:
    return FitConfig(cfg.retrieval, cfg.model, cfg.retriever_train, cfg.gnn_train, cfg.seed)


def _gateway(cfg: PipelineConfig) -> Gateway:
    return Gateway(cfg.llm, cfg.paths.cache_dir)


def _report_run(cfg, start, gateway=None):
    parts = [f"seed={cfg.seed}", f"wall={time.perf_counter() - start:.2f}s"]
    if gateway is not None:
        s = gateway.stats
        parts.append(f"llm_calls={s.calls} cache_hits={s.cache_hits} est_tokens={s.est_tokens}")
    print(" ".join(parts), file=sys.stderr)


def load_model(cfg: PipelineConfig, dataset: Dataset, gateway: Gateway) -> tuple[RecommenderModel, Path]:
    ckpt = latest_checkpoint(cfg.paths.checkpoint_dir, "gnn")
    params, meta = GnnParams.load(ckpt)
    if meta.get("dataset") not in (None, dataset.fingerprint):
        raise ValidationError(f"{ckpt} was trained on a different dataset bundle")
    mode = meta.get("mode", "corona")
    retriever = None
    if mode == "corona":
        rp, _ = RetrieverParams.load(Path(cfg.paths.checkpoint_dir) / meta["retriever"])
        retriever = Retriever(dataset.graph, dataset.features, dataset.texts, rp, cfg.retrieval, gateway)
    return RecommenderModel(dataset, params, mode, retriever), ckpt


# ---- commands ------------------------------------------------------------------

def cmd_ingest(args, cfg):
    p = cfg.paths
    p.check_inputs()
    ds = Dataset.from_files(p.interactions, p.user_features, p.item_features, p.user_texts, p.item_texts,
                            p.train_mask, p.test_mask, cfg.model.d)
    manifest = Path(p.workspace) / "bundle.json"
    before = json.loads(manifest.read_text())["fingerprint"] if manifest.exists() else None
    fp = ds.save(p.workspace)
    state = "unchanged" if before == fp else "written"
    print(f"bundle {state}: {p.workspace} fingerprint={fp}")
    print(f"users={ds.graph.n_users} items={ds.graph.n_items} edges={ds.graph.n_edges} "
          f"train={len(ds.train_edges)} test={len(ds.test_edges)}")


def cmd_synth(args, cfg):
    sc = SynthConfig(users=args.users, items=args.items, clusters=args.clusters, p_in=args.p_in,
                     seed=cfg.seed, d=cfg.model.d)
    cfg.llm.dim = cfg.model.d
    data = generate(sc, cfg.llm)
    out = Path(args.out)
    paths = data.write(out)
    fit = AblationSetup().fit
    conf = {"paths": {k: p.name for k, p in paths.items()}, "seed": cfg.seed,
            "model": {"d": cfg.model.d},
            "llm": {"dim": cfg.model.d, "embed_dim_native": cfg.llm.embed_dim_native},
            "retrieval": {"k": fit.retrieval.k},
            "retriever_train": {"lr": fit.retriever_train.lr, "max_epochs": fit.retriever_train.max_epochs},
            "gnn_train": {"lr": fit.gnn_train.lr, "max_epochs": fit.gnn_train.max_epochs,
                          "eval_every": fit.gnn_train.eval_every}}
    conf["paths"].update(workspace="workspace", cache_dir="workspace/llm_cache",
                         checkpoint_dir="workspace/checkpoints")
    (out / "corona.yaml").write_text(yaml.safe_dump(conf, sort_keys=False))
    print(f"synthetic dataset written to {out} ({sc.users} users, {sc.items} items, {sc.clusters} clusters)")
    print(f"config: {out / 'corona.yaml'}")


def cmd_train_retriever(args, cfg):
    ds = Dataset.load(cfg.paths.workspace)
    gateway = _gateway(cfg)
    params, tlog = fit_retriever(ds, gateway, _fit_config(cfg))
    prefix = next_checkpoint(cfg.paths.checkpoint_dir, "retriever")
    params.save(prefix, {"dataset": ds.fingerprint, "seed": cfg.seed, "steps": tlog.steps,
                         "best_evaluation": tlog.best_evaluation, "val_metric": tlog.val_metric})
    print(f"retriever: {tlog.steps} steps, best validation loss {min(tlog.val_metric):.6f} -> {prefix.name}")
    return gateway


def cmd_train_gnn(args, cfg):
    ds = Dataset.load(cfg.paths.workspace)
    gateway = _gateway(cfg)
    retriever, meta = None, {"dataset": ds.fingerprint, "seed": cfg.seed, "mode": args.mode}
    if args.mode == "corona":
        rpath = latest_checkpoint(cfg.paths.checkpoint_dir, "retriever")
        rp, _ = RetrieverParams.load(rpath)
        retriever = Retriever(ds.graph, ds.features, ds.texts, rp, cfg.retrieval, gateway)
        meta["retriever"] = rpath.name
    model, tlog = fit_ranker(ds, args.mode, _fit_config(cfg), retriever)
    prefix = next_checkpoint(cfg.paths.checkpoint_dir, "gnn")
    model.params.save(prefix, {**meta, "steps": tlog.steps, "val_metric": tlog.val_metric})
    print(f"gnn ({args.mode}): {tlog.steps} steps, best validation Recall@{cfg.gnn_train.val_k} "
          f"{max(tlog.val_metric):.4f} -> {prefix.name}")
    return gateway


def cmd_recommend(args, cfg):
    ds = Dataset.load(cfg.paths.workspace)
    gateway = _gateway(cfg)
    model, _ = load_model(cfg, ds, gateway)
    u = ds.graph.user_index(args.user)
    ranked = model.recommend(u, args.n)
    rows = [{"rank": i + 1, "item": ds.graph.item_ids[v], "score": float(s)}
            for i, (v, s) in enumerate(zip(ranked.items, ranked.scores))]
    for r in rows:
        print(f"{r['rank']:>3}  {r['item']}  {r['score']:.6f}")
    payload = {"user": args.user, "mode": model.mode, "items": rows}
    if args.trace:
        payload["trace"] = model.trace(u)
        print(json.dumps(payload["trace"], indent=2, sort_keys=True))
    if args.json:
        Path(args.json).write_text(json.dumps(payload, indent=2, sort_keys=True))
    return gateway


def cmd_evaluate(args, cfg):
    ds = Dataset.load(cfg.paths.workspace)
    gateway = _gateway(cfg)
    model, ckpt = load_model(cfg, ds, gateway)
    items = cold_start_slice(ds.graph, cfg.eval.cold_start_threshold) if args.cold_start else None
    report = evaluate(model, ds.test_edges, cfg.eval, items)
    report.config.update(checkpoint=ckpt.name, cold_start=bool(args.cold_start))
    print(report.table())
    if args.out:
        report.save(args.out)
    return gateway


def cmd_ablate(args, cfg):
    modes = args.modes or list(cfg.eval.ablation_modes)
    if args.synthetic:
        setup = AblationSetup()
        report, info = synthetic_ablation(setup, modes, cfg.paths.cache_dir)
        print(report.table())
        print(f"llm_calls={info['llm']['calls']} cache_hits={info['llm']['cache_hits']}", file=sys.stderr)
    else:
        ds = Dataset.load(cfg.paths.workspace)
        gateway = _gateway(cfg)
        rp = None
        if "corona" in modes:
            rp, _ = RetrieverParams.load(latest_checkpoint(cfg.paths.checkpoint_dir, "retriever"))
        retriever = Retriever(ds.graph, ds.features, ds.texts, rp, cfg.retrieval, gateway) if rp else None

        def build(mode, run):
            fit = _fit_config(cfg)
            fit.seed = cfg.seed + run
            fit.gnn_train = TrainConfig(**{**cfg.gnn_train.__dict__, "seed": cfg.seed + run})
            model, _ = fit_ranker(ds, mode, fit, retriever)
            return model, ds.test_edges

        report = run_ablation(modes, build, cfg.eval)
        print(report.table())
    if args.out:
        report.save(args.out)
    return None if args.synthetic else gateway


def cmd_cache(args, cfg):
    cache = ResponseCache(cfg.paths.cache_dir)
    if args.action == "clear":
        print(f"removed {cache.clear()} cache entries from {cfg.paths.cache_dir}")
    else:
        entries = cache.entries()
        size = sum(p.stat().st_size for p in entries)
        print(f"{len(entries)} entries, {size} bytes in {cfg.paths.cache_dir}")


def cmd_config(args, cfg):
    print(dump_config(cfg), end="")


# ---- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, help="stage-1 retrieval size")
    common.add_argument("--workspace")
    common.add_argument("--cache-dir")
    common.add_argument("--checkpoint-dir")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="corona", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", parents=[common], help="validate raw files into a dataset bundle")
    p = sub.add_parser("synth", parents=[common], help="generate the planted-cluster dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=300)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--p-in", type=float, default=0.9)
    sub.add_parser("train-retriever", parents=[common], help="train the distance-encoded fusion layer")
    p = sub.add_parser("train-gnn", parents=[common], help="train the GCN ranker")
    p.add_argument("--mode", choices=MODES, default="corona")
    p = sub.add_parser("recommend", parents=[common], help="top-n items for one user")
    p.add_argument("--user", required=True)
    p.add_argument("-n", type=int, default=20)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--json", help="write the result as JSON to this path")
    p = sub.add_parser("evaluate", parents=[common], help="Recall/NDCG on the test split")
    p.add_argument("--cold-start", action="store_true")
    p.add_argument("--out")
    p = sub.add_parser("ablate", parents=[common], help="compare subgraph rules")
    p.add_argument("--modes", nargs="+", choices=MODES)
    p.add_argument("--synthetic", action="store_true", help="run the built-in 5-seed planted-cluster ablation")
    p.add_argument("--out")
    p = sub.add_parser("cache", parents=[common], help="inspect or clear the LLM response cache")
    p.add_argument("action", choices=("inspect", "clear"))
    sub.add_parser("config", parents=[common], help="print the resolved configuration")
    return parser


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "train-retriever": cmd_train_retriever,
    "train-gnn": cmd_train_gnn, "recommend": cmd_recommend, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "cache": cmd_cache, "config": cmd_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        cfg = _config(args)
        gateway = COMMANDS[args.command](args, cfg)
    except CoronaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command not in ("cache", "config"):
        _report_run(cfg, start, gateway)
    return 0


if __name__ == "__main__":
    sys.exit(main())
