"""Dataset bundles, per-mode ranking models and end-to-end training/evaluation."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError, ValidationError
from .evaluation import MODES, EvalConfig, MetricsReport, run_ablation
from .features import FeatureStore, TextAttributes, load_features
from .gnn import (GnnParams, RankedList, TargetView, bipartite_square, encode_target, normalized_adjacency,
                  rank_items, subgraph_inputs, train_gnn)
from .graph import InteractionGraph, Stage, Subgraph, build_graph, full_subgraph, induce_subgraph, read_interactions, read_mask
from .llm import Gateway, LlmConfig
from .optim import TrainConfig, TrainLog
from .retrieval import RetrievalConfig, Retriever, RetrieverParams, train_retriever
from .synth import SynthConfig, generate

log = logging.getLogger(__name__)

BUNDLE_FILES = ("graph.json", "user_features.crnf", "item_features.crnf", "users.jsonl", "items.jsonl",
                "splits.json")


@dataclass
class ModelConfig:
    d: int = 128
    dim_e: int = 2
    hidden: int = 128
    bias: bool = False

    def __post_init__(self):
        if min(self.d, self.dim_e, self.hidden) < 1:
            raise ValidationError("model dimensions must be positive")


# ---- dataset bundle ------------------------------------------------------------

@dataclass
class Dataset:
    graph: InteractionGraph
    features: FeatureStore
    texts: TextAttributes
    train_edges: list[tuple[int, int]]
    test_edges: list[tuple[int, int]]

    def __post_init__(self):
        self.features.check_alignment(self.graph)
        for u, v in self.train_edges + self.test_edges:
            if (u, v) not in self.graph.masked_edges:
                raise ValidationError(f"split edge ({u}, {v}) is not masked from the adjacency")

    @classmethod
    def from_raw(cls, interactions, train_mask, test_mask, user_features, item_features,
                 user_records, item_records) -> "Dataset":
        graph = build_graph(interactions, list(train_mask) + list(test_mask))
        feats = FeatureStore(user_features, item_features)
        feats.check_alignment(graph)
        texts = TextAttributes.from_records(graph, user_records, item_records)
        pairs = lambda m: sorted({(graph.user_index(u), graph.item_index(v)) for u, v in m})
        return cls(graph, feats, texts, pairs(train_mask), pairs(test_mask))

    @classmethod
    def from_files(cls, interactions, user_features, item_features, user_texts, item_texts,
                   train_mask=None, test_mask=None, d: int | None = None) -> "Dataset":
        from .features import read_jsonl

        def mask(path, name):
            if path is None or not Path(path).exists():
                log.warning("%s file %s not found; using an empty mask", name, path)
                return []
            return read_mask(path)

        records = read_interactions(interactions)
        tr, te = mask(train_mask, "train mask"), mask(test_mask, "test mask")
        graph = build_graph(records, tr + te)
        uf = load_features(user_features, graph.n_users, d)
        vf = load_features(item_features, graph.n_items, d)
        for p in (user_texts, item_texts):
            if not Path(p).exists():
                raise MissingArtifactError(f"text file {p} not found")
        texts = TextAttributes.from_records(graph, read_jsonl(user_texts), read_jsonl(item_texts))
        pairs = lambda m: sorted({(graph.user_index(u), graph.item_index(v)) for u, v in m})
        return cls(graph, FeatureStore(uf, vf), texts, pairs(tr), pairs(te))

    @classmethod
    def from_synthetic(cls, synth) -> "Dataset":
        return cls.from_raw(synth.interactions, synth.train_mask, synth.test_mask, synth.user_features,
                            synth.item_features, synth.user_records, synth.item_records)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(self.graph.fingerprint.encode())
        for a in (self.features.user_features, self.features.item_features):
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        h.update(json.dumps([self.texts.user_profiles, self.texts.item_texts], sort_keys=True, default=str).encode())
        h.update(json.dumps([self.train_edges, self.test_edges]).encode())
        return h.hexdigest()

    def save(self, workspace) -> str:
        """Write the bundle; a no-op when the workspace already holds this fingerprint."""
        ws = Path(workspace)
        fp = self.fingerprint
        manifest = ws / "bundle.json"
        if manifest.exists() and json.loads(manifest.read_text()).get("fingerprint") == fp:
            return fp
        ws.mkdir(parents=True, exist_ok=True)
        self.graph.save(ws / "graph.json")
        self.features.save(ws / "user_features.crnf", ws / "item_features.crnf")
        self.texts.save(self.graph, ws / "users.jsonl", ws / "items.jsonl")
        (ws / "splits.json").write_text(json.dumps({"train": self.train_edges, "test": self.test_edges}))
        manifest.write_text(json.dumps({"fingerprint": fp, "users": self.graph.n_users,
                                        "items": self.graph.n_items, "d": self.features.d}, indent=2))
        return fp

    @classmethod
    def load(cls, workspace) -> "Dataset":
        ws = Path(workspace)
        missing = [f for f in BUNDLE_FILES + ("bundle.json",) if not (ws / f).exists()]
        if missing:
            raise MissingArtifactError(f"dataset bundle in {ws} is missing {', '.join(missing)}")
        graph = InteractionGraph.load(ws / "graph.json")
        feats = FeatureStore.load(ws / "user_features.crnf", ws / "item_features.crnf", graph)
        texts = TextAttributes.load(graph, ws / "users.jsonl", ws / "items.jsonl")
        splits = json.loads((ws / "splits.json").read_text())
        ds = cls(graph, feats, texts, [tuple(e) for e in splits["train"]], [tuple(e) for e in splits["test"]])
        expected = json.loads((ws / "bundle.json").read_text())["fingerprint"]
        if ds.fingerprint != expected:
            raise ValidationError(f"bundle in {ws} does not match its recorded fingerprint")
        return ds

    def train_by_user(self) -> dict[int, set[int]]:
        out = defaultdict(set)
        for u, v in self.train_edges:
            out[u].add(v)
        return out


# ---- per-mode model ------------------------------------------------------------

def fixed_hop_users(graph: InteractionGraph, target: int, hops: int) -> np.ndarray:
    buckets = graph.hop_buckets(target)
    return np.union1d(np.flatnonzero(buckets <= hops), [target])


class RecommenderModel:
    """A trained ranker plus the subgraph rule for one ablation mode.

    ``corona`` uses the two-stage retrieval, ``full_graph`` the whole graph,
    ``fixed_1hop``/``fixed_2hop`` the target plus users within that many hops.
    """

    def __init__(self, dataset: Dataset, params: GnnParams, mode: str = "corona",
                 retriever: Retriever | None = None):
        if mode not in MODES:
            raise ValidationError(f"unknown mode {mode!r}")
        if mode == "corona" and retriever is None:
            raise ValidationError("corona mode needs a retriever")
        self.dataset = dataset
        self.graph = dataset.graph
        self.features = dataset.features
        self.params = params
        self.mode = mode
        self.retriever = retriever
        self._train = dataset.train_by_user()
        self._subgraphs: dict[int, Subgraph] = {}
        self._traces: dict[int, dict] = {}
        self._views: dict[int, TargetView] = {}
        self._adj: dict[str, object] = {}

    def subgraph(self, target: int) -> Subgraph:
        target = self.graph._check_user(int(target))
        if target not in self._subgraphs:
            if self.mode == "corona":
                s1, s2 = self.retriever.retrieve(target)
                sub = s2.subgraph
                self._traces[target] = {
                    "preference_prompt": s1.prompt, "preference_response": s1.response,
                    "candidate_summary": s1.summary.rendered_text,
                    "intent_prompt": s2.prompt, "intent_response": s2.response,
                    "U1": int(s1.subgraph.users.size), "V1": int(s1.subgraph.items.size),
                    "U2": int(s2.subgraph.users.size), "V2": int(s2.subgraph.items.size),
                }
            elif self.mode == "full_graph":
                sub = full_subgraph(self.graph, target)
            else:
                hops = 1 if self.mode == "fixed_1hop" else 2
                sub = induce_subgraph(self.graph, fixed_hop_users(self.graph, target, hops), Stage.FIXED, target)
            self._subgraphs[target] = sub
        return self._subgraphs[target]

    def trace(self, target: int) -> dict:
        sub = self.subgraph(target)
        return self._traces.get(int(target), {"U2": int(sub.users.size), "V2": int(sub.items.size)})

    def exclusions(self, target: int) -> frozenset[int]:
        """Items already seen: adjacency history plus training-split items."""
        return frozenset(int(v) for v in self.graph.neighbors(target)) | frozenset(self._train.get(target, ()))

    def view(self, target: int) -> TargetView:
        target = int(target)
        if target not in self._views:
            sub = self.subgraph(target)
            adj = self._adj.get(sub.fingerprint)
            if adj is None:
                adj = normalized_adjacency(bipartite_square(sub.adjacency))
                if self.mode == "full_graph":
                    # identical for every target; keep one copy
                    self._adj[sub.fingerprint] = adj
            self._views[target] = TargetView(sub, subgraph_inputs(sub, self.features, target, adj),
                                             self.exclusions(target))
        return self._views[target]

    def views(self, users) -> dict[int, TargetView]:
        return {int(u): self.view(u) for u in users}

    def rank(self, target: int, subgraph: Subgraph | None = None) -> RankedList:
        view = self.view(target)
        if subgraph is not None and subgraph.fingerprint != view.subgraph.fingerprint:
            raise ValidationError("subgraph does not belong to this model's rule")
        return rank_items(view.subgraph, encode_target(view.inputs, self.params), self.features, view.exclude)

    def recommend(self, target: int, n: int = 20) -> RankedList:
        if n < 1:
            raise ValidationError("n must be positive")
        ranked = self.rank(target)
        if ranked.flagged_empty:
            log.warning("no candidate items for user %s", self.graph.user_ids[target])
        return ranked.top(n)


# ---- training ------------------------------------------------------------------

@dataclass
class FitConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    retriever_train: TrainConfig = field(default_factory=TrainConfig)
    gnn_train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0


def fit_retriever(dataset: Dataset, gateway: Gateway, config: FitConfig,
                  params: RetrieverParams | None = None) -> tuple[RetrieverParams, TrainLog]:
    """Train the fusion layer on the training split.

    Queries are computed once per user with the initial parameters; the
    LLM responses do not depend on them.
    """
    if gateway.config.dim != dataset.features.d:
        raise ValidationError(f"query dim {gateway.config.dim} != feature dim {dataset.features.d}")
    params = params or RetrieverParams.init(dataset.features.d, config.model.dim_e, config.seed)
    retr = Retriever(dataset.graph, dataset.features, dataset.texts, params, config.retrieval, gateway)
    users = sorted({u for u, _ in dataset.train_edges})
    queries = {u: retr.queries(u) for u in users}
    return train_retriever(dataset.train_edges, dataset.graph, dataset.features, params, queries,
                           config.retriever_train)


def fit_ranker(dataset: Dataset, mode: str, config: FitConfig, retriever: Retriever | None = None,
               params: GnnParams | None = None) -> tuple[RecommenderModel, TrainLog]:
    m = config.model
    params = params or GnnParams.init(dataset.features.d, m.hidden, dataset.features.d, config.seed, m.bias)
    model = RecommenderModel(dataset, params, mode, retriever)
    views = model.views(sorted({u for u, _ in dataset.train_edges}))
    best, tlog = train_gnn(dataset.train_edges, views, dataset.features, params, config.gnn_train)
    model.params = best
    return model, tlog


# ---- synthetic ablation --------------------------------------------------------

@dataclass
class AblationSetup:
    """Desk-scale settings for the planted-cluster ablation."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    fit: FitConfig = field(default_factory=lambda: FitConfig(
        retrieval=RetrievalConfig(k=60),
        retriever_train=TrainConfig(lr=1e-3, max_epochs=3, patience=10),
        gnn_train=TrainConfig(lr=3e-3, max_epochs=10, patience=10, eval_every=100),
    ))
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train_retriever: bool = True


def synthetic_ablation(setup: AblationSetup | None = None, modes=MODES, cache_dir=None) -> tuple[MetricsReport, dict]:
    """Train and evaluate every mode on one synthetic dataset per seed.

    Returns the report and run info (wall time, LLM stats).
    """
    setup = setup or AblationSetup()
    start = time.perf_counter()
    llm = LlmConfig(dim=setup.synth.d)
    gateway = Gateway(llm, cache_dir)
    built: dict[int, tuple] = {}

    def prepare(run):
        if run not in built:
            seed = setup.seeds[run]
            synth = generate(SynthConfig(**{**setup.synth.__dict__, "seed": seed}), llm)
            ds = Dataset.from_synthetic(synth)
            fit = FitConfig(setup.fit.retrieval, setup.fit.model,
                            TrainConfig(**{**setup.fit.retriever_train.__dict__, "seed": seed}),
                            TrainConfig(**{**setup.fit.gnn_train.__dict__, "seed": seed}), seed)
            params = RetrieverParams.init(ds.features.d, fit.model.dim_e, seed)
            if setup.train_retriever:
                params, _ = fit_retriever(ds, gateway, fit, params)
            retr = Retriever(ds.graph, ds.features, ds.texts, params, fit.retrieval, gateway)
            built.clear()
            built[run] = (ds, retr, fit)
        return built[run]

    def build(mode, run):
        ds, retr, fit = prepare(run)
        model, _ = fit_ranker(ds, mode, fit, retr)
        return model, ds.test_edges

    report = run_ablation(modes, build, setup.eval, runs=len(setup.seeds))
    info = {"seconds": time.perf_counter() - start, "seeds": list(setup.seeds), "llm": gateway.stats.as_dict()}
    report.config["synth"] = dict(setup.synth.__dict__)
    report.config["k"] = setup.fit.retrieval.k
    return report, info


# ---- checkpoints ---------------------------------------------------------------

def _versions(directory: Path, name: str) -> list[int]:
    out = []
    for p in directory.glob(f"{name}_v*.json"):
        tail = p.stem[len(name) + 2:]
        if tail.isdigit():
            out.append(int(tail))
    return sorted(out)


def next_checkpoint(directory, name: str) -> Path:
    """Prefix for a new version; existing checkpoints are never overwritten."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    found = _versions(d, name)
    return d / f"{name}_v{(found[-1] + 1 if found else 1):04d}"


def latest_checkpoint(directory, name: str) -> Path:
    d = Path(directory)
    found = _versions(d, name) if d.exists() else []
    if not found:
        raise MissingArtifactError(f"no {name} checkpoint in {d}")
    return d / f"{name}_v{found[-1]:04d}"
