"""All-ranking evaluation, cold-start slice and retrieval ablations.

Ranking happens inside each model's retrieved candidate set; ground-truth
items outside it can never be ranked and therefore count as misses.
"""
from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .errors import ValidationError
from .graph import InteractionGraph, Subgraph
from .metrics import ndcg_at_k, recall_at_k

log = logging.getLogger(__name__)

MODES = ("corona", "full_graph", "fixed_1hop", "fixed_2hop")
RANKING_SCOPE = "within retrieved candidate set; ground truth outside it counts as a miss"


@dataclass
class EvalConfig:
    cutoffs: tuple[int, ...] = (10, 20, 50)
    runs: int = 5
    cold_start_threshold: int = 2
    ablation_modes: tuple[str, ...] = MODES

    def __post_init__(self):
        self.cutoffs = tuple(int(k) for k in self.cutoffs)
        self.ablation_modes = tuple(self.ablation_modes)
        if not self.cutoffs or any(k < 1 for k in self.cutoffs) or list(self.cutoffs) != sorted(set(self.cutoffs)):
            raise ValidationError("cutoffs must be positive and strictly ascending")
        if self.runs < 1:
            raise ValidationError("runs must be >= 1")
        bad = set(self.ablation_modes) - set(MODES)
        if bad:
            raise ValidationError(f"unknown ablation mode(s): {sorted(bad)}")


class RankingModel(Protocol):
    graph: InteractionGraph
    mode: str

    def subgraph(self, target: int) -> Subgraph: ...

    def rank(self, target: int, subgraph: Subgraph): ...


@dataclass
class RunMetrics:
    recall: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    mean_candidates: float
    seconds: float = 0.0


@dataclass
class ModeResult:
    mode: str
    K: int
    recall_mean: float
    ndcg_mean: float
    runs: list[dict] = field(default_factory=list)


@dataclass
class MetricsReport:
    modes: list[ModeResult]
    config: dict
    fingerprints: list[str]
    candidate_sizes: dict[str, float] = field(default_factory=dict)
    ranking_scope: str = RANKING_SCOPE

    def mean(self, mode: str, K: int, metric: str = "recall") -> float:
        for r in self.modes:
            if r.mode == mode and r.K == K:
                return r.recall_mean if metric == "recall" else r.ndcg_mean
        raise KeyError((mode, K))

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "modes": [asdict(m) for m in self.modes],
            "fingerprints": self.fingerprints,
            "candidate_sizes": self.candidate_sizes,
            "ranking_scope": self.ranking_scope,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def table(self) -> str:
        modes = list(dict.fromkeys(m.mode for m in self.modes))
        ks = sorted({m.K for m in self.modes})
        head = ["mode"] + [f"{name}@{k}" for k in ks for name in ("R", "N")] + ["|cand|"]
        rows = []
        for mode in modes:
            row = [mode]
            for k in ks:
                row += [f"{self.mean(mode, k, 'recall'):.4f}", f"{self.mean(mode, k, 'ndcg'):.4f}"]
            row.append(f"{self.candidate_sizes.get(mode, float('nan')):.1f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def cold_start_slice(graph: InteractionGraph, threshold: float = 2) -> set[int]:
    """Items with at most ``threshold`` interactions, adjacency and masked edges together."""
    counts = graph.interaction_counts()
    return {int(v) for v in np.flatnonzero(counts <= threshold)}


def _group(test_edges, graph: InteractionGraph, items: set[int] | None):
    truth: dict[int, set[int]] = defaultdict(set)
    for u, v in test_edges:
        u, v = int(u), int(v)
        if (u, v) not in graph.masked_edges:
            raise ValidationError(f"test edge ({graph.user_ids[u]}, {graph.item_ids[v]}) is not masked from the adjacency")
        if items is None or v in items:
            truth[u].add(v)
    return truth


def evaluate_run(model: RankingModel, test_edges, cutoffs: Sequence[int], items: set[int] | None = None) -> RunMetrics:
    """Mean Recall/NDCG over users with at least one (eligible) test item."""
    start = time.perf_counter()
    truth = _group(test_edges, model.graph, items)
    rec = {k: [] for k in cutoffs}
    ndcg = {k: [] for k in cutoffs}
    sizes = []
    for u in sorted(truth):
        sub = model.subgraph(u)
        ranked = model.rank(u, sub)
        sizes.append(len(ranked))
        for k in cutoffs:
            rec[k].append(recall_at_k(ranked, truth[u], k))
            ndcg[k].append(ndcg_at_k(ranked, truth[u], k))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    return RunMetrics({k: mean(rec[k]) for k in cutoffs}, {k: mean(ndcg[k]) for k in cutoffs},
                      len(truth), mean(sizes), time.perf_counter() - start)


def _report(per_mode: dict[str, list[RunMetrics]], cutoffs, config: dict, fingerprints) -> MetricsReport:
    results, sizes = [], {}
    for mode, runs in per_mode.items():
        sizes[mode] = float(np.mean([r.mean_candidates for r in runs]))
        for k in cutoffs:
            raw = [{"recall": r.recall[k], "ndcg": r.ndcg[k], "n_users": r.n_users,
                    "mean_candidates": r.mean_candidates} for r in runs]
            results.append(ModeResult(mode, k, float(np.mean([x["recall"] for x in raw])),
                                      float(np.mean([x["ndcg"] for x in raw])), raw))
    return MetricsReport(results, config, sorted(set(fingerprints)), sizes)


def evaluate(models, test_edges, config: EvalConfig, items: set[int] | None = None) -> MetricsReport:
    """Evaluate one model or one model per run (same test edges for every run).

    ``models`` may also be a list of (model, test_edges) pairs when runs use
    different data.
    """
    if not isinstance(models, (list, tuple)):
        models = [models]
    if not models:
        raise ValidationError("nothing to evaluate")
    per_mode: dict[str, list[RunMetrics]] = defaultdict(list)
    prints = []
    for entry in models:
        model, edges = entry if isinstance(entry, tuple) else (entry, test_edges)
        per_mode[model.mode].append(evaluate_run(model, edges, config.cutoffs, items))
        prints.append(model.graph.fingerprint)
    return _report(per_mode, config.cutoffs, asdict(config), prints)


def run_ablation(modes: Iterable[str], build: Callable[[str, int], tuple], config: EvalConfig,
                 runs: int | None = None, cold_items: Callable[[InteractionGraph], set[int]] | None = None
                 ) -> MetricsReport:
    """Evaluate each mode over ``runs`` runs.

    ``build(mode, run)`` returns ``(model, test_edges)``; the model's ranker is
    identical across modes, only the subgraph rule changes.
    """
    modes = list(modes)
    if not modes:
        raise ValidationError("no ablation modes given")
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ValidationError(f"unknown ablation mode(s): {bad}")
    runs = config.runs if runs is None else runs
    per_mode: dict[str, list[RunMetrics]] = {m: [] for m in modes}
    prints = []
    for run in range(runs):
        for mode in modes:
            model, edges = build(mode, run)
            items = cold_items(model.graph) if cold_items else None
            per_mode[mode].append(evaluate_run(model, edges, config.cutoffs, items))
            prints.append(model.graph.fingerprint)
            log.info("run %d mode %s: R@%d=%.4f", run, mode, config.cutoffs[0],
                     per_mode[mode][-1].recall[config.cutoffs[0]])
    cfg = asdict(config)
    cfg["runs"] = runs
    return _report(per_mode, config.cutoffs, cfg, prints)


def binomial_recall_sigma(k: int, n_candidates: int, n_users: int) -> tuple[float, float]:
    """Mean and standard error of Recall@k for one random hit among ``n_candidates``."""
    p = min(k / n_candidates, 1.0)
    return p, math.sqrt(p * (1 - p) / max(n_users, 1))
