"""Planted-cluster synthetic dataset.

Users and items belong to one of ``clusters`` groups. Each cluster owns a main
genre word; a user interacts with in-cluster items with probability ``p_in``.
Feature vectors sit around the mock encoding of the cluster's genre word, so an
aligned mock LLM (one that echoes profile and history values) produces queries
that point at the right cluster. Profiles name the correct favourite genre with
probability ``profile_fidelity``.

Per user, the latest interaction is a test sample and the ``train_per_user``
before it are training samples; both are masked out of the adjacency.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .features import FeatureStore, TextAttributes, save_features, write_jsonl
from .graph import build_graph, write_interactions, write_mask
from .llm import Gateway, LlmConfig

GENRES = ("noir", "western", "anime", "musical", "documentary", "horror", "romance", "scifi",
          "comedy", "war", "thriller", "fantasy")
CATEGORIES = ("feature", "short", "series", "independent", "classic")
COUNTRIES = ("US", "France", "Japan", "Brazil", "India", "Germany", "Nigeria", "Canada")
OCCUPATIONS = ("student", "engineer", "teacher", "artist", "nurse", "farmer", "lawyer", "retired")


@dataclass
class SynthConfig:
    users: int = 300
    items: int = 500
    clusters: int = 5
    p_in: float = 0.9
    seed: int = 0
    min_interactions: int = 10
    max_interactions: int = 30
    train_per_user: int = 2
    profile_fidelity: float = 0.9
    secondary_genre_rate: float = 0.3
    popularity: float = 1.0  # Zipf exponent of item popularity inside a cluster; 0 = uniform
    user_noise: float = 0.5
    item_noise: float = 5.0
    d: int = 128
    start_year: int = 1940


@dataclass
class SyntheticDataset:
    config: SynthConfig
    interactions: list[tuple[str, str, int]]
    train_mask: list[tuple[str, str]]
    test_mask: list[tuple[str, str]]
    user_records: list[dict]
    item_records: list[dict]
    user_features: np.ndarray  # rows in graph (first-seen) order
    item_features: np.ndarray
    user_cluster: dict[str, int] = field(default_factory=dict)
    item_cluster: dict[str, int] = field(default_factory=dict)

    def build(self):
        """(graph, features, texts) with masks applied."""
        graph = build_graph(self.interactions, self.train_mask + self.test_mask)
        feats = FeatureStore(self.user_features, self.item_features)
        texts = TextAttributes.from_records(graph, self.user_records, self.item_records)
        return graph, feats, texts

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "interactions": out / "interactions.tsv",
            "train_mask": out / "train_mask.tsv",
            "test_mask": out / "test_mask.tsv",
            "user_features": out / "user_features.crnf",
            "item_features": out / "item_features.crnf",
            "user_texts": out / "users.jsonl",
            "item_texts": out / "items.jsonl",
        }
        write_interactions(paths["interactions"], self.interactions)
        write_mask(paths["train_mask"], self.train_mask)
        write_mask(paths["test_mask"], self.test_mask)
        save_features(paths["user_features"], self.user_features)
        save_features(paths["item_features"], self.item_features)
        write_jsonl(paths["user_texts"], self.user_records)
        write_jsonl(paths["item_texts"], self.item_records)
        write_jsonl(out / "clusters.jsonl", (
            [{"id": k, "kind": "user", "cluster": c} for k, c in self.user_cluster.items()]
            + [{"id": k, "kind": "item", "cluster": c} for k, c in self.item_cluster.items()]))
        return paths


def genre_names(n: int) -> list[str]:
    return [GENRES[i] if i < len(GENRES) else f"genre{i}" for i in range(n)]


def generate(config: SynthConfig | None = None, llm: LlmConfig | None = None) -> SyntheticDataset:
    cfg = config or SynthConfig()
    llm = llm or LlmConfig(dim=cfg.d)
    if llm.dim != cfg.d:
        raise ValueError("LLM projection dim must match feature dim")
    rng = np.random.default_rng(cfg.seed)
    genres = genre_names(cfg.clusters)
    all_genres = genre_names(max(cfg.clusters, len(GENRES)))

    user_cluster = rng.permutation(np.arange(cfg.users) % cfg.clusters)
    item_cluster = rng.permutation(np.arange(cfg.items) % cfg.clusters)
    by_cluster = [np.flatnonzero(item_cluster == c) for c in range(cfg.clusters)]
    weights = []
    for pool in by_cluster:
        w = 1.0 / (1.0 + rng.permutation(pool.size)) ** cfg.popularity
        weights.append(w / w.sum())

    uid = [f"u{u:04d}" for u in range(cfg.users)]
    vid = [f"i{v:04d}" for v in range(cfg.items)]

    item_records = []
    for v in range(cfg.items):
        c = int(item_cluster[v])
        genre = [genres[c]]
        if rng.random() < cfg.secondary_genre_rate:
            other = all_genres[rng.integers(len(all_genres))]
            if other != genres[c]:
                genre.append(other)
        if rng.random() < 0.8:
            year = cfg.start_year + 10 * c + int(rng.integers(10))
        else:
            year = int(rng.integers(cfg.start_year, 2020))
        item_records.append({"id": vid[v], "title": f"t{v:04d}", "year": year, "genre": genre,
                             "category": CATEGORIES[rng.integers(len(CATEGORIES))]})

    user_records = []
    for u in range(cfg.users):
        c = int(user_cluster[u])
        fav = genres[c] if rng.random() < cfg.profile_fidelity else all_genres[rng.integers(len(all_genres))]
        user_records.append({
            "id": uid[u], "Age": int(rng.integers(18, 71)),
            "Gender": ["Female", "Male"][rng.integers(2)],
            "Country": COUNTRIES[rng.integers(len(COUNTRIES))],
            "Occupation": OCCUPATIONS[rng.integers(len(OCCUPATIONS))],
            "Favorite genre": fav,
        })

    histories = []
    for u in range(cfg.users):
        n = int(rng.integers(cfg.min_interactions, cfg.max_interactions + 1))
        chosen: set[int] = set()
        while len(chosen) < n:
            if rng.random() < cfg.p_in:
                c = int(user_cluster[u])
            else:
                others = [c for c in range(cfg.clusters) if c != user_cluster[u]] or [user_cluster[u]]
                c = others[rng.integers(len(others))]
            chosen.add(int(rng.choice(by_cluster[c], p=weights[c])))
        histories.append(list(chosen))
    # every item gets at least one interaction so the item universe is fixed
    seen = {v for h in histories for v in h}
    for v in range(cfg.items):
        if v not in seen:
            members = np.flatnonzero(user_cluster == item_cluster[v])
            histories[int(members[rng.integers(members.size)])].append(v)

    interactions, train_mask, test_mask = [], [], []
    for u, items in enumerate(histories):
        order = rng.permutation(len(items))
        stamps = np.sort(rng.choice(10_000_000, size=len(items), replace=False)) + 1_000_000_000
        seq = [items[i] for i in order]
        for v, t in zip(seq, stamps):
            interactions.append((uid[u], vid[v], int(t)))
        test_mask.append((uid[u], vid[seq[-1]]))
        for v in seq[-1 - cfg.train_per_user:-1]:
            train_mask.append((uid[u], vid[v]))
    # interleave users in time so the file is a plausible event log
    interactions.sort(key=lambda r: (r[2], r[0], r[1]))

    gateway = Gateway(llm)
    centroids = np.stack([gateway.encode_text(g).vector for g in genres])

    def noisy(c, scale):
        x = centroids[c] + scale * rng.standard_normal(cfg.d) / np.sqrt(cfg.d)
        return x / np.linalg.norm(x)

    U = np.stack([noisy(user_cluster[u], cfg.user_noise) for u in range(cfg.users)])
    V = np.stack([noisy(item_cluster[v], cfg.item_noise) for v in range(cfg.items)])

    graph = build_graph(interactions, train_mask + test_mask)
    urow = [int(x[1:]) for x in graph.user_ids]
    vrow = [int(x[1:]) for x in graph.item_ids]
    return SyntheticDataset(
        cfg, interactions, train_mask, test_mask, user_records, item_records,
        U[urow].astype(np.float32), V[vrow].astype(np.float32),
        {uid[u]: int(user_cluster[u]) for u in range(cfg.users)},
        {vid[v]: int(item_cluster[v]) for v in range(cfg.items)},
    )


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
