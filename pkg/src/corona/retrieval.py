"""Distance-encoded user embeddings, two-stage cosine retrieval and retriever training."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError, ValidationError
from .features import FeatureStore, TextAttributes, load_tensors, save_tensors
from .graph import InteractionGraph, Stage, Subgraph, induce_subgraph
from .llm import CandidateSummary, Gateway, QueryEmbedding, intent_prompt, preference_prompt, summarize
from .optim import Adam, EarlyStopping, TrainConfig, TrainLog, split_samples

log = logging.getLogger(__name__)


@dataclass
class RetrieverParams:
    """Fusion layer ``X = concat(F, e[bucket]) @ weight + bias``.

    ``encodings`` holds e1, e2, e3 as rows; ``weight`` is (d + dim_e) x d.
    """

    encodings: np.ndarray
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.encodings = np.asarray(self.encodings, dtype=np.float64).reshape(3, -1)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d = self.bias.shape[0]
        if self.weight.shape != (d + self.dim_e, d):
            raise ShapeError(f"fusion weight {self.weight.shape} does not fit d={d}, dim_e={self.dim_e}")
        if not all(np.isfinite(a).all() for a in (self.encodings, self.weight, self.bias)):
            raise ValidationError("retriever parameters must be finite")

    @property
    def d(self) -> int:
        return self.bias.shape[0]

    @property
    def dim_e(self) -> int:
        return self.encodings.shape[1]

    @classmethod
    def init(cls, d: int = 128, dim_e: int = 2, seed: int = 0) -> "RetrieverParams":
        # identity on the feature block: the untrained retriever ranks by raw feature cosine
        rng = np.random.default_rng(seed)
        weight = np.zeros((d + dim_e, d))
        weight[:d] = np.eye(d)
        return cls(rng.standard_normal((3, dim_e)), weight, np.zeros(d))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"encodings": self.encodings, "weight": self.weight, "bias": self.bias}

    def copy(self) -> "RetrieverParams":
        return RetrieverParams(self.encodings.copy(), self.weight.copy(), self.bias.copy())

    def save(self, prefix, meta=None):
        return save_tensors(prefix, self.as_dict(), {"kind": "retriever", **(meta or {})})

    @classmethod
    def load(cls, prefix) -> tuple["RetrieverParams", dict]:
        tensors, manifest = load_tensors(prefix)
        return cls(tensors["encodings"], tensors["weight"], tensors["bias"]), manifest


@dataclass
class RetrievalConfig:
    k: int = 3000

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError("k must be at least 2")


def fusion_inputs(user_features: np.ndarray, buckets: np.ndarray, encodings: np.ndarray) -> np.ndarray:
    buckets = np.asarray(buckets)
    if buckets.shape != (user_features.shape[0],):
        raise ShapeError(f"{buckets.shape[0]} buckets for {user_features.shape[0]} users")
    return np.hstack([user_features, encodings[buckets.astype(np.int64) - 1]])


def encode_users(user_features: np.ndarray, buckets: np.ndarray, params: RetrieverParams) -> np.ndarray:
    """Rows for every user; the target row should carry bucket 3."""
    F = np.asarray(user_features, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] + params.dim_e != params.weight.shape[0]:
        raise ShapeError(f"features {F.shape} do not match fusion weight {params.weight.shape}")
    return fusion_inputs(F, buckets, params.encodings) @ params.weight + params.bias


def cosine_scores(query: np.ndarray, X: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Cosine of ``query`` against ``X[rows]``; zero-norm rows score -inf."""
    sub = X[rows]
    norms = np.linalg.norm(sub, axis=1)
    dots = sub @ query
    out = np.full(rows.shape[0], -np.inf)
    ok = norms > 0
    out[ok] = dots[ok] / (norms[ok] * np.linalg.norm(query))
    return out


def top_k_users(query, X: np.ndarray, candidates, k: int, target: int) -> np.ndarray:
    """The ``k`` candidates most cosine-similar to ``query``, plus ``target``.

    Ties go to the smaller user id. Returns ascending ids.
    """
    q = query.vector if isinstance(query, QueryEmbedding) else np.asarray(query, dtype=np.float64)
    if not np.isfinite(q).all() or np.linalg.norm(q) == 0.0:
        raise ValidationError("query embedding has zero norm")
    if k < 1:
        raise ValidationError("k must be positive")
    rows = np.unique(np.fromiter((int(c) for c in candidates), dtype=np.int64))
    if np.any(rows == int(target)):
        raise ValidationError("target must not be among the candidates")
    if rows.size <= k:
        chosen = rows
    else:
        cos = cosine_scores(q, X, rows)
        kth = np.partition(cos, rows.size - k)[rows.size - k]
        above = cos > kth
        need = k - int(above.sum())
        chosen = np.concatenate([rows[above], rows[cos == kth][:need]])
    return np.union1d(chosen, [int(target)])


# ---- staged retrieval ----------------------------------------------------------

@dataclass
class Stage1Result:
    subgraph: Subgraph
    summary: CandidateSummary
    query: QueryEmbedding
    X: np.ndarray
    prompt: str
    response: str


@dataclass
class Stage2Result:
    subgraph: Subgraph
    query: QueryEmbedding
    prompt: str
    response: str


def stage1_retrieve(graph: InteractionGraph, features: FeatureStore, texts: TextAttributes,
                    params: RetrieverParams, config: RetrievalConfig, gateway: Gateway, target: int) -> Stage1Result:
    """Preference reasoning -> query -> top-k users -> induced subgraph -> summary."""
    target = graph._check_user(target)
    prompt = preference_prompt(texts.profile(target), noun=gateway.config.noun)
    response = gateway.complete(prompt)
    query = gateway.encode_text(response, Stage.PREFERENCE, source=prompt)
    X = encode_users(features.user_features, graph.hop_buckets(target), params)
    pool = np.delete(np.arange(graph.n_users), target)
    users = top_k_users(query, X, pool, config.k, target)
    sub = induce_subgraph(graph, users, Stage.PREFERENCE, target)
    if sub.degenerate:
        log.warning("stage-1 subgraph for user %s has no items", graph.user_ids[target])
    summary = summarize(texts.item_text(sub.items))
    return Stage1Result(sub, summary, query, X, prompt, response)


def stage2_retrieve(stage1: Stage1Result, graph: InteractionGraph, texts: TextAttributes,
                    config: RetrievalConfig, gateway: Gateway, target: int,
                    history: list[int] | None = None) -> Stage2Result:
    """Intent reasoning over the target's history, narrowing stage 1 to k/2 users.

    ``history`` defaults to the target's adjacency items in time order.
    """
    target = graph._check_user(target)
    if history is None:
        history = [v for v, _ in graph.history(target, include_masked=False)]
    records = texts.history_texts(history)
    prompt = intent_prompt(stage1.summary, records, noun=gateway.config.noun, verb=gateway.config.verb,
                           empty_history=not records)
    response = gateway.complete(prompt)
    query = gateway.encode_text(response, Stage.INTENT, source=prompt)
    pool = stage1.subgraph.users[stage1.subgraph.users != target]
    users = top_k_users(query, stage1.X, pool, max(config.k // 2, 1), target)
    sub = induce_subgraph(graph, users, Stage.INTENT, target)
    return Stage2Result(sub, query, prompt, response)


class Retriever:
    """Frozen-parameter two-stage retrieval bound to one dataset."""

    def __init__(self, graph, features, texts, params: RetrieverParams, config: RetrievalConfig, gateway: Gateway):
        self.graph = graph
        self.features = features
        self.texts = texts
        self.params = params
        self.config = config
        self.gateway = gateway

    def stage1(self, target: int) -> Stage1Result:
        return stage1_retrieve(self.graph, self.features, self.texts, self.params, self.config, self.gateway, target)

    def stage2(self, target: int, stage1: Stage1Result) -> Stage2Result:
        return stage2_retrieve(stage1, self.graph, self.texts, self.config, self.gateway, target)

    def retrieve(self, target: int) -> tuple[Stage1Result, Stage2Result]:
        s1 = self.stage1(target)
        return s1, self.stage2(target, s1)

    def queries(self, target: int) -> tuple[np.ndarray, np.ndarray]:
        s1, s2 = self.retrieve(target)
        return s1.query.vector, s2.query.vector


# ---- retriever loss ------------------------------------------------------------

def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def retriever_loss(q1, q2, X: np.ndarray, true_users, log_variant: bool = False) -> float:
    """Negative summed softmax probability of the true users under both queries.

    The softmax runs over every row of ``X``. With ``log_variant`` the
    probabilities are replaced by log-probabilities.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValidationError("user universe is empty")
    idx = np.unique(np.fromiter((int(u) for u in true_users), dtype=np.int64))
    if idx.size == 0:
        return 0.0
    total = 0.0
    for q in (q1, q2):
        p = _softmax(X @ np.asarray(q, dtype=np.float64))
        total += np.log(p[idx]).sum() if log_variant else p[idx].sum()
    return -float(total)


def retriever_loss_and_grads(params: RetrieverParams, user_features: np.ndarray, buckets: np.ndarray,
                             q1, q2, true_users, log_variant: bool = False):
    """Loss plus analytic gradients w.r.t. encodings, weight and bias."""
    Z = fusion_inputs(np.asarray(user_features, dtype=np.float64), buckets, params.encodings)
    X = Z @ params.weight + params.bias
    n = X.shape[0]
    if n == 0:
        raise ValidationError("user universe is empty")
    idx = np.unique(np.fromiter((int(u) for u in true_users), dtype=np.int64))
    member = np.zeros(n)
    member[idx] = 1.0
    loss = 0.0
    dX = np.zeros_like(X)
    if idx.size:
        for q in (q1, q2):
            q = np.asarray(q, dtype=np.float64)
            p = _softmax(X @ q)
            if log_variant:
                loss -= np.log(p[idx]).sum()
                g = idx.size * p - member
            else:
                s = p[idx].sum()
                loss -= s
                g = p * (s - member)
            dX += np.outer(g, q)
    d = params.d
    dZ_e = dX @ params.weight[d:].T
    d_enc = np.zeros_like(params.encodings)
    b = np.asarray(buckets, dtype=np.int64)
    for j in range(3):
        d_enc[j] = dZ_e[b == j + 1].sum(axis=0)
    grads = {"encodings": d_enc, "weight": Z.T @ dX, "bias": dX.sum(axis=0)}
    return float(loss), grads


# ---- training ------------------------------------------------------------------

def train_retriever(samples, graph: InteractionGraph, features: FeatureStore, params: RetrieverParams,
                    queries: dict[int, tuple[np.ndarray, np.ndarray]], config: TrainConfig,
                    val_samples=None) -> tuple[RetrieverParams, TrainLog]:
    """Adam on the retriever loss, one (target, ground-truth item) sample per step.

    ``queries`` maps each target user to its frozen (preference, intent)
    query vectors. Returns the parameters with the best validation loss.
    """
    if val_samples is None:
        train, val = split_samples(samples, config.val_fraction, config.seed)
    else:
        train, val = list(samples), list(val_samples)
    if not train:
        raise ValidationError("no training samples")
    val = val or train
    work = params.copy()
    tensors = work.as_dict()
    opt = Adam(config.lr)
    stopper = EarlyStopping(config.patience, "min")
    rng = np.random.default_rng(config.seed + 1)
    F = features.user_features
    log_ = TrainLog()
    eval_every = config.eval_every or len(train)

    def loss_on(u, v, p):
        q1, q2 = queries[u]
        X = encode_users(F, graph.hop_buckets(u), p)
        return retriever_loss(q1, q2, X, graph.item_neighbors(v), config.log_variant)

    def validate():
        return float(np.mean([loss_on(u, v, work) for u, v in val]))

    best = work.copy()
    value = validate()
    stopper.update(value)
    log_.val_metric.append(value)
    done = False
    for _ in range(config.max_epochs):
        for i in rng.permutation(len(train)):
            u, v = train[i]
            q1, q2 = queries[u]
            loss, grads = retriever_loss_and_grads(work, F, graph.hop_buckets(u), q1, q2,
                                                   graph.item_neighbors(v), config.log_variant)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceError(f"non-finite retriever loss at step {log_.steps} (user {u}, item {v})")
            opt.step(tensors, grads)
            log_.train_loss.append(loss)
            log_.steps += 1
            if log_.steps % eval_every == 0:
                value = validate()
                stop = stopper.update(value)
                log_.val_metric.append(value)
                if stopper.improved:
                    best = work.copy()
                if stop:
                    log_.stopped_early = True
                    done = True
            if done or (config.max_steps and log_.steps >= config.max_steps):
                done = True
                break
        if done:
            break
    log_.best_evaluation = stopper.best_step
    return best, log_
