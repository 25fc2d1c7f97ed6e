"""Two-layer GCN target encoder, inner-product scoring and BPR training.

Only the target's row of the second layer is needed, so propagation is
restricted to its receptive field: the first hop ``N1`` (target plus its items,
with normalized weights ``a``) and the aggregated inputs ``R = Â[N1] @ H0``.
Both depend on the subgraph and features only, never on parameters, which
makes them cacheable per target across training steps.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import DivergenceError, SamplingError, ShapeError, ValidationError
from .features import FeatureStore, load_tensors, save_tensors
from .graph import Subgraph
from .metrics import recall_at_k
from .optim import Adam, EarlyStopping, TrainConfig, TrainLog, split_samples

log = logging.getLogger(__name__)


@dataclass
class GnnParams:
    W1: np.ndarray
    W2: np.ndarray
    b1: np.ndarray | None = None
    b2: np.ndarray | None = None

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.W1.shape[1] != self.W2.shape[0]:
            raise ShapeError(f"incompatible layer shapes {self.W1.shape}, {self.W2.shape}")
        if self.b1 is not None:
            self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(self.W1.shape[1])
            self.b2 = np.asarray(self.b2, dtype=np.float64).reshape(self.W2.shape[1])
        if not all(np.isfinite(a).all() for a in self.as_dict().values()):
            raise ValidationError("GNN parameters must be finite")

    @classmethod
    def init(cls, d: int = 128, hidden: int = 128, d_out: int | None = None, seed: int = 0,
             bias: bool = False) -> "GnnParams":
        """Glorot-uniform weights from a seeded generator; zero biases."""
        d_out = d if d_out is None else d_out
        rng = np.random.default_rng(seed)

        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        W1, W2 = glorot(d, hidden), glorot(hidden, d_out)
        if bias:
            return cls(W1, W2, np.zeros(hidden), np.zeros(d_out))
        return cls(W1, W2)

    @property
    def has_bias(self) -> bool:
        return self.b1 is not None

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {"W1": self.W1, "W2": self.W2}
        if self.b1 is not None:
            out["b1"], out["b2"] = self.b1, self.b2
        return out

    def copy(self) -> "GnnParams":
        return GnnParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def save(self, prefix, meta=None):
        return save_tensors(prefix, self.as_dict(), {"kind": "gnn", **(meta or {})})

    @classmethod
    def load(cls, prefix) -> tuple["GnnParams", dict]:
        tensors, manifest = load_tensors(prefix)
        return cls(**tensors), manifest


@dataclass
class RankedList:
    items: np.ndarray
    scores: np.ndarray
    target: int
    source: str = ""
    flagged_empty: bool = False

    def __len__(self):
        return int(self.items.size)

    def top(self, n: int) -> "RankedList":
        return RankedList(self.items[:n], self.scores[:n], self.target, self.source, self.flagged_empty)


# ---- propagation ---------------------------------------------------------------

def normalized_adjacency(adjacency) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` for a square symmetric 0/1 adjacency."""
    A = sp.csr_matrix(adjacency, dtype=np.float64)
    A = A + sp.identity(A.shape[0], format="csr")
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(deg)
    out = sp.diags(inv) @ A @ sp.diags(inv)
    out = out.tocsr()
    out.sort_indices()
    return out


def bipartite_square(block: sp.csr_matrix) -> sp.csr_matrix:
    """Square adjacency over users then items."""
    nu, ni = block.shape
    if nu == 0 or ni == 0:
        return sp.csr_matrix((nu + ni, nu + ni))
    return sp.bmat([[None, block], [block.T, None]], format="csr", dtype=np.float64)


@dataclass
class TargetInputs:
    """Parameter-free propagation inputs for one target: weights ``a`` over N1 and ``R``."""

    a: np.ndarray
    R: np.ndarray


def propagation_inputs(adj_norm: sp.csr_matrix, node_rows, t: int) -> TargetInputs:
    """``node_rows(cols)`` returns the input features for node indices ``cols``."""
    row = adj_norm[t]
    n1 = row.indices
    block = adj_norm[n1]
    cols = np.unique(block.indices)
    R = block[:, cols] @ node_rows(cols)
    return TargetInputs(row.data.copy(), np.asarray(R))


def subgraph_inputs(subgraph: Subgraph, features: FeatureStore, target: int, adj_norm=None) -> TargetInputs:
    pos = np.searchsorted(subgraph.users, target)
    if pos >= subgraph.users.size or subgraph.users[pos] != target:
        raise ValidationError(f"target {target} is not in the subgraph")
    if adj_norm is None:
        adj_norm = normalized_adjacency(bipartite_square(subgraph.adjacency))
    n_u = subgraph.users.size
    F, M = features.user_features, features.item_features

    def node_rows(cols):
        is_user = cols < n_u
        out = np.empty((cols.size, F.shape[1]))
        out[is_user] = F[subgraph.users[cols[is_user]]]
        out[~is_user] = M[subgraph.items[cols[~is_user] - n_u]]
        return out

    return propagation_inputs(adj_norm, node_rows, int(pos))


def encode_target(inputs: TargetInputs, params: GnnParams) -> np.ndarray:
    Z1 = inputs.R @ params.W1
    if params.b1 is not None:
        Z1 = Z1 + params.b1
    g = inputs.a @ np.maximum(Z1, 0.0)
    H = g @ params.W2
    if params.b2 is not None:
        H = H + params.b2
    return H


def gcn_propagate(adjacency, node_features: np.ndarray, params: GnnParams, t: int) -> np.ndarray:
    """Target embedding over an arbitrary square adjacency (no self-loops given)."""
    adj_norm = normalized_adjacency(adjacency)
    X = np.asarray(node_features, dtype=np.float64)
    return encode_target(propagation_inputs(adj_norm, lambda cols: X[cols], t), params)


def gcn_forward(subgraph: Subgraph, features: FeatureStore, params: GnnParams, target: int) -> np.ndarray:
    """H_u for ``target``: ReLU(Â H0 W1) then Â H1 W2, read at the target row."""
    if params.W1.shape[0] != features.d:
        raise ShapeError(f"W1 expects {params.W1.shape[0]} inputs, features have {features.d}")
    return encode_target(subgraph_inputs(subgraph, features, int(target)), params)


def score(user_vec, item_vec) -> float:
    u, v = np.asarray(user_vec, dtype=np.float64), np.asarray(item_vec, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cannot score {u.shape} against {v.shape}")
    return float(u @ v)


def bpr_loss(pos_score: float, neg_scores) -> float:
    """Sum over negatives of ``-log sigmoid(pos - neg)``, written as softplus."""
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.size == 0:
        raise ValidationError("need at least one negative score")
    return float(np.logaddexp(0.0, neg - pos_score).sum())


def bpr_loss_and_grads(inputs: TargetInputs, params: GnnParams, pos_vec: np.ndarray, neg_vecs: np.ndarray):
    """BPR loss through the inner-product scores and both GCN layers."""
    Z1 = inputs.R @ params.W1
    if params.b1 is not None:
        Z1 = Z1 + params.b1
    H1 = np.maximum(Z1, 0.0)
    g = inputs.a @ H1
    H = g @ params.W2
    if params.b2 is not None:
        H = H + params.b2
    s_pos = H @ pos_vec
    s_neg = neg_vecs @ H
    loss = float(np.logaddexp(0.0, s_neg - s_pos).sum())
    w = expit(s_neg - s_pos)  # dL/ds_neg; dL/ds_pos = -sum(w)
    dH = w @ neg_vecs - w.sum() * pos_vec
    grads = {"W2": np.outer(g, dH)}
    dZ1 = np.outer(inputs.a, params.W2 @ dH) * (Z1 > 0)
    grads["W1"] = inputs.R.T @ dZ1
    if params.b1 is not None:
        grads["b1"] = dZ1.sum(axis=0)
        grads["b2"] = dH
    return loss, grads


def sample_negatives(pool, positives, n: int, rng) -> tuple[np.ndarray, bool]:
    """``n`` items drawn uniformly without replacement from ``pool`` minus ``positives``.

    Returns (items, short) where ``short`` flags a pool smaller than ``n``.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    pool = np.unique(np.asarray(list(pool), dtype=np.int64))
    if positives:
        pool = pool[~np.isin(pool, np.fromiter((int(p) for p in positives), dtype=np.int64))]
    if pool.size == 0:
        raise SamplingError("no items left to sample negatives from")
    if pool.size <= n:
        return pool, pool.size < n
    return np.sort(rng.choice(pool, size=n, replace=False)), False


def rank_items(subgraph: Subgraph, user_vec: np.ndarray, features: FeatureStore, exclude=(),
               candidates=None) -> RankedList:
    """Score subgraph items (minus ``exclude``) by inner product; ties by ascending item id."""
    items = subgraph.items if candidates is None else np.asarray(candidates, dtype=np.int64)
    ex = np.fromiter((int(v) for v in exclude), dtype=np.int64)
    if ex.size:
        items = items[~np.isin(items, ex)]
    target = -1 if subgraph.target is None else subgraph.target
    if items.size == 0:
        return RankedList(items, np.empty(0), target, subgraph.fingerprint, True)
    scores = features.item_features[items] @ np.asarray(user_vec, dtype=np.float64)
    order = np.lexsort((items, -scores))
    return RankedList(items[order], scores[order], target, subgraph.fingerprint)


# ---- training ------------------------------------------------------------------

@dataclass
class TargetView:
    """Everything the ranker needs about one target: its subgraph, inputs and exclusions."""

    subgraph: Subgraph
    inputs: TargetInputs
    exclude: frozenset[int]


def train_gnn(samples, views: Mapping[int, TargetView], features: FeatureStore, params: GnnParams,
              config: TrainConfig, val_samples=None) -> tuple[GnnParams, TrainLog]:
    """Adam on BPR with negatives from each target's final subgraph.

    ``samples`` are (user, item) training pairs; early stopping watches
    validation Recall@``config.val_k``. Returns the best-validation parameters.
    """
    if val_samples is None:
        train, val = split_samples(samples, config.val_fraction, config.seed)
    else:
        train, val = list(samples), list(val_samples)
    if not train:
        raise ValidationError("no training samples")
    val = val or train
    positives = defaultdict(set)
    for u, v in list(train) + list(val):
        positives[u].add(int(v))
    val_truth = defaultdict(set)
    for u, v in val:
        val_truth[u].add(int(v))

    M = features.item_features
    work = params.copy()
    tensors = work.as_dict()
    opt = Adam(config.lr)
    stopper = EarlyStopping(config.patience, "max")
    rng = np.random.default_rng(config.seed + 7)
    log_ = TrainLog()
    eval_every = config.eval_every or len(train)

    def validate():
        vals = []
        for u, gt in val_truth.items():
            view = views[u]
            # held-out items stay rankable even though they belong to the training split
            ranked = rank_items(view.subgraph, encode_target(view.inputs, work), features, view.exclude - gt)
            vals.append(recall_at_k(ranked, gt, config.val_k))
        return float(np.mean(vals))

    best = work.copy()
    value = validate()
    stopper.update(value)
    log_.val_metric.append(value)
    done = False
    for _ in range(config.max_epochs):
        for i in rng.permutation(len(train)):
            u, v = train[i]
            view = views[u]
            try:
                negs, _ = sample_negatives(view.subgraph.items, positives[u] | view.exclude, config.negatives, rng)
            except SamplingError:
                log.debug("no negatives for user %s; sample skipped", u)
                continue
            loss, grads = bpr_loss_and_grads(view.inputs, work, M[v], M[negs])
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise DivergenceError(f"non-finite BPR loss at step {log_.steps} (user {u}, item {v})")
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
