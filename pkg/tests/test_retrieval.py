import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corona.errors import DivergenceError, ShapeError, ValidationError
from corona.features import FeatureStore, TextAttributes
from corona.graph import build_graph
from corona.llm import Gateway, QueryEmbedding
from corona.optim import TrainConfig
from corona.retrieval import (RetrievalConfig, Retriever, RetrieverParams, encode_users, retriever_loss,
                              retriever_loss_and_grads, stage1_retrieve, stage2_retrieve, top_k_users,
                              train_retriever)

from conftest import random_graph, small_llm


def brute_top_k(q, X, candidates, k, target):
    """Full sort by (-cosine, id), zero rows last."""
    scored = []
    for c in sorted(set(int(c) for c in candidates)):
        n = np.linalg.norm(X[c])
        cos = -np.inf if n == 0 else float(X[c] @ q / (n * np.linalg.norm(q)))
        scored.append((-cos, c))
    scored.sort()
    return sorted([c for _, c in scored[:k]] + [target])


def fd_grads(f, params, h=1e-6):
    out = {}
    for name, arr in params.as_dict().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = f()
            arr[idx] = old - h
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        out[name] = g
    return out


def rel_err(analytic: dict, numeric: dict) -> float:
    """Relative error of the full flattened gradient.

    Measured on the whole vector because some blocks vanish analytically
    (the bias, under a shift-invariant softmax) and hold only FD noise.
    """
    a = np.concatenate([analytic[k].ravel() for k in sorted(analytic)])
    b = np.concatenate([numeric[k].ravel() for k in sorted(analytic)])
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else np.linalg.norm(a - b) / scale


class FixedQueries(Gateway):
    """Gateway whose query vectors are supplied by the test, in call order."""

    def __init__(self, vectors):
        super().__init__(small_llm(dim=len(vectors[0]), embed_dim_native=64))
        self._queue = list(vectors)

    def encode_text(self, text, stage=None, source=None):
        return QueryEmbedding(np.asarray(self._queue.pop(0), dtype=float), stage, "x")


def test_encode_users_hand_oracle():
    # d=2, dim_e=1: X = [F | e_bucket] @ W + b
    p = RetrieverParams(np.array([[1.0], [2.0], [3.0]]), np.array([[1.0, 0.0], [0.0, 2.0], [1.0, -1.0]]),
                        np.array([0.5, 0.0]))
    F = np.array([[1.0, 1.0], [0.0, 1.0]])
    X = encode_users(F, np.array([1, 3]), p)
    # row0: [1,1,1] @ W = [2, 1] + b -> [2.5, 1]; row1: [0,1,3] @ W = [3, -1] + b -> [3.5, -1]
    np.testing.assert_allclose(X, [[2.5, 1.0], [3.5, -1.0]])
    with pytest.raises(ShapeError):
        encode_users(np.ones((2, 3)), np.array([1, 3]), p)


def test_identity_init_reproduces_features():
    p = RetrieverParams.init(4, 2, seed=0)
    F = np.random.default_rng(1).standard_normal((5, 4))
    np.testing.assert_array_equal(encode_users(F, np.array([1, 2, 3, 3, 1]), p), F)


def test_top_k_tie_break_and_errors():
    X = np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    assert top_k_users([1.0, 0.0], X, [1, 2, 3, 4], 1, 0).tolist() == [0, 1]
    assert top_k_users([1.0, 0.0], X, [1, 2, 3, 4], 2, 0).tolist() == [0, 1, 2]
    assert top_k_users([0.0, 1.0], X, [1, 2, 4], 1, 0).tolist() == [0, 1]  # zero row never beats a real tie
    assert top_k_users([1.0, 0.0], X, [1, 2], 10, 0).tolist() == [0, 1, 2]
    with pytest.raises(ValidationError):
        top_k_users([0.0, 0.0], X, [1, 2], 1, 0)
    with pytest.raises(ValidationError):
        top_k_users([1.0, 0.0], X, [0, 1], 1, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 40))
def test_top_k_matches_full_sort(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.integers(-2, 3, size=(60, 3)).astype(float)  # small integers force ties
    q = rng.integers(-2, 3, size=3).astype(float)
    if not q.any():
        q[0] = 1.0
    target = int(rng.integers(60))
    cands = [c for c in rng.choice(60, size=45, replace=False) if c != target]
    assert top_k_users(q, X, cands, k, target).tolist() == brute_top_k(q, X, cands, k, target)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.floats(1e-3, 1e3))
def test_top_k_invariant_to_query_scale(seed, scale):
    rng = np.random.default_rng(seed)
    X, q = rng.standard_normal((30, 4)), rng.standard_normal(4)
    base = top_k_users(q, X, range(1, 30), 7, 0)
    assert np.array_equal(base, top_k_users(scale * q, X, range(1, 30), 7, 0))


def _hand_graph():
    recs = [("u0", "i0", 1), ("u1", "i0", 2), ("u1", "i1", 3), ("u2", "i2", 4), ("u3", "i3", 5),
            ("u4", "i3", 6), ("u4", "i4", 7), ("u5", "i5", 8)]
    g = build_graph(recs)
    F = np.array([[1, 1], [1, 0], [0.9, 0.1], [0, 1], [0.1, 0.9], [-1, 0]], dtype=float)
    feats = FeatureStore(F, np.eye(6, 2))
    texts = TextAttributes.from_records(g, [{"id": f"u{i}", "Age": 20 + i} for i in range(6)],
                                        [{"id": f"i{i}", "title": f"T{i}", "year": 1990 + i} for i in range(6)])
    return g, feats, texts


def test_two_stage_hand_oracle():
    g, feats, texts = _hand_graph()
    params = RetrieverParams.init(2, 2, seed=0)
    gw = FixedQueries([[1.0, 0.0], [0.0, 1.0]])
    cfg = RetrievalConfig(k=4)
    s1 = stage1_retrieve(g, feats, texts, params, cfg, gw, 0)
    # cosines to (1,0): u1 1, u2 .994, u4 .110, u3 0, u5 -1 -> top 4 = {1, 2, 3, 4}
    assert s1.subgraph.users.tolist() == [0, 1, 2, 3, 4]
    assert s1.subgraph.items.tolist() == [0, 1, 2, 3, 4]
    assert s1.prompt.startswith("Task: preference reasoning")
    s2 = stage2_retrieve(s1, g, texts, cfg, gw, 0)
    # k/2 = 2 users by cosine to (0,1) among {1,2,3,4}: u3 1.0, u4 .994
    assert s2.subgraph.users.tolist() == [0, 3, 4]
    assert s2.subgraph.items.tolist() == [0, 3, 4]
    assert "No.1: Title: T0; Year: 1990" in s2.prompt


def test_retriever_loss_closed_forms():
    assert retriever_loss([1.0], [2.0], np.array([[3.0]]), [0]) == -2.0
    assert retriever_loss([1.0], [1.0], np.array([[3.0]]), [0], log_variant=True) == 0.0
    assert retriever_loss([1.0, 0.0], [0.0, 1.0], np.ones((2, 2)), []) == 0.0
    assert retriever_loss([1.0, 0.0], [0.0, 1.0], np.ones((2, 2)), [0]) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ValidationError):
        retriever_loss([1.0], [1.0], np.empty((0, 1)), [])


@pytest.mark.parametrize("log_variant", [False, True])
@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(seed, log_variant):
    rng = np.random.default_rng(seed)
    n, d, de = 7, 3, 2
    p = RetrieverParams(rng.standard_normal((3, de)), rng.standard_normal((d + de, d)) * 0.5,
                        rng.standard_normal(d) * 0.1)
    F = rng.standard_normal((n, d))
    buckets = rng.integers(1, 4, size=n)
    q1, q2 = rng.standard_normal(d), rng.standard_normal(d)
    true = rng.choice(n, size=3, replace=False)
    _, grads = retriever_loss_and_grads(p, F, buckets, q1, q2, true, log_variant)
    numeric = fd_grads(lambda: retriever_loss(q1, q2, encode_users(F, buckets, p), true, log_variant), p)
    assert rel_err(grads, numeric) < 1e-4
    assert np.abs(grads["bias"]).max() < 1e-12


def test_training_reduces_loss_and_keeps_best():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 20, 15, density=0.2)
    feats = FeatureStore(rng.standard_normal((20, 4)), rng.standard_normal((15, 4)))
    queries = {u: (rng.standard_normal(4), rng.standard_normal(4)) for u in range(20)}
    samples = [(u, int(g.neighbors(u)[0])) for u in range(20) if g.neighbors(u).size]
    p0 = RetrieverParams.init(4, 2, 0)
    cfg = TrainConfig(lr=1e-2, max_epochs=5, patience=3)
    best, log = train_retriever(samples, g, feats, p0, queries, cfg, val_samples=samples)
    assert log.steps > 0
    assert min(log.val_metric) < log.val_metric[0]
    assert log.val_metric[log.best_evaluation] == min(log.val_metric)
    assert np.array_equal(p0.weight[:4], np.eye(4))  # input params untouched
    with pytest.raises(DivergenceError):
        train_retriever(samples, g, feats, p0, {u: (np.full(4, np.nan), q) for u, (q, _) in queries.items()},
                        TrainConfig(lr=1.0, max_epochs=1), val_samples=samples)


def _fuzz_case(rng):
    n_users, n_items = int(rng.integers(3, 25)), int(rng.integers(2, 20))
    g = random_graph(rng, n_users, n_items, density=float(rng.uniform(0.02, 0.3)), mask_rate=0.1)
    d = 6
    feats = FeatureStore(rng.standard_normal((n_users, d)), rng.standard_normal((n_items, d)))
    texts = TextAttributes.from_records(
        g, [{"id": u, "Age": int(rng.integers(18, 80))} for u in g.user_ids],
        [{"id": v, "title": v, "year": int(rng.integers(1950, 2020)), "genre": ["g%d" % rng.integers(4)]}
         for v in g.item_ids])
    return g, feats, texts


def test_nesting_fuzz():
    rng = np.random.default_rng(7)
    gw = Gateway(small_llm(dim=6, embed_dim_native=24))
    for _ in range(150):
        g, feats, texts = _fuzz_case(rng)
        k = int(rng.integers(2, g.n_users + 3))
        params = RetrieverParams(rng.standard_normal((3, 2)), rng.standard_normal((8, 6)), rng.standard_normal(6))
        r = Retriever(g, feats, texts, params, RetrievalConfig(k=k), gw)
        t = int(rng.integers(g.n_users))
        s1, s2 = r.retrieve(t)
        U1, U2 = s1.subgraph.user_set, s2.subgraph.user_set
        assert t in U2 and U2 <= U1
        assert s2.subgraph.item_set <= s1.subgraph.item_set
        assert len(U1) <= k + 1 and len(U2) <= k // 2 + 1
