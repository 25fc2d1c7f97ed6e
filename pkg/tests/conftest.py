import numpy as np
import pytest

from corona.graph import build_graph
from corona.llm import Gateway, LlmConfig
from corona.pipeline import Dataset
from corona.synth import SynthConfig, generate

SMALL_LLM = dict(dim=16, embed_dim_native=64)


def small_llm(**kw):
    return LlmConfig(**{**SMALL_LLM, **kw})


def small_synth(seed=0, **kw):
    cfg = dict(users=40, items=60, clusters=3, seed=seed, d=16, min_interactions=5, max_interactions=9)
    cfg.update(kw)
    return generate(SynthConfig(**cfg), small_llm())


def random_graph(rng, n_users, n_items, density=0.15, mask_rate=0.0):
    """Random interactions with every user and item present at least once."""
    recs, ts = [], 0
    for u in range(n_users):
        recs.append((f"u{u}", f"i{rng.integers(n_items)}", ts))
        ts += 1
    for v in range(n_items):
        recs.append((f"u{rng.integers(n_users)}", f"i{v}", ts))
        ts += 1
    hits = np.argwhere(rng.random((n_users, n_items)) < density)
    for u, v in hits:
        recs.append((f"u{u}", f"i{v}", ts))
        ts += 1
    pairs = sorted({(r[0], r[1]) for r in recs})
    mask = [p for p in pairs if rng.random() < mask_rate]
    return build_graph(recs, mask)


@pytest.fixture
def toy_graph():
    # u0 - i0 - u1 - i1 - u2 - i2 - u3 ; u4 isolated on i3; (u0, i4) masked
    recs = [("u0", "i0", 1), ("u1", "i0", 2), ("u1", "i1", 3), ("u2", "i1", 4),
            ("u2", "i2", 5), ("u3", "i2", 6), ("u4", "i3", 7), ("u0", "i4", 8)]
    return build_graph(recs, [("u0", "i4")])


@pytest.fixture
def small_dataset():
    return Dataset.from_synthetic(small_synth())


@pytest.fixture
def small_gateway():
    return Gateway(small_llm())
