"""Adam and patience-based early stopping for dict-of-array parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


class Adam:
    def __init__(self, lr: float = 1e-6, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.lr == 0.0:
                continue
            params[name] -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


class EarlyStopping:
    """Stop after ``patience`` consecutive evaluations without improvement.

    ``mode="min"`` for losses, ``"max"`` for metrics. Improvement must be strict.
    """

    def __init__(self, patience: int = 10, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ValueError(mode)
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.best_step = -1
        self.evaluations = 0
        self.bad = 0

    def update(self, value: float) -> bool:
        """Record one evaluation; returns True when training should stop."""
        step = self.evaluations
        self.evaluations += 1
        better = self.best is None or (value < self.best if self.mode == "min" else value > self.best)
        if better:
            self.best = value
            self.best_step = step
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad == 0


@dataclass
class TrainConfig:
    lr: float = 1e-6
    patience: int = 10
    max_epochs: int = 50
    eval_every: int = 0  # steps between validations; 0 = once per epoch
    val_fraction: float = 0.1
    seed: int = 0
    log_variant: bool = False  # retriever only: log-softmax instead of raw probabilities
    negatives: int = 10  # ranker only: negative set size
    val_k: int = 20  # ranker only: validation Recall@K cutoff
    max_steps: int = 0  # 0 = unbounded

    def __post_init__(self):
        if self.lr < 0 or self.patience < 1 or self.max_epochs < 1:
            raise ValidationError("invalid training hyperparameters")


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    steps: int = 0
    best_evaluation: int = -1
    stopped_early: bool = False


def split_samples(samples, val_fraction: float, seed: int):
    """Seeded shuffle, then hold out ``val_fraction`` (at least one sample when possible)."""
    samples = list(samples)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_val = int(round(len(samples) * val_fraction))
    if val_fraction > 0 and n_val == 0 and len(samples) > 1:
        n_val = 1
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    return train, val
