"""Transition-tuple discriminator.

Classifies concatenated (o, a, o') rows: label 1 for target-domain
tuples, 0 for simulated ones. Input normalization statistics are fitted
once on the target dataset and frozen, so the generator cannot win by
drifting the input scale. Scores are sigmoid outputs clamped to
[1e-6, 1 - 1e-6], which bounds the downstream logit reward at about
+-13.8155.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError
from .nn import Adam, MlpNet, net_from_dict, net_to_dict
from .trajectory import TransitionTuple

SCORE_EPS = 1e-6


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Discriminator:
    """MLP over normalized (o, a, o') rows with a clamped sigmoid score."""

    def __init__(self, in_dim: int, hidden=(64, 64), rng=None, target_data=None):
        self.in_dim = in_dim
        self.net = MlpNet([in_dim, *hidden, 1], rng=rng, init_output_scale=0.1)
        self.norm_mean = np.zeros(in_dim)
        self.norm_std = np.ones(in_dim)
        self._opt: Adam | None = None
        if target_data is not None:
            self.fit_normalizer(target_data)

    def fit_normalizer(self, data: np.ndarray) -> None:
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[1] != self.in_dim:
            raise ContractViolationError(
                f"normalizer data shape {data.shape}, expected (*, {self.in_dim})"
            )
        self.norm_mean = data.mean(axis=0)
        self.norm_std = np.maximum(data.std(axis=0), 1e-6)

    def _normalize(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.in_dim:
            raise ContractViolationError(
                f"tuple width {X.shape[1]} does not match discriminator input {self.in_dim}"
            )
        return (X - self.norm_mean) / self.norm_std

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.net.forward(self._normalize(X))[:, 0]

    def score_batch(self, X: np.ndarray) -> np.ndarray:
        return np.clip(_sigmoid(self.logits(X)), SCORE_EPS, 1.0 - SCORE_EPS)

    def score(self, tup) -> float:
        row = tup.concat() if isinstance(tup, TransitionTuple) else np.asarray(tup)
        return float(self.score_batch(row[None, :])[0])

    def to_dict(self) -> dict:
        return {
            "kind": "discriminator",
            "net": net_to_dict(self.net),
            "norm_mean": self.norm_mean.tolist(),
            "norm_std": self.norm_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Discriminator":
        net = net_from_dict(d["net"])
        disc = cls.__new__(cls)
        disc.net = net
        disc.in_dim = net.layer_sizes[0]
        disc.norm_mean = np.asarray(d["norm_mean"], dtype=float)
        disc.norm_std = np.asarray(d["norm_std"], dtype=float)
        disc._opt = None
        return disc


def bce_loss(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over all samples (ln 2 at chance level)."""
    return float(np.mean(-labels * np.log(scores) - (1 - labels) * np.log(1 - scores)))


def train_discriminator(disc: Discriminator, real: np.ndarray, sim: np.ndarray,
                        rng, epochs: int = 5, minibatch: int = 256,
                        lr: float = 1e-3) -> list[float]:
    """Minibatch cross-entropy training with balanced classes.

    One epoch visits min(|real|, |sim|) tuples from each class, shuffled;
    every minibatch holds equal counts of both. Returns the mean loss per
    epoch. The optimizer state lives on the discriminator, so successive
    calls continue training rather than restarting.
    """
    real = np.asarray(real, dtype=float)
    sim = np.asarray(sim, dtype=float)
    if real.size == 0 or sim.size == 0:
        raise ContractViolationError("both classes must be non-empty")
    if disc._opt is None:
        disc._opt = Adam(disc.net.params(), lr=lr)
    disc._opt.lr = lr

    m = min(real.shape[0], sim.shape[0])
    half = max(1, minibatch // 2)
    history = []
    for _ in range(epochs):
        real_idx = rng.permutation(real.shape[0])[:m]
        sim_idx = rng.permutation(sim.shape[0])[:m]
        losses, counts = [], []
        for start in range(0, m, half):
            rb = real[real_idx[start:start + half]]
            sb = sim[sim_idx[start:start + half]]
            k = min(len(rb), len(sb))
            if k == 0:
                break
            X = np.vstack([rb[:k], sb[:k]])
            y = np.concatenate([np.ones(k), np.zeros(k)])
            logits = disc.logits(X)
            probs = _sigmoid(logits)
            scores = np.clip(probs, SCORE_EPS, 1.0 - SCORE_EPS)
            losses.append(bce_loss(scores, y) * 2 * k)
            counts.append(2 * k)
            d_logit = (probs - y)[:, None] / (2 * k)
            grads, _ = disc.net.backward(d_logit)
            disc._opt.step(disc.net.params(), grads)
        history.append(float(np.sum(losses) / np.sum(counts)))
    return history
