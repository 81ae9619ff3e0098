from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch training schedule.

    Defaults follow the specialized-model recipe: Adam with moment decays
    (0.9, 0.999), lr 3e-4 decayed by 0.98 every 512 steps, four epochs,
    batch size 64.
    """

    epochs: int = 4
    batch_size: int = 64
    lr: float = 3e-4
    lr_decay: tuple[float, int] = (0.98, 512)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, step: int) -> float:
        factor, every = self.lr_decay
        return self.lr * factor ** (step // every)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.cfg.betas
        lr = self.cfg.lr_at(self.t)
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)


class TrainingDiverged(RuntimeError):
    pass


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    p = softmax(logits)
    n = len(y)
    z = logits - logits.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    loss = -float(logp[np.arange(n), y].mean())
    d = p.copy()
    d[np.arange(n), y] -= 1.0
    return loss, d / n
