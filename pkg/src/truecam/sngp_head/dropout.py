"""MC-dropout baseline head.

Mask stream contract (the tests replay it): for each pass, for each hidden
layer in order, one ``rng.random((n_rows, width))`` draw; a unit is kept
where the draw is ``>= rate`` and kept units are scaled by ``1 / (1 - rate)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from truecam.numerics import Rng, as_matrix, make_rng
from truecam.sngp_head._optim import Adam, TrainConfig, TrainingDiverged, cross_entropy, softmax


@dataclass
class DropoutMlp:
    weights: list[np.ndarray]  # hidden layers then the output layer, each (out, in)
    biases: list[np.ndarray]
    rate: float = 0.1
    history: list[float] = field(default_factory=list, compare=False)

    @classmethod
    def init(cls, dims: tuple[int, ...], n_classes: int, rate: float, rng: Rng) -> "DropoutMlp":
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        sizes = list(dims) + [n_classes]
        ws = [rng.standard_normal((o, i)) * math.sqrt(2.0 / i) for i, o in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(o) for o in sizes[1:]]
        return cls(ws, bs, rate)


def _forward(net: DropoutMlp, X: np.ndarray, rng: Rng | None, keep: bool = False):
    cache = []
    H = X
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = H @ W.T + b
        a = np.maximum(z, 0.0)
        mask = None
        if rng is not None:
            mask = (rng.random(a.shape) >= net.rate) / (1.0 - net.rate)
            a = a * mask
        if keep:
            cache.append((H, z, mask))
        H = a
    logits = H @ net.weights[-1].T + net.biases[-1]
    return logits, H, cache


def fit_dropout_head(X, y, hidden: tuple[int, ...] = (64, 64), n_classes: int = 2, rate: float = 0.1,
                     cfg: TrainConfig = TrainConfig()) -> DropoutMlp:
    X = as_matrix(X, "X")
    y = np.asarray(y, dtype=np.int64)
    rng = make_rng(cfg.seed)
    net = DropoutMlp.init((X.shape[1],) + tuple(hidden), n_classes, rate, rng)
    params = {}
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        params[f"W{i}"], params[f"b{i}"] = W, b
    opt = Adam(params, cfg)
    n = X.shape[0]
    last = len(net.weights) - 1
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, H, cache = _forward(net, X[idx], rng, keep=True)
            loss, d = cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {opt.t}")
            grads = {f"W{last}": d.T @ H, f"b{last}": d.sum(0)}
            dH = d @ net.weights[-1]
            for i in reversed(range(last)):
                H_in, z, mask = cache[i]
                dz = dH * mask * (z > 0)
                grads[f"W{i}"] = dz.T @ H_in
                grads[f"b{i}"] = dz.sum(0)
                dH = dz @ net.weights[i]
            opt.step(params, grads)
        net.history.append(cross_entropy(_forward(net, X, None)[0], y)[0])
    return net


def mc_dropout_predict(x, net: DropoutMlp, passes: int = 5, rng: Rng | None = None):
    """Mean class probabilities and their per-class std over ``passes`` dropout passes."""
    if passes < 2:
        raise ValueError("passes must be >= 2")
    if rng is None:
        rng = make_rng(0)
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    P = np.stack([softmax(_forward(net, X, rng)[0]) for _ in range(passes)])
    mean, std = P.mean(0), P.std(0)
    return (mean[0], std[0]) if single else (mean, std)


def dropout_uncertainty(mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Tile uncertainty: the spread of the predicted class's probability."""
    mean = np.atleast_2d(mean)
    std = np.atleast_2d(std)
    return std[np.arange(len(mean)), mean.argmax(1)]
