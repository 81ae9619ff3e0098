"""Attention-based MIL pooling of tile embeddings into a slide representation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from truecam.numerics import Rng, as_matrix
from truecam.sngp_head._optim import softmax
from truecam.sngp_head.sngp import apply_spectral_normalization


@dataclass(frozen=True)
class AbmilConfig:
    embed_dim: int = 512
    attn_dim: int = 384
    input_dropout: float = 0.1
    hidden_dropout: float = 0.25

    def __post_init__(self):
        if self.embed_dim < 1 or self.attn_dim < 1:
            raise ValueError("dims must be >= 1")
        for p in (self.input_dropout, self.hidden_dropout):
            if not 0.0 <= p < 1.0:
                raise ValueError("dropout must lie in [0, 1)")


@dataclass
class Abmil:
    cfg: AbmilConfig
    W_embed: np.ndarray  # (embed_dim, D)
    b_embed: np.ndarray
    W_attn: np.ndarray  # (attn_dim, embed_dim)
    b_attn: np.ndarray
    w_score: np.ndarray  # (attn_dim,)
    W_cls: np.ndarray  # (K, embed_dim)
    b_cls: np.ndarray

    @classmethod
    def init(cls, in_dim: int, n_classes: int, cfg: AbmilConfig, rng: Rng,
             spectral_cap: float | None = None) -> "Abmil":
        def dense(o, i):
            return rng.standard_normal((o, i)) * math.sqrt(2.0 / i)

        net = cls(
            cfg,
            dense(cfg.embed_dim, in_dim), np.zeros(cfg.embed_dim),
            dense(cfg.attn_dim, cfg.embed_dim), np.zeros(cfg.attn_dim),
            rng.standard_normal(cfg.attn_dim) / math.sqrt(cfg.attn_dim),
            dense(n_classes, cfg.embed_dim), np.zeros(n_classes),
        )
        if spectral_cap is not None:
            for name in ("W_embed", "W_attn", "W_cls"):
                setattr(net, name, apply_spectral_normalization(getattr(net, name), spectral_cap, 50, rng))
        return net


def _drop(a: np.ndarray, rate: float, rng: Rng | None) -> np.ndarray:
    if rng is None or rate == 0.0:
        return a
    return a * (rng.random(a.shape) >= rate) / (1.0 - rate)


def abmil_pool(tiles, net: Abmil, rng: Rng | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(slide_representation, attention_weights)``.

    Dropout is active only when ``rng`` is given.
    """
    X = np.asarray(tiles, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need at least one tile")
    X = as_matrix(X, "tiles")
    X = _drop(X, net.cfg.input_dropout, rng)
    H = np.maximum(X @ net.W_embed.T + net.b_embed, 0.0)
    H = _drop(H, net.cfg.hidden_dropout, rng)
    A = np.tanh(H @ net.W_attn.T + net.b_attn)
    A = _drop(A, net.cfg.hidden_dropout, rng)
    weights = softmax(A @ net.w_score)
    return weights @ H, weights


def abmil_predict(tiles, net: Abmil) -> np.ndarray:
    rep, _ = abmil_pool(tiles, net)
    return softmax(rep @ net.W_cls.T + net.b_cls)
