"""Spectral-normalized MLP with a random-Fourier-feature Gaussian-process output layer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, solve_triangular

from truecam.numerics import Rng, as_matrix, make_rng, power_iteration
from truecam.sngp_head._optim import Adam, TrainConfig, TrainingDiverged, cross_entropy, softmax


@dataclass(frozen=True)
class SnMlpConfig:
    """Feature-extractor shape: ``layer_dims = (D, hidden..., penultimate)``.

    Hidden layers whose input and output widths agree get a residual
    connection when ``residual`` is set.
    """

    layer_dims: tuple[int, ...] = (16, 64, 64)
    c: float = 0.95
    power_iters: int = 1
    activation: str = "relu"
    residual: bool = True

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("spectral cap c must be positive")
        if len(self.layer_dims) < 2:
            raise ValueError("need at least one hidden layer")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer widths must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.power_iters < 1:
            raise ValueError("power_iters must be >= 1")


@dataclass
class SnMlp:
    cfg: SnMlpConfig
    weights: list[np.ndarray]  # (out, in)
    biases: list[np.ndarray]

    @classmethod
    def init(cls, cfg: SnMlpConfig, rng: Rng) -> "SnMlp":
        ws, bs = [], []
        for d_in, d_out in zip(cfg.layer_dims[:-1], cfg.layer_dims[1:]):
            ws.append(rng.standard_normal((d_out, d_in)) * math.sqrt(2.0 / d_in))
            bs.append(np.zeros(d_out))
        mlp = cls(cfg, ws, bs)
        for i, W in enumerate(mlp.weights):
            mlp.weights[i] = apply_spectral_normalization(W, cfg.c, 100, rng)
        return mlp

    def is_residual(self, layer: int) -> bool:
        W = self.weights[layer]
        return self.cfg.residual and W.shape[0] == W.shape[1]


@dataclass(frozen=True)
class RffProjection:
    """Frozen random projection: ``W`` ~ N(0, 1), ``b`` ~ U[0, 2*pi)."""

    W: np.ndarray  # (D_L, d_h)
    b: np.ndarray  # (D_L,)
    lengthscale: float = 1.0

    @classmethod
    def draw(cls, d_h: int, d_l: int, rng: Rng, lengthscale: float = 1.0) -> "RffProjection":
        W = rng.standard_normal((d_l, d_h))
        b = rng.uniform(0.0, 2.0 * math.pi, d_l)
        W.flags.writeable = False
        b.flags.writeable = False
        return cls(W, b, lengthscale)

    @property
    def dim(self) -> int:
        return self.W.shape[0]


@dataclass
class GpPosterior:
    beta: np.ndarray  # (D_L, K)
    precision: np.ndarray  # Phi^T Phi + tau I
    tau: float
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_classes(self) -> int:
        return self.beta.shape[1]

    def cholesky(self) -> np.ndarray:
        if self._chol is None:
            c, _ = cho_factor(self.precision, lower=True)
            self._chol = np.tril(c)
        return self._chol


@dataclass(frozen=True)
class PredictiveOutput:
    mu: np.ndarray
    sigma: np.ndarray
    probs: np.ndarray
    uncertainty: np.ndarray | float


@dataclass
class SngpHead:
    mlp: SnMlp
    rff: RffProjection
    posterior: GpPosterior | None = None
    history: list[float] = field(default_factory=list, compare=False)

    @property
    def trained(self) -> bool:
        return self.posterior is not None


def apply_spectral_normalization(
    W, c: float, power_iters: int, rng: Rng | None = None, v0: np.ndarray | None = None
) -> np.ndarray:
    """Return ``c * W / sigma`` when the estimated spectral norm exceeds ``c``, else ``W``."""
    if c <= 0:
        raise ValueError("c must be positive")
    W = as_matrix(W, "W")
    sigma, _ = power_iteration(W, power_iters, rng=rng, v0=v0)
    if sigma > c:
        return c * W / sigma
    return W


def _layer_forward(mlp: SnMlp, H: np.ndarray, keep: bool = False):
    cache = []
    for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = H @ W.T + b
        a = np.maximum(z, 0.0)
        out = H + a if mlp.is_residual(i) else a
        if keep:
            cache.append((H, z))
        H = out
    return H, cache


def forward_features(x, mlp: SnMlp) -> np.ndarray:
    """Penultimate representation ``h(x)`` for a vector or a row batch."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != mlp.cfg.layer_dims[0]:
        raise ValueError(f"expected input dim {mlp.cfg.layer_dims[0]}, got {X.shape[1]}")
    H, _ = _layer_forward(mlp, X)
    return H[0] if single else H


def rff_transform(h, proj: RffProjection) -> np.ndarray:
    """``sqrt(2/D_L) * cos(-W h + b)`` for a vector or a row batch."""
    H = np.asarray(h, dtype=np.float64)
    single = H.ndim == 1
    H = np.atleast_2d(H)
    if H.shape[1] != proj.W.shape[1]:
        raise ValueError(f"expected representation dim {proj.W.shape[1]}, got {H.shape[1]}")
    Phi = math.sqrt(2.0 / proj.dim) * np.cos(-(H / proj.lengthscale) @ proj.W.T + proj.b)
    return Phi[0] if single else Phi


def rbf_kernel(h1, h2, lengthscale: float = 1.0) -> float:
    d = np.asarray(h1, dtype=np.float64) - np.asarray(h2, dtype=np.float64)
    return float(np.exp(-(d @ d) / (2.0 * lengthscale**2)))


# ---------------------------------------------------------------------------
# training


def _params(mlp: SnMlp, beta: np.ndarray) -> dict[str, np.ndarray]:
    p = {"beta": beta}
    for i, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        p[f"W{i}"] = W
        p[f"b{i}"] = b
    return p


def loss_and_grads(
    mlp: SnMlp, rff: RffProjection, beta: np.ndarray, X: np.ndarray, y: np.ndarray, n_total: int
) -> tuple[float, dict[str, np.ndarray]]:
    """MAP objective on a batch: mean cross-entropy + ||beta||^2 / (2 n_total)."""
    H, cache = _layer_forward(mlp, X, keep=True)
    scale = math.sqrt(2.0 / rff.dim)
    Z = -(H / rff.lengthscale) @ rff.W.T + rff.b
    Phi = scale * np.cos(Z)
    logits = Phi @ beta
    ce, dlogits = cross_entropy(logits, y)
    loss = ce + 0.5 * float((beta * beta).sum()) / n_total
    grads = {"beta": Phi.T @ dlogits + beta / n_total}
    dPhi = dlogits @ beta.T
    # d Phi / d H = scale * sin(Z) * W / lengthscale
    dH = ((dPhi * scale * np.sin(Z)) @ rff.W) / rff.lengthscale
    for i in reversed(range(len(mlp.weights))):
        H_in, z = cache[i]
        dz = dH * (z > 0)
        grads[f"W{i}"] = dz.T @ H_in
        grads[f"b{i}"] = dz.sum(0)
        dH_in = dz @ mlp.weights[i]
        if mlp.is_residual(i):
            dH_in = dH_in + dH
        dH = dH_in
    return loss, grads


def _train_ce(mlp: SnMlp, rff: RffProjection, beta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    logits = rff_transform(forward_features(X, mlp), rff) @ beta
    return cross_entropy(logits, y)[0]


def fit_head(
    X,
    y,
    cfg: TrainConfig = TrainConfig(),
    mlp_cfg: SnMlpConfig | None = None,
    rff: RffProjection | int = 1024,
    n_classes: int = 2,
    tau: float = 1.0,
    lengthscale: float = 1.0,
) -> SngpHead:
    """Train the SN feature extractor and ``beta`` end to end, then assemble the posterior.

    Spectral normalization is applied after every optimizer step using
    persistent power-iteration vectors. ``history[0]`` is the training
    cross-entropy before the first step; one entry follows per epoch.
    """
    X = as_matrix(X, "X")
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise ValueError("labels must have one entry per row")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    if X.shape[0] < n_classes:
        raise ValueError("need at least as many rows as classes")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if mlp_cfg is None:
        mlp_cfg = SnMlpConfig(layer_dims=(X.shape[1], 64, 64))
    if mlp_cfg.layer_dims[0] != X.shape[1]:
        raise ValueError("layer_dims[0] must match the embedding dim")

    rng = make_rng(cfg.seed)
    mlp = SnMlp.init(mlp_cfg, rng)
    if isinstance(rff, int):
        rff = RffProjection.draw(mlp_cfg.layer_dims[-1], rff, rng, lengthscale)
    beta = rng.standard_normal((rff.dim, n_classes)) * 0.01
    params = _params(mlp, beta)
    opt = Adam(params, cfg)
    sn_vecs = [rng.standard_normal(W.shape[1]) for W in mlp.weights]

    n = X.shape[0]
    history = [_train_ce(mlp, rff, beta, X, y)]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(mlp, rff, params["beta"], X[idx], y[idx], n)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {opt.t}")
            opt.step(params, grads)
            for i in range(len(mlp.weights)):
                W = params[f"W{i}"]
                sigma, sn_vecs[i] = power_iteration(W, mlp_cfg.power_iters, v0=sn_vecs[i])
                if sigma > mlp_cfg.c:
                    W *= mlp_cfg.c / sigma
        ce = _train_ce(mlp, rff, params["beta"], X, y)
        if not math.isfinite(ce):
            raise TrainingDiverged("non-finite training loss")
        history.append(ce)

    for i in range(len(mlp.weights)):
        mlp.weights[i] = apply_spectral_normalization(params[f"W{i}"], mlp_cfg.c, 100, v0=sn_vecs[i])
        mlp.biases[i] = params[f"b{i}"]
    Phi = rff_transform(forward_features(X, mlp), rff)
    posterior = GpPosterior(params["beta"], posterior_precision(Phi, tau), tau)
    return SngpHead(mlp, rff, posterior, history)


def posterior_precision(Phi: np.ndarray, tau: float) -> np.ndarray:
    P = Phi.T @ Phi
    P[np.diag_indices_from(P)] += tau
    return P


# ---------------------------------------------------------------------------
# prediction


def predictive_probs(
    mu: np.ndarray,
    sigma: np.ndarray,
    method: str = "mean-field",
    rng: Rng | None = None,
    n_samples: int = 1000,
) -> np.ndarray:
    """Approximate E[softmax(s)] for s ~ N(mu, diag(sigma^2)), row-wise."""
    mu = np.atleast_2d(mu)
    sigma = np.broadcast_to(np.atleast_2d(sigma), mu.shape)
    if method == "mean-field":
        return softmax(mu / np.sqrt(1.0 + (math.pi / 8.0) * sigma**2))
    if method == "mc":
        if rng is None:
            rng = make_rng(0)
        eps = rng.standard_normal((n_samples,) + mu.shape)
        return softmax(mu[None] + sigma[None] * eps).mean(0)
    raise ValueError(f"unknown predictive method {method!r}")


def gp_uncertainty(Phi_star: np.ndarray, posterior: GpPosterior) -> np.ndarray:
    """``sqrt(tau * phi^T (Phi^T Phi + tau I)^-1 phi)`` per row."""
    L = posterior.cholesky()
    V = solve_triangular(L, np.atleast_2d(Phi_star).T, lower=True)
    return np.sqrt(posterior.tau * (V * V).sum(0))


def predict(
    x, head: SngpHead, method: str = "mean-field", rng: Rng | None = None, n_samples: int = 1000
) -> PredictiveOutput:
    if not head.trained:
        raise RuntimeError("head is not trained")
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    Phi = rff_transform(forward_features(np.atleast_2d(X), head.mlp), head.rff)
    mu = Phi @ head.posterior.beta
    unc = gp_uncertainty(Phi, head.posterior)
    sigma = np.repeat(unc[:, None], mu.shape[1], axis=1)
    probs = predictive_probs(mu, sigma, method, rng, n_samples)
    if single:
        return PredictiveOutput(mu[0], sigma[0], probs[0], float(unc[0]))
    return PredictiveOutput(mu, sigma, probs, unc)
