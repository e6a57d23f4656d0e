"""Logistic regression and a d-8-4-1 ReLU network with hand-written gradients.

All parameters live in one flat float64 vector. The MLP layout is
``W1 (d x 8), b1, W2 (8 x 4), b2, w3 (4), b3``, row-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ParameterError, ShapeError

LOGREG = "logreg"
MLP = "mlp"
KINDS = (LOGREG, MLP)
HIDDEN = (8, 4)


def n_params(kind: str, d: int) -> int:
    if kind == LOGREG:
        return d + 1
    if kind == MLP:
        h1, h2 = HIDDEN
        return (d * h1 + h1) + (h1 * h2 + h2) + (h2 * 1 + 1)
    raise ParameterError(f"unknown model kind {kind!r}")


@dataclass(frozen=True, eq=False)
class ModelParams:
    kind: str
    d: int
    theta: np.ndarray

    def __post_init__(self):
        expected = n_params(self.kind, self.d)
        if self.theta.shape != (expected,):
            raise ShapeError(f"{self.kind} with d={self.d} needs {expected} parameters, got {self.theta.shape}")
        if not np.all(np.isfinite(self.theta)):
            raise ParameterError("parameters must be finite")

    def with_theta(self, theta: np.ndarray) -> "ModelParams":
        return ModelParams(self.kind, self.d, np.asarray(theta, dtype=np.float64))


def init_params(kind: str, d: int, seed=0) -> ModelParams:
    """Zeros for logistic regression; Glorot-uniform weights and zero biases for the MLP."""
    if kind == LOGREG:
        return ModelParams(kind, d, np.zeros(d + 1))
    if kind != MLP:
        raise ParameterError(f"unknown model kind {kind!r}")
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in ((d, HIDDEN[0]), (HIDDEN[0], HIDDEN[1]), (HIDDEN[1], 1)):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return ModelParams(kind, d, np.concatenate(parts))


def _unpack_mlp(theta: np.ndarray, d: int):
    h1, h2 = HIDDEN
    i = 0
    W1 = theta[i:i + d * h1].reshape(d, h1); i += d * h1
    b1 = theta[i:i + h1]; i += h1
    W2 = theta[i:i + h1 * h2].reshape(h1, h2); i += h1 * h2
    b2 = theta[i:i + h2]; i += h2
    w3 = theta[i:i + h2]; i += h2
    b3 = theta[i]
    return W1, b1, W2, b2, w3, b3


def _as_batch(p: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != p.d:
        raise ShapeError(f"expected feature dimension {p.d}, got shape {x.shape}")
    return X, single


def _forward(p: ModelParams, X: np.ndarray):
    if p.kind == LOGREG:
        return X @ p.theta[:-1] + p.theta[-1], None
    W1, b1, W2, b2, w3, b3 = _unpack_mlp(p.theta, p.d)
    a1 = X @ W1 + b1
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ W2 + b2
    h2 = np.maximum(a2, 0.0)
    return h2 @ w3 + b3, (a1, h1, a2, h2)


def score(p: ModelParams, x):
    """Real-valued logit; scalar for one instance, vector for a batch."""
    X, single = _as_batch(p, x)
    z, _ = _forward(p, X)
    return float(z[0]) if single else z


def predict(p: ModelParams, x):
    z = score(p, x)
    return np.where(np.asarray(z) > 0, 1.0, -1.0)


def logistic_loss(z, y):
    # log(1 + exp(-y z)) without overflow
    return np.logaddexp(0.0, -np.asarray(y) * np.asarray(z))


def loss_and_slope(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logistic loss and its derivative in the logit, sharing one ``exp``."""
    t = -y * z
    e = np.exp(-np.abs(t))
    losses = np.maximum(t, 0.0) + np.log1p(e)
    sig = np.where(t >= 0, 1.0, e) / (1.0 + e)  # sigmoid(t)
    return losses, -y * sig


def loss(p: ModelParams, x, y):
    X, single = _as_batch(p, x)
    out = logistic_loss(_forward(p, X)[0], y)
    return float(out[0]) if single else out


def dloss_dz(z, y):
    """Derivative of the logistic loss with respect to the logit."""
    return -y * expit(-y * z)


def weighted_grad(p: ModelParams, X: np.ndarray, y: np.ndarray, coef: np.ndarray,
                  forward=None, slope=None) -> np.ndarray:
    """Gradient of ``sum_j coef[j, k] * loss_j`` for each column ``k`` of ``coef``.

    ``coef`` may be ``(m,)`` (returns a flat gradient) or ``(m, K)`` (returns
    ``(K, n_params)``). One forward pass serves every column; callers that
    already hold the forward cache and ``dloss_dz`` can pass them in.
    """
    coef = np.asarray(coef, dtype=np.float64)
    flat = coef.ndim == 1
    C = coef[:, None] if flat else coef
    if C.shape[0] != X.shape[0]:
        raise ShapeError("coefficient rows must match the batch size")
    if slope is None:
        z, cache = forward if forward is not None else _forward(p, X)
        slope = dloss_dz(z, y)
    else:
        cache = forward[1]
    G = C * slope[:, None]  # (m, K)
    if p.kind == LOGREG:
        out = np.empty((G.shape[1], p.d + 1))
        out[:, :-1] = (X.T @ G).T
        out[:, -1] = G.sum(axis=0)
    else:
        out = _mlp_backward(p, X, G, cache)
    return out[0] if flat else out


def _mlp_backward(p: ModelParams, X, G, cache) -> np.ndarray:
    W1, b1, W2, b2, w3, b3 = _unpack_mlp(p.theta, p.d)
    a1, h1, a2, h2 = cache
    K = G.shape[1]
    on1 = a1 > 0  # relu'(0) = 0
    on2 = a2 > 0
    d1s, rows = [], []
    for k in range(K):
        g = G[:, k:k + 1]
        d2 = (g * w3) * on2
        d1 = (d2 @ W2.T) * on1
        d1s.append(d1)
        rows.append([h1.T @ d2, d1.sum(axis=0), d2.sum(axis=0), h2.T @ g, g.sum(axis=0)])
    g_W1 = np.asarray(X.T @ np.hstack(d1s))  # (d, 8K)
    h = HIDDEN[0]
    out = []
    for k, (g_W2, g_b1, g_b2, g_w3, g_b3) in enumerate(rows):
        out.append(np.concatenate([g_W1[:, k * h:(k + 1) * h].ravel(), g_b1, g_W2.ravel(), g_b2,
                                   g_w3.ravel(), g_b3]))
    return np.array(out)


def forward(p: ModelParams, X: np.ndarray):
    """Logits plus the activation cache that ``weighted_grad`` can reuse."""
    return _forward(p, X)


def grad_loss(p: ModelParams, x, y) -> np.ndarray:
    """Gradient of the loss for one instance, or of the mean loss for a batch."""
    X, single = _as_batch(p, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    coef = np.full(X.shape[0], 1.0 / X.shape[0])
    return weighted_grad(p, X, y, coef)


def hard_error(p: ModelParams, x, y):
    """1 where ``y * f(x) <= 0`` (a zero logit counts as an error)."""
    X, single = _as_batch(p, x)
    z, _ = _forward(p, X)
    err = (np.asarray(y) * z <= 0).astype(np.int64)
    return int(err[0]) if single else err


def accuracy(p: ModelParams, X, y) -> float:
    return 1.0 - float(np.mean(hard_error(p, X, y)))


def save_checkpoint(path, p: ModelParams) -> None:
    """Text checkpoint; floats stored as hex so the round-trip is exact."""
    lines = [f"kind {p.kind}", f"d {p.d}", f"n {p.theta.size}"]
    lines += [float(v).hex() for v in p.theta]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> ModelParams:
    lines = Path(path).read_text().split("\n")
    kind = lines[0].split()[1]
    d = int(lines[1].split()[1])
    n = int(lines[2].split()[1])
    theta = np.array([float.fromhex(v) for v in lines[3:3 + n]])
    return ModelParams(kind, d, theta)
