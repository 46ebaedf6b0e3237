"""One-hidden-layer tanh network exposing its representation.

``h = tanh(W1 x + b1)`` is the representation every diagnostic looks at;
``z = Wout h + bout`` are class logits. Gradients are written out by hand
(see :mod:`mcu_lab._kernels`) and checked against finite differences in the
test-suite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from ._backend import kernels
from .errors import DomainError, ResourceError, TrainingError
from .serialize import dumps

JACOBIAN_LIMIT = 10**7


@dataclass(frozen=True)
class ModelState:
    W1: np.ndarray  # (hidden, d)
    b1: np.ndarray  # (hidden,)
    Wout: np.ndarray  # (classes, hidden)
    bout: np.ndarray  # (classes,)

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def classes(self) -> int:
        return self.Wout.shape[0]

    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.Wout.size + self.bout.size

    @property
    def n_rep_params(self) -> int:
        """Parameters upstream of the representation (``W1`` and ``b1``)."""
        return self.W1.size + self.b1.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.Wout.ravel(), self.bout])

    def with_flat(self, theta) -> "ModelState":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DomainError(f"expected {self.n_params} parameters, got {theta.shape}")
        h, d, c = self.hidden, self.d, self.classes
        o1 = h * d
        o2 = o1 + h
        o3 = o2 + c * h
        return ModelState(theta[:o1].reshape(h, d).copy(), theta[o1:o2].copy(),
                          theta[o2:o3].reshape(c, h).copy(), theta[o3:].copy())

    def to_dict(self) -> dict:
        return {
            "dims": {"d": self.d, "hidden": self.hidden, "classes": self.classes},
            "W1": self.W1.ravel().tolist(),
            "b1": self.b1.tolist(),
            "Wout": self.Wout.ravel().tolist(),
            "bout": self.bout.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelState":
        dims = doc["dims"]
        d, h, c = int(dims["d"]), int(dims["hidden"]), int(dims["classes"])
        return cls(np.asarray(doc["W1"], dtype=np.float64).reshape(h, d),
                   np.asarray(doc["b1"], dtype=np.float64).reshape(h),
                   np.asarray(doc["Wout"], dtype=np.float64).reshape(c, h),
                   np.asarray(doc["bout"], dtype=np.float64).reshape(c))


def save_model(path, model: ModelState) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(model.to_dict()))


def load_model(path) -> ModelState:
    with open(path) as fh:
        return ModelState.from_dict(json.load(fh))


def init_model(d: int, hidden: int, classes: int, seed: int, input_scale: float = 1.0) -> ModelState:
    """Gaussian weights and biases with standard deviation ``1/sqrt(fan_in)``.

    ``input_scale`` multiplies the first-layer weights; values below one keep
    the tanh units in their near-linear range.
    """
    if min(d, hidden, classes) < 1:
        raise DomainError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((hidden, d)) / np.sqrt(d) * input_scale
    b1 = rng.standard_normal(hidden) / np.sqrt(d)
    Wout = rng.standard_normal((classes, hidden)) / np.sqrt(hidden)
    bout = rng.standard_normal(classes) / np.sqrt(hidden)
    return ModelState(W1, b1, Wout, bout)


@dataclass(frozen=True)
class ForwardTrace:
    rep: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _rows(model: ModelState, X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.d:
        raise DomainError(f"input dimension {X.shape[1]} does not match model d={model.d}")
    return X


def forward_batch(model: ModelState, X):
    """``(H, logits)`` for every row of ``X``."""
    X = _rows(model, X)
    return kernels.forward_batch(model.W1, model.b1, model.Wout, model.bout, X)


def forward(model: ModelState, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d,):
        raise DomainError(f"expected a {model.d}-vector, got shape {x.shape}")
    H, Z = forward_batch(model, x)
    return ForwardTrace(H[0], Z[0], softmax(Z)[0])


def representations(model: ModelState, X) -> np.ndarray:
    return forward_batch(model, X)[0]


def backward(model: ModelState, X, H, g_h=None, g_logits=None) -> np.ndarray:
    """Flat parameter gradient given per-row upstream gradients.

    Rows are summed, so pass gradients already divided by the batch size
    when the loss is a mean.
    """
    X = _rows(model, X)
    n = X.shape[0]
    g_h = np.zeros((n, model.hidden)) if g_h is None else np.ascontiguousarray(g_h, dtype=np.float64)
    g_logits = (np.zeros((n, model.classes)) if g_logits is None
                else np.ascontiguousarray(g_logits, dtype=np.float64))
    dW1, db1, dWo, dbo = kernels.backward_batch(model.Wout, X, np.ascontiguousarray(H), g_h, g_logits)
    return np.concatenate([dW1.ravel(), db1, dWo.ravel(), dbo])


def per_sample_backward(model: ModelState, X, H, g_h=None, g_logits=None) -> np.ndarray:
    """``(N, n_params)`` matrix of per-row parameter gradients."""
    X = _rows(model, X)
    n = X.shape[0]
    g_h = np.zeros((n, model.hidden)) if g_h is None else np.ascontiguousarray(g_h, dtype=np.float64)
    g_logits = (np.zeros((n, model.classes)) if g_logits is None
                else np.ascontiguousarray(g_logits, dtype=np.float64))
    return kernels.per_sample_grads(model.Wout, X, np.ascontiguousarray(H), g_h, g_logits)


def rep_jacobian(model: ModelState, x) -> np.ndarray:
    """Explicit ``dh/dtheta`` at ``x`` as a ``(hidden, n_params)`` matrix.

    Only the ``W1`` and ``b1`` blocks are non-zero; the head sits downstream
    of the representation.
    """
    if model.hidden * model.n_params > JACOBIAN_LIMIT:
        raise ResourceError(f"Jacobian would hold {model.hidden * model.n_params} entries")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.d,):
        raise DomainError(f"expected a {model.d}-vector, got shape {x.shape}")
    h = np.tanh(model.W1 @ x + model.b1)
    slope = 1.0 - h * h
    hid, d = model.hidden, model.d
    J = np.zeros((hid, model.n_params))
    for i in range(hid):
        J[i, i * d:(i + 1) * d] = slope[i] * x
        J[i, hid * d + i] = slope[i]
    return J


def ntk_kernel(model: ModelState, x, x2) -> np.ndarray:
    """Representation NTK ``J(x) J(x2)^T`` in closed form.

    For this architecture it is diagonal: ``diag(D(x) D(x2)) * (x . x2 + 1)``.
    """
    if model.hidden * model.n_params > JACOBIAN_LIMIT:
        raise ResourceError("model too large for an explicit kernel")
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != (model.d,) or x2.shape != (model.d,):
        raise DomainError("input dimension mismatch")
    s1 = 1.0 - np.tanh(model.W1 @ x + model.b1) ** 2
    s2 = 1.0 - np.tanh(model.W1 @ x2 + model.b1) ** 2
    return np.diag(s1 * s2 * (x @ x2 + 1.0))


def ntk_scale(model: ModelState, X) -> float:
    """Mean diagonal of the kernel between distinct rows, an estimate of kappa."""
    X = _rows(model, X)
    H = representations(model, X)
    S = 1.0 - H * H
    G = X @ X.T + 1.0
    n = X.shape[0]
    off = ~np.eye(n, dtype=bool)
    vals = (S @ S.T / model.hidden) * G
    return float(vals[off].mean()) if n > 1 else float(vals[0, 0])


def accuracy_expected(model: ModelState, X, labels) -> float:
    """Mean softmax probability (temperature 1) of the correct class."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DomainError("cannot score an empty batch")
    _, Z = forward_batch(model, X)
    P = softmax(Z)
    return float(P[np.arange(labels.size), labels].mean())


def cross_entropy(model: ModelState, X, labels) -> float:
    _, Z = forward_batch(model, X)
    labels = np.asarray(labels, dtype=np.int64)
    return float(-log_softmax(Z)[np.arange(labels.size), labels].mean())


def pretrain(model: ModelState, X, labels, steps: int, lr: float, momentum: float = 0.9,
             min_accuracy: float | None = None, log: list | None = None) -> ModelState:
    """Full-batch gradient descent with heavy-ball momentum on cross-entropy.

    Raises :class:`TrainingError` on a non-finite loss, or when
    ``min_accuracy`` is given and the final expected accuracy falls short.
    """
    if lr < 0:
        raise DomainError("lr must be non-negative")
    X = _rows(model, X)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    theta = model.flat()
    vel = np.zeros_like(theta)
    onehot = np.eye(model.classes)[labels]
    cur = model
    for step in range(1, steps + 1):
        H, Z = forward_batch(cur, X)
        logp = log_softmax(Z)
        loss = -logp[np.arange(n), labels].mean()
        if not np.isfinite(loss):
            raise TrainingError("pretraining diverged", step)
        if log is not None:
            log.append(float(loss))
        g = backward(cur, X, H, None, (np.exp(logp) - onehot) / n)
        vel = momentum * vel - lr * g
        theta = theta + vel
        cur = model.with_flat(theta)
    if min_accuracy is not None:
        acc = accuracy_expected(cur, X, labels)
        if acc < min_accuracy:
            raise TrainingError(f"pretraining reached expected accuracy {acc:.3f} < {min_accuracy}")
    return cur if steps > 0 else replace(model)
