"""Unlearning and retain losses with representation and parameter gradients.

Every loss is a mean over samples. ``rep_grads[n]`` is the gradient of
sample ``n``'s own term with respect to its representation (including the
path through the head for output-level losses), and ``param_grads`` is the
gradient of the mean, so on the representation-layer block

    param_grads = mean_n J(x_n)^T rep_grads[n].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DomainError, TrainingError
from .linalg import Projector, project_out
from .toymodel import ModelState, backward, forward_batch, log_softmax, per_sample_backward

SKIP_TOL = 1e-10


@dataclass
class LossGrad:
    value: float
    rep_grads: np.ndarray  # (N, hidden)
    param_grads: np.ndarray  # (n_params,)
    n_skipped: int = 0
    # upstream gradients kept for per-sample backward passes (CIR)
    _g_h: np.ndarray | None = None
    _g_logits: np.ndarray | None = None
    _H: np.ndarray | None = None
    _X: np.ndarray | None = None
    _active: np.ndarray | None = None

    def per_sample_param_grads(self, model: ModelState) -> np.ndarray:
        """Gradients of each sample's own term, ``(N_active, n_params)``."""
        act = self._active
        return per_sample_backward(model, self._X[act], self._H[act],
                                   None if self._g_h is None else self._g_h[act],
                                   None if self._g_logits is None else self._g_logits[act])


@dataclass(frozen=True)
class RmuTarget:
    control: np.ndarray  # unit vector u
    scale: float  # c

    def __post_init__(self):
        u = np.asarray(self.control, dtype=np.float64)
        if abs(np.linalg.norm(u) - 1.0) > 1e-10:
            raise DomainError("control vector must have unit norm")
        if not self.scale > 0:
            raise DomainError("RMU scale must be positive")
        object.__setattr__(self, "control", u)

    @property
    def vector(self) -> np.ndarray:
        return self.scale * self.control


def make_rmu_target(hidden: int, scale: float, seed: int, projector: Projector | None = None) -> RmuTarget:
    """Control vector drawn uniformly on the unit sphere.

    With ``projector`` the draw is made inside the projector's complement,
    i.e. the minor subspace.
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(hidden)
    if projector is not None:
        u = project_out(projector, u)
    return RmuTarget(u / np.linalg.norm(u), float(scale))


def default_rmu_scale(originals) -> float:
    """Five times the median representation norm on the forget set."""
    return 5.0 * float(np.median(np.linalg.norm(originals, axis=1)))


@dataclass(frozen=True)
class NpoConfig:
    beta: float
    ref_model: ModelState

    def __post_init__(self):
        if not self.beta > 0:
            raise DomainError("NPO beta must be positive")


def _finish(model, X, H, value, g_h, g_logits, n_used, active=None, n_skipped=0) -> LossGrad:
    if not np.isfinite(value):
        raise TrainingError("non-finite loss value")
    n = X.shape[0]
    if active is None:
        active = np.ones(n, dtype=bool)
    rep = np.zeros((n, model.hidden)) if g_h is None else g_h.copy()
    if g_logits is not None:
        rep = rep + g_logits @ model.Wout
    pg = backward(model, X, H,
                  None if g_h is None else g_h / n_used,
                  None if g_logits is None else g_logits / n_used)
    return LossGrad(float(value), rep, pg, n_skipped, g_h, g_logits, H, X, active)


def _labels_logp(model, X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    H, Z = forward_batch(model, X)
    if not np.all(np.isfinite(Z)):
        raise TrainingError("non-finite logits")
    logp = log_softmax(Z)
    y = np.asarray(y, dtype=np.int64)
    return X, H, logp, y


def loss_ga(model: ModelState, X, y) -> LossGrad:
    """Mean log-likelihood of the labels; minimising it is ascent on cross-entropy."""
    X, H, logp, y = _labels_logp(model, X, y)
    n = y.size
    idx = np.arange(n)
    onehot = np.zeros_like(logp)
    onehot[idx, y] = 1.0
    g_z = onehot - np.exp(logp)
    return _finish(model, X, H, logp[idx, y].mean(), None, g_z, n)


def _log_sigmoid(t):
    return -np.logaddexp(0.0, -t)


def _sigmoid(t):
    return np.exp(_log_sigmoid(t))


def loss_npo(model: ModelState, X, y, cfg: NpoConfig) -> LossGrad:
    """``-(2/beta) mean log sigmoid(-beta (log p_theta - log p_ref))``."""
    X, H, logp, y = _labels_logp(model, X, y)
    n = y.size
    idx = np.arange(n)
    _, Zr = forward_batch(cfg.ref_model, X)
    ratio = logp[idx, y] - log_softmax(Zr)[idx, y]
    value = -(2.0 / cfg.beta) * _log_sigmoid(-cfg.beta * ratio).mean()
    onehot = np.zeros_like(logp)
    onehot[idx, y] = 1.0
    weight = 2.0 * _sigmoid(cfg.beta * ratio)
    g_z = weight[:, None] * (onehot - np.exp(logp))
    return _finish(model, X, H, value, None, g_z, n)


def rep_target_terms(H, target: RmuTarget, projector: Projector | None = None):
    """Per-sample values and rep gradients of ``||a(h) - c u||^2``, ``a`` = identity or projection."""
    H = np.asarray(H, dtype=np.float64)
    if H.shape[-1] != target.control.shape[0]:
        raise DomainError("representation and control vector dimensions differ")
    a = H if projector is None else project_out(projector, H)
    r = a - target.vector
    vals = np.einsum("ij,ij->i", r, r)
    g = 2.0 * (r if projector is None else project_out(projector, r))
    return vals, g


def loss_rep_target(model: ModelState, X, target: RmuTarget, projector: Projector | None = None) -> LossGrad:
    """RMU, or RMU with minor-component projection when ``projector`` is given."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    H, _ = forward_batch(model, X)
    vals, g = rep_target_terms(H, target, projector)
    return _finish(model, X, H, vals.mean(), g, None, X.shape[0])


def orthogonality_terms(H, originals, projector: Projector | None = None):
    """Per-sample ReLU'd overlap ratios, rep gradients and the active mask.

    Samples whose (projected) original has norm <= 1e-10 are marked skipped.
    """
    H = np.asarray(H, dtype=np.float64)
    Ho = np.asarray(originals, dtype=np.float64)
    if H.shape != Ho.shape:
        raise DomainError("current and original representations must align")
    a_h = H if projector is None else project_out(projector, H)
    a_o = Ho if projector is None else project_out(projector, Ho)
    sq = np.einsum("ij,ij->i", a_o, a_o)
    keep = np.sqrt(sq) > SKIP_TOL
    safe = np.where(keep, sq, 1.0)
    ratio = np.einsum("ij,ij->i", a_h, a_o) / safe
    on = keep & (ratio > 0)
    vals = np.where(on, ratio, 0.0)
    g = np.where(on[:, None], a_o / safe[:, None], 0.0)
    return vals, g, keep


def loss_orthogonality(model: ModelState, X, originals, projector: Projector | None = None) -> LossGrad:
    """MLP Breaking, or its minor-component variant when ``projector`` is given."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    H, _ = forward_batch(model, X)
    vals, g, keep = orthogonality_terms(H, originals, projector)
    n_used = int(keep.sum())
    if n_used == 0:
        raise DegenerateError("every sample has a vanishing (projected) original representation")
    return _finish(model, X, H, vals[keep].mean(), g, None, n_used, keep, int((~keep).sum()))


def retain_loss(model: ModelState, X, kind: str = "cross_entropy", labels=None, originals=None) -> LossGrad:
    """``cross_entropy``: mean -log p(y|x); ``rep_norm``: mean ||h - h_o||^2."""
    if kind == "cross_entropy":
        if labels is None:
            raise DomainError("cross-entropy retain loss needs labels")
        X, H, logp, y = _labels_logp(model, X, labels)
        n = y.size
        idx = np.arange(n)
        onehot = np.zeros_like(logp)
        onehot[idx, y] = 1.0
        return _finish(model, X, H, -logp[idx, y].mean(), None, np.exp(logp) - onehot, n)
    if kind == "rep_norm":
        if originals is None:
            raise DomainError("rep-norm retain loss needs stored original representations")
        X = np.ascontiguousarray(X, dtype=np.float64)
        H, _ = forward_batch(model, X)
        diff = H - np.asarray(originals, dtype=np.float64)
        return _finish(model, X, H, np.einsum("ij,ij->i", diff, diff).mean(), 2.0 * diff, None, X.shape[0])
    raise DomainError(f"unknown retain loss kind {kind!r}")
