"""Synthetic representations with a prescribed spectrum and context structure.

Coordinate ``k`` of a sample drawn from context ``c`` is
``s_k(c) + eps_k`` where ``Var(s_k) = rho_k * sigma_k^2`` is shared by every
sample of the context and ``Var(eps_k) = (1 - rho_k) * sigma_k^2`` is
sample-specific. Directions are the canonical axes of the generator frame;
downstream analysis never relies on that and re-estimates them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


def make_spectrum(d: int, kind: str = "geometric", param=0.5) -> np.ndarray:
    """Variance profile of length ``d``.

    ``kind`` is ``"geometric"`` (``param`` = rate in (0, 1), first entry 1),
    ``"power_law"`` (``param`` = exponent > 0, entries ``(k+1)^-param``) or
    ``"explicit"`` (``param`` = the sequence itself).
    """
    if kind == "explicit":
        var = np.asarray(param, dtype=np.float64)
        if var.ndim != 1 or var.size < 1:
            raise DomainError("explicit spectrum must be a non-empty sequence")
        if np.any(var <= 0) or np.any(np.diff(var) > 0):
            raise DomainError("explicit spectrum must be positive and non-increasing")
        return var
    if d < 2:
        raise DomainError("spectrum needs d >= 2")
    k = np.arange(d, dtype=np.float64)
    if kind == "geometric":
        if not 0.0 < param < 1.0:
            raise DomainError(f"geometric rate must lie in (0, 1), got {param}")
        return float(param) ** k
    if kind == "power_law":
        if not param > 0:
            raise DomainError(f"power-law exponent must be positive, got {param}")
        return (k + 1.0) ** (-float(param))
    raise DomainError(f"unknown spectrum profile {kind!r}")


@dataclass(frozen=True)
class SpectralConfig:
    variances: np.ndarray
    agreement: np.ndarray
    noise_floor: float = 0.0
    n_contexts: int = 20
    mean: np.ndarray | None = None

    def __post_init__(self):
        var = np.asarray(self.variances, dtype=np.float64)
        rho = np.asarray(self.agreement, dtype=np.float64)
        if rho.ndim == 0:
            rho = np.full_like(var, float(rho))
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "agreement", rho)
        if var.shape != rho.shape:
            raise DomainError("variances and agreement must have the same length")
        if np.any(np.diff(var) > 0) or np.any(var < 0):
            raise DomainError("variances must be non-negative and non-increasing")
        if np.any(rho < 0) or np.any(rho >= 1):
            raise DomainError("agreement values must lie in [0, 1)")
        if not 0 <= self.noise_floor < var[0]:
            raise DomainError("noise floor must satisfy 0 <= tau^2 < variances[0]")
        if self.n_contexts < 1:
            raise DomainError("n_contexts must be >= 1")
        if self.mean is not None:
            m = np.asarray(self.mean, dtype=np.float64)
            if m.shape != var.shape:
                raise DomainError("mean must be a d-vector")
            object.__setattr__(self, "mean", m)

    @property
    def dims(self) -> int:
        return self.variances.shape[0]


def mixed_agreement(d: int, high: float = 0.9, low: float = 0.05) -> np.ndarray:
    """Agreement falling log-linearly from ``high`` (leading) to ``low`` (trailing)."""
    return np.exp(np.linspace(np.log(high), np.log(low), d))


@dataclass
class RepBatch:
    data: np.ndarray
    sample_ids: np.ndarray
    context_ids: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.context_ids = np.asarray(self.context_ids, dtype=np.int64)
        n = self.data.shape[0]
        if self.sample_ids.shape != (n,) or self.context_ids.shape != (n,):
            raise DomainError("ids must match the number of rows")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("representation batch has non-finite entries")

    def __len__(self):
        return self.data.shape[0]

    def subset(self, idx) -> "RepBatch":
        idx = np.asarray(idx)
        return RepBatch(self.data[idx], self.sample_ids[idx], self.context_ids[idx])


def sample_representations(cfg: SpectralConfig, N: int, seed: int) -> RepBatch:
    if N < 2 * cfg.n_contexts:
        raise DomainError(f"N={N} must be at least 2 * n_contexts = {2 * cfg.n_contexts}")
    rng = np.random.default_rng(seed)
    d = cfg.dims
    sd = np.sqrt(cfg.variances)
    shared_sd = sd * np.sqrt(cfg.agreement)
    own_sd = sd * np.sqrt(1.0 - cfg.agreement)
    context_ids = rng.permutation(np.arange(N) % cfg.n_contexts)
    shared = rng.standard_normal((cfg.n_contexts, d)) * shared_sd
    noise = rng.standard_normal((N, d)) * own_sd
    data = shared[context_ids] + noise
    if cfg.mean is not None:
        data = data + cfg.mean
    return RepBatch(data, np.arange(N), context_ids)


def agreement_estimate(batch: RepBatch, directions=None) -> np.ndarray:
    """Between-context share of variance along each direction.

    The raw variance of context means is corrected for the within-context
    noise it contains, so the estimate is unbiased for the generator's rho.
    """
    X = batch.data if directions is None else batch.data @ np.asarray(directions).T
    X = X - X.mean(axis=0)
    ctx = batch.context_ids
    labels, inv, counts = np.unique(ctx, return_inverse=True, return_counts=True)
    sums = np.zeros((labels.size, X.shape[1]))
    np.add.at(sums, inv, X)
    means = sums / counts[:, None]
    within = ((X - means[inv]) ** 2).sum(axis=0) / (X.shape[0] - labels.size)
    between = (means**2).mean(axis=0) - within * np.mean(1.0 / counts)
    total = X.var(axis=0, ddof=1)
    return between / total


@dataclass
class Task:
    """Inputs with class labels from a fixed linear rule on leading coordinates."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    rule: np.ndarray  # (n_classes, n_top)
    center: np.ndarray  # (n_top,)
    context_ids: np.ndarray = field(default=None)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_top(self) -> int:
        return self.rule.shape[1]

    def apply_rule(self, X) -> np.ndarray:
        return rule_labels(self.rule, self.center, X)

    def subset(self, idx) -> "Task":
        idx = np.asarray(idx)
        ctx = None if self.context_ids is None else self.context_ids[idx]
        return Task(self.inputs[idx], self.labels[idx], self.n_classes, self.rule, self.center, ctx)


def rule_labels(rule, center, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    n_classes, n_top = rule.shape
    if n_classes == 1:
        return np.zeros(X.shape[0], dtype=np.int64)
    return np.argmax((X[:, :n_top] - center) @ rule.T, axis=1).astype(np.int64)


def _class_directions(n_classes: int, n_top: int, rng) -> np.ndarray:
    """Equiangular class directions in a random orientation of ``R^n_top``.

    A regular simplex when ``n_top >= n_classes - 1``, otherwise a regular
    polygon in a random plane, so no class is shadowed by the others.
    """
    if n_classes == 1:
        return np.zeros((1, n_top))
    if n_top >= n_classes - 1:
        # centered basis vectors of R^C span a (C-1)-dim regular simplex
        E = np.eye(n_classes) - 1.0 / n_classes
        U = np.linalg.svd(E)[0][:, :n_classes - 1]
        verts = E @ U
    elif n_top >= 2:
        ang = 2 * np.pi * np.arange(n_classes) / n_classes
        verts = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        raise DomainError(f"{n_classes} classes need at least 2 label coordinates, got {n_top}")
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    Q, _ = np.linalg.qr(rng.standard_normal((n_top, n_top)))
    return verts @ Q[:verts.shape[1]]


def make_task(batch: RepBatch, n_classes: int, seed: int, n_top: int | None = None,
              center=None) -> Task:
    """Label ``batch`` by ``argmax(W (x_top - center))`` over its top ``ceil(d/8)`` coordinates.

    Class directions are equiangular after scaling each coordinate by the
    batch's spread, so every class receives a comparable share of samples.
    ``center`` defaults to the batch's own mean on the label coordinates;
    pass an explicit one to label a second batch with the same rule.
    """
    if n_classes < 1:
        raise DomainError("n_classes must be >= 1")
    d = batch.data.shape[1]
    if n_top is None:
        n_top = max(1, math.ceil(d / 8))
    rng = np.random.default_rng(seed)
    top = batch.data[:, :n_top]
    scale = top.std(axis=0) if top.shape[0] > 1 else np.ones(n_top)
    scale = np.where(scale > 0, scale, 1.0)
    rule = _class_directions(n_classes, n_top, rng) / scale
    if center is None:
        center = top.mean(axis=0)
    center = np.asarray(center, dtype=np.float64)
    labels = rule_labels(rule, center, batch.data)
    return Task(batch.data.copy(), labels, n_classes, rule, center, batch.context_ids.copy())


def relabel(task: Task, batch: RepBatch) -> Task:
    """Label another batch with ``task``'s rule and centering."""
    labels = task.apply_rule(batch.data)
    return Task(batch.data.copy(), labels, task.n_classes, task.rule, task.center,
                batch.context_ids.copy())


@dataclass(frozen=True)
class TaskSplit:
    forget_T: np.ndarray
    forget_V: np.ndarray
    retain: np.ndarray

    @property
    def forget(self) -> np.ndarray:
        return np.sort(np.concatenate([self.forget_T, self.forget_V]))


def split_task(N_forget: int, seed: int, N_retain: int = 0) -> TaskSplit:
    """Random 80/20 split of the forget indices into training and held-out parts."""
    if N_forget < 5:
        raise DomainError("need at least 5 forget samples to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(N_forget)
    n_T = int(math.floor(0.8 * N_forget + 0.5))
    return TaskSplit(np.sort(perm[:n_T]), np.sort(perm[n_T:]), np.arange(N_retain))


# --- CSV ---------------------------------------------------------------------

def write_batch_csv(path, batch: RepBatch) -> None:
    d = batch.data.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "context_id"] + [f"c{j}" for j in range(d)])
        for sid, cid, row in zip(batch.sample_ids, batch.context_ids, batch.data):
            w.writerow([int(sid), int(cid)] + ["%.17g" % v for v in row])


def read_batch_csv(path) -> RepBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[:2] != ["sample_id", "context_id"]:
        raise DomainError(f"{path}: expected sample_id,context_id,c0,... header")
    body = rows[1:]
    d = len(header) - 2
    data = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), d)
    return RepBatch(data, [int(r[0]) for r in body], [int(r[1]) for r in body])
