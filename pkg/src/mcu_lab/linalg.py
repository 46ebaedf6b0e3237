"""Spectrum extraction and minor-component projection.

Representations are handled as plain ``(N, d)`` float64 arrays. A
:class:`Spectrum` holds the mean, the leading right singular vectors of the
centered data and their sample variances; a :class:`Projector` holds an
orthonormal basis of directions to remove.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError

DROP_TOL = 1e-10
MEAN_TOL = 1e-12


def as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DomainError(f"expected a 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError("matrix contains non-finite entries")
    return X


@dataclass(frozen=True)
class Spectrum:
    mean: np.ndarray
    components: np.ndarray  # (K, d), orthonormal rows
    variances: np.ndarray  # (K,), non-increasing

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def truncate(self, K: int) -> "Spectrum":
        if K > self.n_components:
            raise DomainError(f"K={K} exceeds the {self.n_components} stored components")
        return Spectrum(self.mean, self.components[:K], self.variances[:K])

    def to_dict(self, include_mean: bool = False) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "variances": self.variances.tolist(),
            "include_mean": bool(include_mean),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Spectrum":
        mean = np.asarray(doc["mean"], dtype=np.float64)
        comps = np.asarray(doc["components"], dtype=np.float64).reshape(-1, mean.shape[0])
        var = np.asarray(doc["variances"], dtype=np.float64)
        if var.shape[0] != comps.shape[0]:
            raise DomainError("variances and components disagree in length")
        return cls(mean, comps, var)


@dataclass(frozen=True)
class Projector:
    """Orthogonal-complement map ``h -> h - B^T B h`` for orthonormal rows ``B``."""

    basis: np.ndarray  # (M, d)
    include_mean: bool = False

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    def matrix(self) -> np.ndarray:
        """Dense ``d x d`` form of the complement projector."""
        return np.eye(self.dim) - self.basis.T @ self.basis

    def __call__(self, h):
        return project_out(self, h)


def identity_projector(d: int) -> Projector:
    return Projector(np.zeros((0, d)), include_mean=False)


def center(X):
    """Return ``(mean, X - mean)``; raises on an empty matrix."""
    X = as_matrix(X)
    if X.shape[0] == 0:
        raise DomainError("cannot center an empty matrix")
    mean = X.mean(axis=0)
    return mean, X - mean


def _fix_signs(V: np.ndarray) -> np.ndarray:
    # largest-magnitude coordinate of every row made positive
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=1)
    signs = np.sign(V[np.arange(V.shape[0]), idx])
    signs[signs == 0] = 1.0
    return V * signs[:, None]


def _variance_scale(n_rows: int) -> float:
    return 1.0 / max(n_rows - 1, 1)


def exact_svd(X, K: int, mean=None) -> Spectrum:
    """Top-``K`` right singular vectors of already-centered ``X``.

    ``mean`` is only carried along into the returned spectrum; it defaults
    to zeros.
    """
    X = as_matrix(X)
    n, d = X.shape
    if K < 0 or K > min(n, d):
        raise DomainError(f"K={K} must lie in [0, min(rows, cols)={min(n, d)}]")
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    comps = _fix_signs(Vt[:K].copy())
    variances = s[:K] ** 2 * _variance_scale(n)
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64)
    return Spectrum(mean, comps, variances)


def randomized_svd(X, K: int, oversample: int = 10, power_iters: int = 4, seed: int = 0,
                   mean=None) -> Spectrum:
    """Halko-style randomized SVD of centered ``X`` with subspace iteration.

    Each power iteration re-orthonormalises with QR, so accuracy does not
    collapse for large ``power_iters``.
    """
    X = as_matrix(X)
    n, d = X.shape
    if K < 0:
        raise DomainError("K must be non-negative")
    if K + oversample > d:
        raise DomainError(f"K + oversample = {K + oversample} exceeds cols = {d}")
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64)
    if K == 0:
        return Spectrum(mean, np.zeros((0, d)), np.zeros(0))
    rng = np.random.default_rng(seed)
    ell = min(K + oversample, n)
    omega = rng.standard_normal((d, ell))
    Q, _ = np.linalg.qr(X @ omega)
    for _ in range(power_iters):
        Z, _ = np.linalg.qr(X.T @ Q)
        Q, _ = np.linalg.qr(X @ Z)
    B = Q.T @ X
    _, s, Vt = np.linalg.svd(B, full_matrices=False)
    k_eff = min(K, Vt.shape[0])
    comps = np.zeros((K, d))
    comps[:k_eff] = Vt[:k_eff]
    var = np.zeros(K)
    var[:k_eff] = s[:k_eff] ** 2 * _variance_scale(n)
    return Spectrum(mean, _fix_signs(comps), var)


def spectrum_of(H, K: int | None = None, method: str = "randomized", seed: int = 0,
                oversample: int = 10, power_iters: int = 4) -> Spectrum:
    """Center ``H`` and extract its top-``K`` spectrum (all components by default)."""
    mean, Hc = center(H)
    n, d = Hc.shape
    if K is None:
        K = min(n, d)
    if method == "exact" or K + oversample > d:
        return exact_svd(Hc, K, mean=mean)
    return randomized_svd(Hc, K, oversample, power_iters, seed, mean=mean)


def _gram_schmidt(vectors: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalisation pass.

    Vectors whose residual norm falls below ``DROP_TOL`` are dropped.
    """
    kept: list[np.ndarray] = []
    for v in vectors:
        r = np.array(v, dtype=np.float64)
        for _ in range(2):
            for q in kept:
                r = r - (q @ r) * q
        norm = np.linalg.norm(r)
        if norm < DROP_TOL:
            continue
        kept.append(r / norm)
    d = vectors.shape[1]
    return np.array(kept).reshape(len(kept), d)


def build_projector(spectrum: Spectrum, K: int, include_mean: bool = True) -> Projector:
    """Removal basis of the normalized mean (optional) and the top-``K`` components."""
    if K < 0 or K > spectrum.n_components:
        raise DomainError(f"K={K} exceeds the {spectrum.n_components} available components")
    comps = spectrum.components[:K]
    mean_norm = float(np.linalg.norm(spectrum.mean))
    if include_mean and mean_norm > MEAN_TOL:
        stacked = np.vstack([spectrum.mean / mean_norm, comps])
        return Projector(_gram_schmidt(stacked), include_mean=True)
    return Projector(np.array(comps, dtype=np.float64).reshape(K, spectrum.dim), include_mean=False)


def project_out(p: Projector, h):
    """Remove the span of ``p.basis`` from ``h`` (a vector or rows of a matrix)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != p.dim:
        raise DomainError(f"dimension mismatch: vector has {h.shape[-1]}, projector has {p.dim}")
    if p.rank == 0:
        return h.copy()
    B = p.basis
    return h - (h @ B.T) @ B


def subspace_angle(A, B) -> float:
    """Largest principal angle between the row spans of ``A`` and ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape != B.shape:
        raise DomainError(f"rank/shape mismatch: {A.shape} vs {B.shape}")
    if A.shape[0] == 0:
        return 0.0
    # arctan2 of sine and cosine keeps precision near 0 and pi/2
    cos = np.linalg.svd(A @ B.T, compute_uv=False).min()
    resid = A - (A @ B.T) @ B
    sin = np.linalg.svd(resid, compute_uv=False).max()
    return float(np.arctan2(sin, min(cos, 1.0)))


# --- serialization -------------------------------------------------------

def projector_document(spectrum: Spectrum, K: int, include_mean: bool) -> dict:
    return spectrum.truncate(K).to_dict(include_mean=include_mean)


def projector_from_document(doc: dict) -> Projector:
    spec = Spectrum.from_dict(doc)
    return build_projector(spec, spec.n_components, bool(doc.get("include_mean", False)))


def save_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_spectrum(path) -> Spectrum:
    return Spectrum.from_dict(json.loads(Path(path).read_text()))


def write_matrix_csv(path, X, fmt: str = "%.17g") -> None:
    X = as_matrix(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"c{j}" for j in range(X.shape[1])])
        for row in X:
            w.writerow([fmt % v for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DomainError(f"{path}: empty CSV")
    header = rows[0]
    if header != [f"c{j}" for j in range(len(header))]:
        raise DomainError(f"{path}: header must be c0,c1,...")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    return data.reshape(len(rows) - 1, len(header))
