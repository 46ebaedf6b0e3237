"""Per-component diagnostics of how representations move.

All functions take representation matrices aligned row-by-row (same
samples, same order) and a :class:`~mcu_lab.linalg.Spectrum` whose rows are
the principal directions of the original representations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DomainError
from .linalg import Spectrum
from .serialize import write_csv, write_json


def explained_variance(spectrum: Spectrum) -> np.ndarray:
    var = np.asarray(spectrum.variances, dtype=np.float64)
    total = var.sum()
    if not total > 0:
        raise DomainError("all variances are zero")
    return var / total


def _aligned(*mats):
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if any(m.shape != mats[0].shape for m in mats):
        raise DomainError("representation matrices are not aligned")
    return mats


def change_ratio(h_o, h_u, spectrum: Spectrum, return_count: bool = False):
    """Per-component share of the absolute displacement, averaged over samples.

    Samples with no displacement along the retained components are left out
    of the average; ``return_count`` also returns how many were excluded.
    """
    h_o, h_u = _aligned(h_o, h_u)
    if spectrum.n_components < 1:
        raise DomainError("spectrum has no components")
    proj = np.abs((h_u - h_o) @ spectrum.components.T)
    tot = proj.sum(axis=1)
    ok = tot > 0
    if not ok.any():
        raise DegenerateError("no sample moved along the retained components")
    ratios = (proj[ok] / tot[ok, None]).mean(axis=0)
    ratios = ratios / ratios.sum()
    if return_count:
        return ratios, int((~ok).sum())
    return ratios


@dataclass
class RecoveryResult:
    values: np.ndarray  # per-k mean over valid samples (nan where none valid)
    valid_fraction: np.ndarray


def recovery_ratio(h_o, h_u, h_r, spectrum: Spectrum, floor: float = 0.05) -> RecoveryResult:
    """Fraction of the unlearning displacement along each component undone by the attack.

    Per sample ``<h_u - h_r, v_k> / <h_u - h_o, v_k>``; samples whose
    denominator is below ``floor`` times the component's RMS denominator are
    masked. Values are reported raw (no clipping).
    """
    h_o, h_u, h_r = _aligned(h_o, h_u, h_r)
    V = spectrum.components
    num = (h_u - h_r) @ V.T
    den = (h_u - h_o) @ V.T
    rms = np.sqrt((den**2).mean(axis=0))
    valid = (np.abs(den) >= floor * rms) & (rms > 0)
    if not valid.any():
        raise DegenerateError("no valid denominators for any component")
    safe = np.where(valid, den, 1.0)
    ratio = np.where(valid, num / safe, 0.0)
    count = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(count > 0, ratio.sum(axis=0) / np.maximum(count, 1), np.nan)
    return RecoveryResult(values, count / valid.shape[0])


def bin_histogram(values, n_bins: int) -> np.ndarray:
    """Sum of ``values`` over ``n_bins`` contiguous equal-count index bins.

    The last bin absorbs any remainder.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DomainError("no values to bin")
    if not 1 <= n_bins <= values.size:
        raise DomainError(f"n_bins={n_bins} must lie in [1, {values.size}]")
    size = values.size // n_bins
    edges = [i * size for i in range(n_bins)] + [values.size]
    return np.array([values[edges[i]:edges[i + 1]].sum() for i in range(n_bins)])


def snr_estimate(projections, B: int | None = None) -> np.ndarray:
    """``|mean| / (std / sqrt(B))`` per column of per-sample gradient projections.

    Zero spread with non-zero mean gives ``inf``; zero spread and zero mean
    gives 0.
    """
    P = np.asarray(projections, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if P.shape[0] < 2:
        raise DomainError("need at least two samples")
    B = P.shape[0] if B is None else B
    m = np.abs(P.mean(axis=0))
    s = P.std(axis=0, ddof=1)
    # spread below rounding of the mean counts as zero
    tiny = s <= 1e-14 * np.maximum(m, 1e-300)
    out = np.empty(P.shape[1])
    out[tiny] = np.where(m[tiny] > 0, np.inf, 0.0)
    out[~tiny] = m[~tiny] / (s[~tiny] / math.sqrt(B))
    return out


def predicted_snr(agreement, B: int) -> np.ndarray:
    rho = np.asarray(agreement, dtype=np.float64)
    return np.sqrt(B * rho / (1.0 - rho))


def relearn_gap(forget_acc: float, relearn_acc: float) -> float:
    for v in (forget_acc, relearn_acc):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"accuracy {v} outside [0, 1]")
    return relearn_acc - forget_acc


def decile_means(values, mask=None, fraction: float = 0.1):
    """Mean over the leading and trailing ``fraction`` of component indices.

    ``mask`` drops entries (e.g. components without valid recovery samples)
    before the deciles are formed.
    """
    values = np.asarray(values, dtype=np.float64)
    idx = np.arange(values.size)
    if mask is not None:
        idx = idx[np.asarray(mask, dtype=bool)]
    if idx.size == 0:
        raise DegenerateError("no entries left to form deciles")
    m = max(1, int(math.ceil(fraction * idx.size)))
    return float(values[idx[:m]].mean()), float(values[idx[-m:]].mean())


@dataclass
class GeometryReport:
    explained_variance: np.ndarray
    change_ratio: np.ndarray
    recovery_ratio: np.ndarray | None
    valid_fraction: np.ndarray | None
    bin_histogram: np.ndarray

    def to_dict(self) -> dict:
        return {
            "explained_variance": self.explained_variance,
            "change_ratio": self.change_ratio,
            "recovery_ratio": None if self.recovery_ratio is None else self.recovery_ratio,
            "valid_fraction": None if self.valid_fraction is None else self.valid_fraction,
            "bin_histogram": self.bin_histogram,
        }

    def write(self, json_path, csv_path) -> None:
        write_json(json_path, self.to_dict())
        K = self.explained_variance.size
        rec = self.recovery_ratio if self.recovery_ratio is not None else np.full(K, np.nan)
        vf = self.valid_fraction if self.valid_fraction is not None else np.full(K, np.nan)
        rows = [(k, float(self.explained_variance[k]), float(self.change_ratio[k]),
                 float(rec[k]), float(vf[k])) for k in range(K)]
        write_csv(csv_path, ["k", "explained_variance", "change_ratio", "recovery_ratio",
                             "valid_fraction"], rows)


def geometry_report(spectrum: Spectrum, h_o, h_u, h_r=None, n_bins: int = 8,
                    floor: float = 0.05) -> GeometryReport:
    ev = explained_variance(spectrum)
    cr = change_ratio(h_o, h_u, spectrum)
    rec = vf = None
    if h_r is not None:
        res = recovery_ratio(h_o, h_u, h_r, spectrum, floor)
        rec, vf = res.values, res.valid_fraction
    return GeometryReport(ev, cr, rec, vf, bin_histogram(cr, min(n_bins, cr.size)))
