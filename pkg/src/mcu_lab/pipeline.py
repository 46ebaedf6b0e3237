"""Unlearning runs, relearning attacks and the closed-form NTK simulator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import AttackError, DegenerateError, DomainError, TrainingError
from .linalg import Projector, Spectrum, build_projector, center, exact_svd, identity_projector, \
    project_out, randomized_svd, spectrum_of
from .losses import (NpoConfig, RmuTarget, default_rmu_scale, loss_ga, loss_npo, loss_orthogonality,
                     loss_rep_target, make_rmu_target, retain_loss)
from .serialize import write_csv, write_json
from .synth import Task, TaskSplit
from .toymodel import ModelState, accuracy_expected, forward_batch, log_softmax, representations

LOSS_KINDS = ("ga", "npo", "rmu", "mlp_breaking")
DEFAULT_RETAIN = {"ga": "cross_entropy", "npo": "cross_entropy", "rmu": "rep_norm",
                  "mlp_breaking": "rep_norm"}


@dataclass
class Scenario:
    """Forget and retain tasks plus the T/V split of the forget set."""

    forget: Task
    retain: Task
    split: TaskSplit

    @property
    def forget_X(self):
        return self.forget.inputs

    def part(self, name: str):
        if name == "T":
            idx = self.split.forget_T
        elif name == "V":
            idx = self.split.forget_V
        else:
            raise DomainError(f"unknown part {name!r}")
        return self.forget.inputs[idx], self.forget.labels[idx]


def _trainable_mask(model: ModelState, trainable: str) -> np.ndarray:
    mask = np.zeros(model.n_params, dtype=bool)
    if trainable == "all":
        mask[:] = True
    elif trainable == "rep":
        mask[:model.n_rep_params] = True
    else:
        raise DomainError(f"trainable must be 'all' or 'rep', got {trainable!r}")
    return mask


# --- projector extraction ------------------------------------------------------

def extract_projector(model_o: ModelState, forget_X, K: int, include_mean: bool, seed: int = 0,
                      oversample: int = 10, power_iters: int = 4) -> tuple[Projector, Spectrum]:
    """Principal directions of the original model's forget-set representations.

    Returns the removal projector and the spectrum it was built from.
    """
    H = representations(model_o, forget_X)
    if H.shape[0] == 0:
        raise DomainError("forget set is empty")
    if K == 0 and not include_mean:
        mean, _ = center(H)
        return identity_projector(H.shape[1]), Spectrum(mean, np.zeros((0, H.shape[1])), np.zeros(0))
    spec = spectrum_of(H, K, method="randomized", seed=seed, oversample=oversample,
                       power_iters=power_iters)
    return build_projector(spec, K, include_mean), spec


# --- optimizers ----------------------------------------------------------------

def sam_step(theta, grad_fn, lr: float, radius: float):
    """One sharpness-aware step: gradient taken at ``theta + radius * g / ||g||``.

    Falls back to a plain step when ``||g|| < 1e-12``.
    """
    if not radius > 0:
        raise DomainError("SAM radius must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(grad_fn(theta), dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm < 1e-12:
        return theta - lr * g
    g_adv = np.asarray(grad_fn(theta + radius * g / norm), dtype=np.float64)
    return theta - lr * g_adv


def cir_filter(per_sample_grads, K_g: int, seed: int = 0) -> np.ndarray:
    """Mean gradient after removing the top-``K_g`` PCs of the per-sample gradients.

    Components come from the centered per-sample gradients, so the shared
    mean direction is kept unless it happens to align with a PC.
    """
    G = np.asarray(per_sample_grads, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] < 2:
        raise DomainError("CIR needs per-sample gradients from at least two samples")
    if not 0 <= K_g < G.shape[0]:
        raise DomainError(f"K_g={K_g} must be below the batch size {G.shape[0]}")
    mean, Gc = center(G)
    if K_g == 0:
        return mean
    if K_g + 10 <= G.shape[1]:
        spec = randomized_svd(Gc, K_g, oversample=10, power_iters=4, seed=seed)
    else:
        spec = exact_svd(Gc, K_g)
    # rank-deficient batches leave zero rows; drop them
    basis = spec.components[np.linalg.norm(spec.components, axis=1) > 0.5]
    proj = Projector(basis)
    return project_out(proj, G).mean(axis=0)


# --- unlearning ---------------------------------------------------------------

@dataclass
class UnlearnConfig:
    loss: str = "rmu"
    mcu: bool = False
    K: int = 4
    include_mean: bool = True
    beta: float = 0.1
    rmu_scale: float | None = None
    retain_kind: str | None = None
    retain_weight: float = 1.0
    lr: float = 0.05
    max_steps: int = 200
    threshold: float = 1.5
    forget_target: float | None = None
    optimizer: str = "sgd"
    sam_radius: float = 0.05
    cir_k: int = 2
    batch_size: int | None = None
    trainable: str = "rep"
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise DomainError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.mcu and self.loss not in ("rmu", "mlp_breaking"):
            raise DomainError("minor-component projection applies to rmu and mlp_breaking only")
        if not self.lr > 0:
            raise DomainError("lr must be positive")
        if self.threshold < 1:
            raise DomainError("termination threshold ratio must be >= 1")
        if self.retain_weight < 0:
            raise DomainError("retain weight must be non-negative")
        if self.optimizer not in ("sgd", "sam", "cir"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer == "cir" and self.batch_size is None:
            raise DomainError("CIR needs a minibatch size")
        if self.max_steps < 0:
            raise DomainError("max_steps must be >= 0")

    @property
    def retain(self) -> str:
        return self.retain_kind or DEFAULT_RETAIN[self.loss]

    @property
    def label(self) -> str:
        name = {"ga": "GA", "npo": "NPO", "rmu": "RMU", "mlp_breaking": "MLP Breaking"}[self.loss]
        if self.optimizer == "sam":
            name += " + SAM"
        elif self.optimizer == "cir":
            name += " + CIR"
        if self.mcu:
            name += " + MCU"
        return name


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    unlearn_loss: list = field(default_factory=list)
    retain_loss: list = field(default_factory=list)
    forget_acc: list = field(default_factory=list)
    retain_acc: list = field(default_factory=list)
    stop_reason: str = "max_steps"

    def append(self, step, ul, rl, fa, ra):
        if self.steps and step <= self.steps[-1]:
            raise DomainError("trajectory steps must increase")
        self.steps.append(step)
        self.unlearn_loss.append(ul)
        self.retain_loss.append(rl)
        self.forget_acc.append(fa)
        self.retain_acc.append(ra)

    def __len__(self):
        return len(self.steps)

    def write_csv(self, path) -> None:
        rows = zip(self.steps, self.unlearn_loss, self.retain_loss, self.forget_acc, self.retain_acc)
        write_csv(path, ["step", "unlearn_loss", "retain_loss", "forget_acc", "retain_acc"],
                  [(s, float(a), float(b), float(c), float(d)) for s, a, b, c, d in rows])


@dataclass
class UnlearnSetup:
    """Fixed ingredients of an unlearning objective, resolved once per run."""

    cfg: UnlearnConfig
    projector: Projector | None
    target: RmuTarget | None
    npo: NpoConfig | None
    forget_orig: np.ndarray
    retain_orig: np.ndarray


def prepare_unlearning(model_o: ModelState, scenario: Scenario, cfg: UnlearnConfig,
                       projector: Projector | None = None) -> UnlearnSetup:
    forget_X = scenario.forget.inputs[scenario.split.forget]
    H_f = representations(model_o, forget_X)
    H_r = representations(model_o, scenario.retain.inputs)
    if cfg.mcu and projector is None:
        projector, _ = extract_projector(model_o, forget_X, cfg.K, cfg.include_mean, seed=cfg.seed)
    if not cfg.mcu:
        projector = None
    target = None
    if cfg.loss == "rmu":
        scale = cfg.rmu_scale if cfg.rmu_scale is not None else default_rmu_scale(H_f)
        target = make_rmu_target(model_o.hidden, scale, cfg.seed, projector=projector)
    npo = NpoConfig(cfg.beta, model_o) if cfg.loss == "npo" else None
    return UnlearnSetup(cfg, projector, target, npo, H_f, H_r)


def unlearn_loss(setup: UnlearnSetup, model: ModelState, X, y, originals):
    kind = setup.cfg.loss
    if kind == "ga":
        return loss_ga(model, X, y)
    if kind == "npo":
        return loss_npo(model, X, y, setup.npo)
    if kind == "rmu":
        return loss_rep_target(model, X, setup.target, setup.projector)
    return loss_orthogonality(model, X, originals, setup.projector)


def _batch(rng, n, size):
    if size is None or size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def run_unlearning(model_o: ModelState, scenario: Scenario, cfg: UnlearnConfig,
                   projector: Projector | None = None) -> tuple[ModelState, Trajectory]:
    """Minimise ``unlearn + retain_weight * retain`` on the whole forget set ``T u V``.

    Stops after ``max_steps`` or once the retain cross-entropy exceeds
    ``threshold`` times its initial value (the utility monitor), or once
    forget expected accuracy reaches ``forget_target`` when that is set.
    """
    setup = prepare_unlearning(model_o, scenario, cfg, projector)
    traj = Trajectory()
    if cfg.max_steps == 0:
        return model_o, traj
    f_idx = scenario.split.forget
    Xf, yf = scenario.forget.inputs[f_idx], scenario.forget.labels[f_idx]
    Xr, yr = scenario.retain.inputs, scenario.retain.labels
    mask = _trainable_mask(model_o, cfg.trainable)
    rng = np.random.default_rng(cfg.seed)
    base_monitor = _retain_ce(model_o, Xr, yr)[0]

    model = model_o
    theta = model_o.flat()
    for step in range(1, cfg.max_steps + 1):
        bf = _batch(rng, Xf.shape[0], cfg.batch_size)
        br = _batch(rng, Xr.shape[0], cfg.batch_size)
        state = {}

        def grad_fn(th, filt=False):
            m = model_o.with_flat(th)
            lu = unlearn_loss(setup, m, Xf[bf], yf[bf], setup.forget_orig[bf])
            lr_ = retain_loss(m, Xr[br], setup.cfg.retain, labels=yr[br], originals=setup.retain_orig[br])
            gu = lu.param_grads
            if filt:
                G = lu.per_sample_param_grads(m)[:, mask]
                gu = np.zeros_like(gu)
                gu[mask] = cir_filter(G, cfg.cir_k, seed=cfg.seed + step)
            state.setdefault("value", lu.value)
            g = gu + cfg.retain_weight * lr_.param_grads
            return np.where(mask, g, 0.0)

        try:
            if cfg.optimizer == "sam":
                theta = sam_step(theta, grad_fn, cfg.lr, cfg.sam_radius)
            else:
                theta = theta - cfg.lr * grad_fn(theta, filt=cfg.optimizer == "cir")
        except DegenerateError:
            raise
        except TrainingError as exc:
            raise TrainingError(str(exc), step) from exc
        if not np.all(np.isfinite(theta)):
            raise TrainingError("non-finite parameters", step)
        model = model_o.with_flat(theta)
        monitor, r_acc = _retain_ce(model, Xr, yr)
        f_acc = accuracy_expected(model, Xf, yf)
        if not (np.isfinite(monitor) and np.isfinite(state["value"])):
            raise TrainingError("non-finite loss", step)
        traj.append(step, state["value"], monitor, f_acc, r_acc)
        if monitor > cfg.threshold * base_monitor:
            traj.stop_reason = "retain_threshold"
            break
        if cfg.forget_target is not None and f_acc <= cfg.forget_target:
            traj.stop_reason = "forget_target"
            break
    return model, traj


def _retain_ce(model, X, y):
    _, Z = forward_batch(model, X)
    logp = log_softmax(Z)
    idx = np.arange(len(y))
    return float(-logp[idx, y].mean()), float(np.exp(logp[idx, y]).mean())


# --- relearning attack ----------------------------------------------------------

@dataclass
class AttackConfig:
    epochs: int = 30
    lr: float | None = None  # None: use the unlearning lr
    smoothing_window: int = 3
    objective: str = "rtt_ce"
    batch_size: int | None = None
    trainable: str = "rep"
    seed: int = 0

    def __post_init__(self):
        if self.objective not in ("rtt_ce", "adaptive_rep_mse"):
            raise DomainError(f"unknown attack objective {self.objective!r}")
        if self.smoothing_window < 1 or (self.epochs > 0 and self.smoothing_window > self.epochs):
            raise DomainError("smoothing window must lie in [1, epochs]")
        if self.lr is not None and not self.lr > 0:
            raise DomainError("attack lr must be positive")


@dataclass
class AttackReport:
    forget_acc: float
    relearn_acc: float
    delta: float
    acc_curve: np.ndarray  # per epoch, on V
    smoothed_curve: np.ndarray  # moving average, nan before the first full window
    recovery_curve: np.ndarray | None  # (epochs, K)
    valid_fraction: np.ndarray | None  # (epochs, K)
    snr_curve: np.ndarray | None = None  # (epochs, K)
    final_model: ModelState | None = None

    def to_dict(self) -> dict:
        return {"forget_acc": self.forget_acc, "relearn_acc": self.relearn_acc, "delta": self.delta,
                "acc_curve": self.acc_curve, "epochs": int(self.acc_curve.size)}

    def write(self, prefix) -> None:
        write_json(f"{prefix}.json", self.to_dict())
        write_csv(f"{prefix}_acc.csv", ["epoch", "acc_V", "smoothed_acc_V"],
                  [(e + 1, float(a), float(s)) for e, (a, s) in
                   enumerate(zip(self.acc_curve, self.smoothed_curve))])
        if self.recovery_curve is not None:
            rows = [(e + 1, k, float(self.recovery_curve[e, k]))
                    for e in range(self.recovery_curve.shape[0])
                    for k in range(self.recovery_curve.shape[1])]
            write_csv(f"{prefix}_recovery.csv", ["epoch", "k", "recovery_ratio"], rows)


def smooth(curve, window: int) -> np.ndarray:
    """Trailing moving average; entries before the first full window are nan."""
    curve = np.asarray(curve, dtype=np.float64)
    out = np.full(curve.size, np.nan)
    if curve.size >= window:
        c = np.concatenate([[0.0], np.cumsum(curve)])
        out[window - 1:] = (c[window:] - c[:-window]) / window
    return out


def run_attack(model_u: ModelState, model_o: ModelState, scenario: Scenario, cfg: AttackConfig,
               spectrum: Spectrum | None = None, floor: float = 0.05,
               keep_model: bool = False) -> AttackReport:
    """Fine-tune the unlearned model on ``T`` and track expected accuracy on ``V``.

    ``rtt_ce`` trains on the T labels; ``adaptive_rep_mse`` pulls the
    representations on T toward the original model's. When ``spectrum`` is
    given, per-component recovery ratios and attack-gradient SNRs on V are
    logged after every epoch.
    """
    if cfg.lr is None:
        raise DomainError("attack lr is unset; resolve it from the unlearning config first")
    XT, yT = scenario.part("T")
    XV, yV = scenario.part("V")
    forget_acc = accuracy_expected(model_u, XV, yV)
    HoT = representations(model_o, XT)
    HoV = representations(model_o, XV)
    HuV = representations(model_u, XV)
    mask = _trainable_mask(model_u, cfg.trainable)
    rng = np.random.default_rng(cfg.seed)
    theta = model_u.flat()
    model = model_u
    accs, recs, vfs, snrs = [], [], [], []
    for epoch in range(cfg.epochs):
        order = rng.permutation(XT.shape[0])
        bs = XT.shape[0] if cfg.batch_size is None else cfg.batch_size
        batch_snr = []
        for start in range(0, XT.shape[0], bs):
            b = np.sort(order[start:start + bs])
            if cfg.objective == "rtt_ce":
                lg = retain_loss(model, XT[b], "cross_entropy", labels=yT[b])
            else:
                lg = retain_loss(model, XT[b], "rep_norm", originals=HoT[b])
            if not np.isfinite(lg.value):
                raise AttackError("attack loss is not finite", epoch + 1)
            if spectrum is not None and b.size >= 2:
                batch_snr.append(geometry.snr_estimate(lg.rep_grads @ spectrum.components.T))
            theta = theta - cfg.lr * np.where(mask, lg.param_grads, 0.0)
            if not np.all(np.isfinite(theta)):
                raise AttackError("attack parameters diverged", epoch + 1)
            model = model_u.with_flat(theta)
        accs.append(accuracy_expected(model, XV, yV))
        if spectrum is not None:
            res = geometry.recovery_ratio(HoV, HuV, representations(model, XV), spectrum, floor)
            recs.append(res.values)
            vfs.append(res.valid_fraction)
            if batch_snr:
                snrs.append(np.mean(batch_snr, axis=0))
    acc_curve = np.array(accs)
    window = min(cfg.smoothing_window, max(cfg.epochs, 1))
    smoothed = smooth(acc_curve, window)
    relearn = float(np.nanmax(smoothed)) if cfg.epochs > 0 else forget_acc
    have = spectrum is not None and cfg.epochs > 0
    return AttackReport(
        forget_acc, relearn, geometry.relearn_gap(forget_acc, relearn), acc_curve, smoothed,
        np.array(recs) if have else None, np.array(vfs) if have else None,
        np.array(snrs) if (have and snrs) else None, model if keep_model else None)


# --- closed-form NTK simulator --------------------------------------------------

@dataclass
class NtkSimConfig:
    sigma2: np.ndarray
    tau2: float = 0.0
    kappa: float = 1.0
    eta: float = 0.01
    T: int = 100
    T_r: int = 50
    c_rate: float = 0.3

    def __post_init__(self):
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if np.any(self.sigma2 <= 0) or self.tau2 < 0:
            raise DomainError("variances must be positive and tau^2 non-negative")
        for name in ("kappa", "eta", "c_rate"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.T < 1 or self.T_r < 1:
            raise DomainError("T and T_r must be >= 1")


@dataclass
class NtkSimResult:
    sigma2: np.ndarray
    change_sq: np.ndarray  # (K,)
    times: np.ndarray  # (T_r,) attack steps 1..T_r
    recovery: np.ndarray  # (K, T_r)

    def change_ratio(self) -> np.ndarray:
        """Normalized typical absolute displacement ``sqrt(change_sq)``."""
        r = np.sqrt(self.change_sq)
        return r / r.sum()

    def write_csv(self, path) -> None:
        header = ["k", "sigma2", "change_sq"] + [f"recovery_t{int(t)}" for t in self.times]
        rows = [[k, float(self.sigma2[k]), float(self.change_sq[k])] + [float(v) for v in self.recovery[k]]
                for k in range(self.sigma2.size)]
        write_csv(path, header, rows)


def ntk_simulate(cfg: NtkSimConfig) -> NtkSimResult:
    """Expected squared unlearning change and recovery curves in the lazy regime."""
    change = cfg.eta**2 * cfg.kappa**2 * cfg.T * (cfg.sigma2 + cfg.tau2)
    times = np.arange(1, cfg.T_r + 1, dtype=np.float64)
    recovery = -np.expm1(-cfg.c_rate * np.outer(cfg.sigma2, times))
    return NtkSimResult(cfg.sigma2.copy(), change, times, recovery)


def ntk_random_walk(cfg: NtkSimConfig, n_walks: int, seed: int) -> np.ndarray:
    """Monte-Carlo counterpart of the change formula, in the eigenbasis.

    Each of ``T`` steps moves every representation by ``-eta kappa g`` with a
    fresh centered residual ``g ~ N(0, diag(sigma2) + tau2 I)``. Returns the
    ``(n_walks, K)`` accumulated displacements.
    """
    rng = np.random.default_rng(seed)
    sd = np.sqrt(cfg.sigma2 + cfg.tau2)
    total = np.zeros((n_walks, sd.size))
    for _ in range(cfg.T):
        total -= cfg.eta * cfg.kappa * rng.standard_normal((n_walks, sd.size)) * sd
    return total


@dataclass
class RateFit:
    per_k: np.ndarray  # slope c_k of -log(1-r) against sigma_k^2 * T_r
    pooled: float
    per_step_rate: np.ndarray  # c_k * sigma_k^2, recovery rate per attack step
    n_clamped: int


def fit_recovery_rate(curve, times, sigma2, eps: float = 1e-4) -> RateFit:
    """Least-squares fit through the origin of ``-log(1 - r)`` against ``sigma_k^2 T_r``.

    ``r`` is clipped to ``[0, 1 - eps]``. Clipped points are counted; points
    clipped at the top (saturated) carry no rate information and are left out
    of the fit. A curve clipped everywhere raises :class:`DegenerateError`.
    """
    R = np.atleast_2d(np.asarray(curve, dtype=np.float64))
    t = np.asarray(times, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    if R.shape != (s2.size, t.size):
        raise DomainError(f"curve shape {R.shape} does not match ({s2.size}, {t.size})")
    if t.size < 3:
        raise DomainError("need at least three time points per component")
    if np.any(~np.isfinite(R)) or np.any(R < -0.5) or np.any(R > 1.5):
        raise DomainError("recovery values must be finite and lie in [-0.5, 1.5]")
    low = R < 0
    high = R > 1 - eps
    if np.all(low | high):
        raise DegenerateError("every recovery point was clamped")
    y = -np.log1p(-np.clip(R, 0.0, 1 - eps))
    x = np.outer(s2, t)
    use = ~high
    xy = np.where(use, x * y, 0.0)
    xx = np.where(use, x * x, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_k = np.where(xx.sum(axis=1) > 0, xy.sum(axis=1) / xx.sum(axis=1), np.nan)
    pooled = float(xy.sum() / xx.sum())
    return RateFit(per_k, pooled, per_k * s2, int((low | high).sum()))
