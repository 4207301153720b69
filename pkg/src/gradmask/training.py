"""Training regimes: standard ERM, adversarial training, input-Jacobian regularisation, gradient clipping."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, LINF_TOL, fgsm, pgd, run_attack, step_ll
from .datasets import LabeledDataset, subsample
from .models import Model, ModelSpec, predict
from .tensor import Tensor

log = logging.getLogger(__name__)

REGIMES = ("standard", "adversarial", "jacobian", "grad_clip")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.batch = batch


class MonitorDisabledError(RuntimeError):
    pass


@dataclass(frozen=True)
class Regime:
    kind: str = "standard"
    attack: AttackSpec | None = None  # adversarial
    lam: float = 0.0  # jacobian
    threshold: float | None = None  # grad_clip; None picks 0.5 x median epoch-1 norm

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ValueError(f"unknown regime {self.kind!r}; expected one of {', '.join(REGIMES)}")
        if self.kind == "adversarial" and (self.attack is None or self.attack.kind not in ("fgsm", "step_ll", "pgd")):
            raise ValueError("adversarial regime needs an fgsm, step_ll or pgd attack")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be > 0")

    @property
    def tag(self) -> str:
        if self.kind == "adversarial":
            return f"adversarial-{self.attack.kind}-eps{self.attack.eps:.6g}"
        if self.kind == "jacobian":
            return f"jacobian-lam{self.lam:g}"
        if self.kind == "grad_clip":
            return "grad_clip" if self.threshold is None else f"grad_clip-{self.threshold:g}"
        return "standard"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    regime: Regime = field(default_factory=Regime)
    co_monitor: bool = False
    monitor_eps: float = 8 / 255
    monitor_size: int = 200
    co_fgsm_threshold: float = 0.7
    co_pgd_threshold: float = 0.1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainReport:
    model: Model
    clean_acc: list[float] = field(default_factory=list)
    fgsm_acc: list[float] = field(default_factory=list)
    pgd_acc: list[float] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)
    co_monitor: bool = False
    co_detected: bool = False
    clip_threshold: float | None = None

    def to_dict(self) -> dict:
        return {
            "provenance": self.model.provenance,
            "clean_acc": self.clean_acc,
            "fgsm_acc": self.fgsm_acc,
            "pgd_acc": self.pgd_acc,
            "mean_loss": self.mean_loss,
            "co_monitor": self.co_monitor,
            "co_detected": self.co_detected,
            "clip_threshold": self.clip_threshold,
        }


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def jacobian_penalty_surrogate(model: Model, x: np.ndarray, params: dict[str, Tensor], h: float = 1e-4) -> tuple[Tensor, float]:
    """Tape expression whose parameter gradient equals that of R = mean_i sum_c ||d l_c(x_i)/dx||^2.

    For fixed v = d l_c/dx (computed by one backward pass per class) the
    parameter gradient of ||v(theta)||^2 is 2 * grad_theta(v . d l_c/dx), and the
    directional derivative v . d l_c/dx is taken by a central difference of
    radius ``h`` along v/||v||.  This avoids differentiating through a backward
    pass.  Returns the surrogate and the value of R.
    """
    from .attacks import class_gradients

    n = x.shape[0]
    _, G = class_gradients(model, x)  # N, C, D
    sq = (G * G).sum(axis=2)  # N, C
    value = float(sq.sum(axis=1).mean())
    norms = np.sqrt(sq)
    terms = []
    for c in range(model.spec.num_classes):
        v = G[:, c, :]
        nv = norms[:, c]
        ok = nv > 0
        if not ok.any():
            continue
        u = np.where(ok[:, None], v / np.where(ok, nv, 1.0)[:, None], 0.0)
        cols = np.zeros((n, model.spec.num_classes))
        cols[:, c] = np.where(ok, nv / (h * n), 0.0)  # (2/n) * ||v|| * (l(+) - l(-)) / (2h)
        plus = model.forward(Tensor(x + h * u), params)
        minus = model.forward(Tensor(x - h * u), params)
        terms.append(((plus - minus) * cols).sum())
    if not terms:
        return Tensor(0.0), value
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, value


def _batch_objective(model: Model, xb: np.ndarray, yb: np.ndarray, regime: Regime):
    params = model.param_tensors()
    z = model.forward(Tensor(xb), params)
    obj = T.softmax_cross_entropy(z, yb)
    loss_value = float(obj.data)
    if regime.kind == "jacobian" and regime.lam > 0:
        surrogate, _ = jacobian_penalty_surrogate(model, xb, params)
        obj = obj + surrogate * regime.lam
    names = list(params)
    grads = T.grad(obj, [params[k] for k in names])
    return loss_value, dict(zip(names, grads))


def _adversarial_batch(model: Model, xb, yb, spec: AttackSpec, seed: int) -> np.ndarray:
    if spec.kind == "fgsm":
        res = fgsm(model, xb, yb, spec.eps)
    elif spec.kind == "step_ll":
        res = step_ll(model, xb, yb, spec.eps)
    else:
        res = pgd(model, xb, yb, replace(spec, seed=seed, capture_trajectory=False))
    x_adv = res.x_adv
    if np.abs(x_adv - xb).max(initial=0.0) > spec.eps + LINF_TOL or x_adv.min(initial=0.0) < 0 or x_adv.max(initial=1.0) > 1:
        raise AssertionError("inner attack left the eps-ball or the input domain")
    return x_adv


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def train(model_spec: ModelSpec, dataset: LabeledDataset, config: TrainConfig) -> TrainReport:
    """Train a fresh model; a pure function of (model_spec, dataset, config)."""
    if dataset.split != "train":
        raise ValueError("train() needs a train-split dataset")
    regime = config.regime
    model = Model(model_spec, provenance=regime.tag)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    report = TrainReport(model=model, co_monitor=config.co_monitor)
    n = len(dataset)
    shuffle_rng = np.random.default_rng([config.seed, 7])
    threshold = regime.threshold if regime.kind == "grad_clip" else None
    epoch1_norms: list[float] = []
    monitor = subsample(dataset, min(config.monitor_size, n), config.seed) if config.co_monitor else None

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = dataset.X[idx], dataset.y[idx]
            if regime.kind == "adversarial":
                xb = _adversarial_batch(model, xb, yb, regime.attack, _sub_seed(config.seed, epoch, b))
            try:
                loss_value, grads = _batch_objective(model, xb, yb, regime)
            except T.NonFiniteError as exc:
                raise TrainingDivergedError(epoch, b, str(exc)) from None
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(epoch, b, "loss is not finite")
            if regime.kind == "grad_clip":
                norm = _global_norm(grads)
                if threshold is None:
                    epoch1_norms.append(norm)
                else:
                    scale = min(1.0, threshold / norm) if norm > 0 else 1.0
                    grads = {k: g * scale for k, g in grads.items()}
            for k, g in grads.items():
                velocity[k] = config.momentum * velocity[k] + g
                model.params[k] = model.params[k] - config.learning_rate * velocity[k]
                if not np.isfinite(model.params[k]).all():
                    raise TrainingDivergedError(epoch, b, f"parameter {k} is not finite")
            losses.append(loss_value)
        if regime.kind == "grad_clip" and threshold is None:
            threshold = 0.5 * float(np.median(epoch1_norms))
            report.clip_threshold = threshold
        elif regime.kind == "grad_clip":
            report.clip_threshold = threshold
        report.mean_loss.append(float(np.mean(losses)))
        if monitor is not None:
            report.clean_acc.append(evaluate_accuracy(model, monitor))
            eps = config.monitor_eps
            report.fgsm_acc.append(evaluate_accuracy(model, monitor, AttackSpec("fgsm", eps)))
            report.pgd_acc.append(evaluate_accuracy(model, monitor, AttackSpec("pgd", eps, 10, 0.25, seed=config.seed)))
            log.debug("epoch %d clean %.3f fgsm %.3f pgd %.3f", epoch, report.clean_acc[-1], report.fgsm_acc[-1], report.pgd_acc[-1])
    if config.co_monitor:
        report.co_detected = detect_catastrophic_overfitting(report, config.co_fgsm_threshold, config.co_pgd_threshold)
    return report


def evaluate_accuracy(model: Model, dataset: LabeledDataset, attack: AttackSpec | None = None) -> float:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if attack is None or (attack.eps == 0 and attack.kind not in ("pgd_unbounded", "deepfool")):
        return float((predict(model, dataset.X) == dataset.y).mean())
    res = run_attack(model, dataset.X, dataset.y, attack)
    return res.accuracy


def detect_catastrophic_overfitting(report: TrainReport, fgsm_threshold: float = 0.7, pgd_threshold: float = 0.1) -> bool:
    """True iff some epoch kept FGSM accuracy high while PGD accuracy collapsed."""
    if not report.co_monitor:
        raise MonitorDisabledError("catastrophic-overfitting detection needs co_monitor=True during training")
    return any(f >= fgsm_threshold and p <= pgd_threshold for f, p in zip(report.fgsm_acc, report.pgd_acc))
