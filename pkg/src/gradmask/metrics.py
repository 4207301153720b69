"""Gradient-masking metrics.

Five scores, each reported per example and summarised as mean/std:

* ``gradient_norm``          mean L2 norm of the input gradient of the loss
* ``fgsm_pgd_cosine``        cosine between FGSM and PGD perturbations
* ``robustness_information`` cosine between the logit-difference gradient at the
                             clean point and at the DeepFool boundary point
* ``linearization_error``    relative error of the first-order Taylor estimate
                             of the predicted-class logit at x + delta
* ``pgd_collinearity``       mean cosine between consecutive PGD step directions

Cosine-type metrics lie in [-1, 1]; the other two are non-negative.  Low
cosine/collinearity and high linearization error indicate masking.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackSpec, deepfool, fgsm, pgd
from .datasets import LabeledDataset
from .io import TOOL_VERSION
from .models import Model, input_gradient, logit_gradient, logits

log = logging.getLogger(__name__)

METRICS = ("gradient_norm", "fgsm_pgd_cosine", "robustness_information", "linearization_error", "pgd_collinearity")
EPS_METRICS = ("fgsm_pgd_cosine", "linearization_error", "pgd_collinearity")

ZERO_NORM = 1e-12
MIN_LOGIT = 1e-9
METRIC_PGD_ITERATIONS = 10
METRIC_PGD_RELATIVE_STEP = 0.25


class MetricError(RuntimeError):
    pass


@dataclass
class MetricReport:
    metric: str
    per_example: np.ndarray
    split: str = "test"
    epsilon: float | None = None
    excluded: int = 0
    model_id: str = ""
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_example = np.asarray(self.per_example, dtype=np.float64)

    @property
    def n(self) -> int:
        return int(self.per_example.size)

    @property
    def mean(self) -> float:
        return float(self.per_example.mean()) if self.n else float("nan")

    @property
    def std(self) -> float:
        return float(self.per_example.std()) if self.n else float("nan")

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "epsilon": self.epsilon,
            "split": self.split,
            "model_id": self.model_id,
            "n": self.n,
            "excluded": self.excluded,
            "mean": self.mean,
            "std": self.std,
            "per_example": [float(v) for v in self.per_example],
            "config_digest": self.config_digest,
            "tool_version": TOOL_VERSION,
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["metric"], np.asarray(d["per_example"]), d["split"], d["epsilon"], d["excluded"],
                   d["model_id"], d.get("config_digest", ""), d.get("extra", {}))


def cosine_similarity(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def rowwise_cosine(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``cosine_similarity`` applied to matching rows."""
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    dots = np.einsum("ij,ij->i", A, B)
    out = np.zeros(A.shape[0])
    out[ok] = np.clip(dots[ok] / (na[ok] * nb[ok]), -1.0, 1.0)
    return out


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise ValueError("epsilon must be > 0")


def _nonempty(ds: LabeledDataset) -> None:
    if len(ds) == 0:
        raise ValueError("dataset is empty")


def _metric_pgd(eps: float, capture: bool, random_start: bool = False, seed: int = 0) -> AttackSpec:
    return AttackSpec("pgd", eps, METRIC_PGD_ITERATIONS, METRIC_PGD_RELATIVE_STEP, restarts=1, seed=seed,
                      capture_trajectory=capture, random_start=random_start)


def metric_gradient_norm(model: Model, ds: LabeledDataset) -> MetricReport:
    _nonempty(ds)
    g = input_gradient(model, ds.X, ds.y)
    return MetricReport("gradient_norm", np.linalg.norm(g, axis=1), ds.split)


def metric_fgsm_pgd_cosine(model: Model, ds: LabeledDataset, eps: float, random_start: bool = False,
                           seed: int = 0) -> MetricReport:
    _check_eps(eps)
    _nonempty(ds)
    d_fgsm = fgsm(model, ds.X, ds.y, eps).delta
    d_pgd = pgd(model, ds.X, ds.y, _metric_pgd(eps, False, random_start, seed)).delta
    return MetricReport("fgsm_pgd_cosine", rowwise_cosine(d_fgsm, d_pgd), ds.split, eps)


def logit_difference_gradient(model: Model, x: np.ndarray, target: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Per-example gradient of ``l_target(z) - l_source(z)`` at ``z = x``."""
    w = np.zeros((x.shape[0], model.spec.num_classes))
    rows = np.arange(x.shape[0])
    w[rows, target] += 1.0
    w[rows, source] -= 1.0
    return logit_gradient(model, x, w)[0]


def metric_robustness_information(model: Model, ds: LabeledDataset, max_iter: int = 50,
                                  overshoot: float = 0.02) -> MetricReport:
    _nonempty(ds)
    res = deepfool(model, ds.X, ds.y, max_iter, overshoot)
    ok = res.converged
    if not ok.any():
        raise MetricError("DeepFool converged on no example")
    x, x_adv = ds.X[ok], res.x_adv[ok]
    k_clean = logits(model, x).argmax(axis=1)
    k_adv = logits(model, x_adv).argmax(axis=1)
    f_adv = logit_difference_gradient(model, x_adv, k_adv, k_clean)
    f_clean = logit_difference_gradient(model, x, k_adv, k_clean)
    return MetricReport("robustness_information", rowwise_cosine(f_adv, f_clean), ds.split,
                        excluded=int((~ok).sum()))


def metric_linearization_error(model: Model, ds: LabeledDataset, eps: float, mode: str = "fgsm",
                               seed: int = 0) -> MetricReport:
    """Relative first-order Taylor error of the clean-predicted logit at x + delta.

    ``mode="fgsm"`` uses the FGSM perturbation at ``eps``; ``mode="random"``
    uses a random vertex of the eps-ball (sensitivity check).
    """
    _check_eps(eps)
    _nonempty(ds)
    x = ds.X
    z = logits(model, x)
    k = z.argmax(axis=1)
    rows = np.arange(x.shape[0])
    if mode == "fgsm":
        delta = fgsm(model, x, ds.y, eps).delta
    elif mode == "random":
        from .attacks import random_sign

        delta = random_sign(x, eps, seed).delta
    else:
        raise ValueError(f"unknown linearization mode {mode!r}")
    onehot = np.zeros_like(z)
    onehot[rows, k] = 1.0
    g, _ = logit_gradient(model, x, onehot)
    taylor = z[rows, k] + np.einsum("ij,ij->i", g, delta)
    actual = logits(model, x + delta)[rows, k]
    keep = np.abs(actual) >= MIN_LOGIT
    if not keep.any():
        raise MetricError("every example had a vanishing logit at the perturbed point")
    err = np.abs(taylor[keep] - actual[keep]) / np.abs(actual[keep])
    return MetricReport("linearization_error", err, ds.split, eps, excluded=int((~keep).sum()),
                        extra={} if mode == "fgsm" else {"mode": mode})


def metric_pgd_collinearity(model: Model, ds: LabeledDataset, eps: float, iterations: int = METRIC_PGD_ITERATIONS,
                            random_start: bool = False, seed: int = 0) -> MetricReport:
    _check_eps(eps)
    _nonempty(ds)
    if iterations < 2:
        raise ValueError("collinearity needs at least two PGD iterations")
    spec = AttackSpec("pgd", eps, iterations, METRIC_PGD_RELATIVE_STEP, seed=seed, capture_trajectory=True,
                      random_start=random_start)
    traj = pgd(model, ds.X, ds.y, spec).trajectory
    cos = np.stack([rowwise_cosine(a, b) for a, b in zip(traj[:-1], traj[1:])], axis=1)
    return MetricReport("pgd_collinearity", cos.mean(axis=1), ds.split, eps)


def run_metric_suite(model: Model, ds: LabeledDataset, eps_list, model_id: str = "", config_digest: str = "",
                     metrics=METRICS) -> tuple[list[MetricReport], dict[str, str]]:
    """All requested metrics on one sample; returns (reports, errors keyed by metric/eps)."""
    eps_list = list(eps_list)
    if not eps_list:
        raise ValueError("eps_list must not be empty")
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metric(s) {unknown}; valid names: {', '.join(METRICS)}")
    jobs = []
    for name in METRICS:
        if name not in metrics:
            continue
        if name in EPS_METRICS:
            jobs += [(name, eps) for eps in eps_list]
        else:
            jobs.append((name, None))
    reports, errors = [], {}
    for name, eps in jobs:
        fn = globals()[f"metric_{name}"]
        try:
            rep = fn(model, ds) if eps is None else fn(model, ds, eps)
        except Exception as exc:  # keep going; the suite reports partial results
            log.warning("metric %s (eps=%s) failed: %s", name, eps, exc)
            errors[f"{name}@{eps}"] = f"{type(exc).__name__}: {exc}"
            continue
        rep.model_id = model_id
        rep.config_digest = config_digest
        reports.append(rep)
    return reports, errors
