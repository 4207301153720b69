"""Masking diagnostics: behavioural checklist, attack-gap quantities, loss
cross-sections along the gradient sign, DeepFool robustness score and the
metric/gap correlation analysis."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .attacks import AttackSpec, deepfool, fgsm, pgd, pgd_unbounded, spsa
from .datasets import LabeledDataset
from .io import TOOL_VERSION
from .models import Model, loss_and_input_gradient, per_example_loss, predict

log = logging.getLogger(__name__)

CHECKLIST_MARGIN = 0.02
BISECTION_STEPS = 20
MIN_CONVERGED_FRACTION = 0.5

BENCHMARK_PGD = AttackSpec("pgd", iterations=25, relative_step=0.1)
STRONG_PGD = AttackSpec("pgd", iterations=50, relative_step=0.1, restarts=10)
CHECKLIST_SPSA = AttackSpec("spsa", iterations=15, spsa_samples=256)
GAP_NAMES = ("fgsm_minus_strong", "fgsm_minus_pgd")


class DiagnosticError(RuntimeError):
    pass


def _nonempty(ds: LabeledDataset) -> None:
    if len(ds) == 0:
        raise ValueError("dataset is empty")


# gaps ------------------------------------------------------------------------------

@dataclass
class GapQuantities:
    epsilon: float
    fgsm_acc: float
    pgd_acc: float
    strong_acc: float
    strong_attack: dict = field(default_factory=dict)

    @property
    def fgsm_minus_strong(self) -> float:
        return self.fgsm_acc - self.strong_acc

    @property
    def fgsm_minus_pgd(self) -> float:
        return self.fgsm_acc - self.pgd_acc

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "fgsm_acc": self.fgsm_acc,
            "pgd_acc": self.pgd_acc,
            "strong_acc": self.strong_acc,
            "fgsm_minus_strong": self.fgsm_minus_strong,
            "fgsm_minus_pgd": self.fgsm_minus_pgd,
            "strong_attack": self.strong_attack,
        }


def gap_quantities(model: Model, ds: LabeledDataset, eps: float, seed: int = 0,
                   strong_spec: AttackSpec | None = None) -> GapQuantities:
    """FGSM, benchmark-PGD and strong-PGD accuracies at ``eps`` plus their gaps.

    ``strong_spec`` overrides the strong reference attack (its eps and seed are
    replaced by ``eps`` and ``seed``).
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    _nonempty(ds)
    strong = replace(strong_spec or STRONG_PGD, eps=eps, seed=seed)
    f = fgsm(model, ds.X, ds.y, eps).accuracy
    p = pgd(model, ds.X, ds.y, replace(BENCHMARK_PGD, eps=eps, seed=seed)).accuracy
    s = pgd(model, ds.X, ds.y, strong).accuracy
    return GapQuantities(eps, f, p, s, strong.to_dict())


# checklist ---------------------------------------------------------------------------

@dataclass
class ChecklistReport:
    margin: float
    blackbox_beats_whitebox: dict
    unbounded_not_total: dict
    distortion_non_monotone: dict
    single_vs_strong_gap: dict
    errors: dict = field(default_factory=dict)

    FLAGS = ("blackbox_beats_whitebox", "unbounded_not_total", "distortion_non_monotone")

    @property
    def overall_suspect(self) -> bool:
        return any(bool(getattr(self, name).get("flag")) for name in self.FLAGS)

    def flags(self) -> dict[str, bool | None]:
        return {name: getattr(self, name).get("flag") for name in self.FLAGS}

    def to_dict(self) -> dict:
        return {
            "margin": self.margin,
            **{name: getattr(self, name) for name in self.FLAGS},
            "single_vs_strong_gap": self.single_vs_strong_gap,
            "overall_suspect": self.overall_suspect,
            "errors": self.errors,
            "tool_version": TOOL_VERSION,
        }


def blackbox_flag(spsa_acc: float, fgsm_acc: float, pgd_acc: float, margin: float = CHECKLIST_MARGIN) -> bool:
    """True when the black-box attack beats at least one white-box attack by more than ``margin``."""
    return spsa_acc < max(fgsm_acc, pgd_acc) - margin


def non_monotone_flag(accs, margin: float = CHECKLIST_MARGIN) -> bool:
    """True when accuracy rises by more than ``margin`` between consecutive distortion bounds."""
    a = np.asarray(accs, dtype=np.float64)
    return bool(np.any(a[1:] > a[:-1] + margin))


def benchmark_accuracies(model: Model, ds: LabeledDataset, eps: float, seed: int = 0,
                         spsa_spec: AttackSpec | None = None) -> dict[str, float]:
    """FGSM, benchmark-PGD, strong-PGD and SPSA accuracies at one bound."""
    X, y = ds.X, ds.y
    return {
        "fgsm": fgsm(model, X, y, eps).accuracy,
        "pgd": pgd(model, X, y, replace(BENCHMARK_PGD, eps=eps, seed=seed)).accuracy,
        "strong": pgd(model, X, y, replace(STRONG_PGD, eps=eps, seed=seed)).accuracy,
        "spsa": spsa(model, X, y, replace(spsa_spec or CHECKLIST_SPSA, eps=eps, seed=seed)).accuracy,
    }


def checklist_from_accuracies(clean_acc: float, by_eps: dict[float, dict[str, float]], unbounded_acc: float | None,
                              margin: float = CHECKLIST_MARGIN, errors: dict | None = None) -> ChecklistReport:
    """Assemble the flags from precomputed accuracies.

    ``by_eps`` maps each bound to its ``fgsm``/``pgd``/``spsa``/``strong``
    accuracies.  The black-box flag is raised if it fires at any bound; the
    monotonicity check runs over FGSM and PGD curves with the clean accuracy
    as the bound-0 point.
    """
    if margin < 0:
        raise ValueError("margin must be >= 0")
    eps_sorted = sorted(by_eps)
    records = []
    for e in eps_sorted:
        a = by_eps[e]
        records.append({"epsilon": e, "spsa_acc": a["spsa"], "fgsm_acc": a["fgsm"], "pgd_acc": a["pgd"],
                        "flag": blackbox_flag(a["spsa"], a["fgsm"], a["pgd"], margin)})
    blackbox = {"flag": any(r["flag"] for r in records) if records else None, "by_epsilon": records}
    unbounded = {"flag": None if unbounded_acc is None else unbounded_acc > 0, "unbounded_acc": unbounded_acc}
    curves = {k: [clean_acc] + [by_eps[e][k] for e in eps_sorted] for k in ("fgsm", "pgd")}
    monotone = {"flag": any(non_monotone_flag(c, margin) for c in curves.values()) if eps_sorted else None,
                "epsilon": [0.0] + eps_sorted, "acc_by_epsilon": curves}
    gaps = {"by_epsilon": [{"epsilon": e, "fgsm_minus_pgd": by_eps[e]["fgsm"] - by_eps[e]["pgd"],
                            "fgsm_minus_strong": by_eps[e]["fgsm"] - by_eps[e]["strong"]} for e in eps_sorted]}
    return ChecklistReport(margin, blackbox, unbounded, monotone, gaps, dict(errors or {}))


def run_checklist(model: Model, ds: LabeledDataset, eps_list, margin: float = CHECKLIST_MARGIN, seed: int = 0,
                  unbounded_iterations: int = 200, unbounded_step: float = 0.05,
                  spsa_spec: AttackSpec | None = None) -> ChecklistReport:
    """Evaluate the masking symptoms on one evaluation subset.

    An attack that raises leaves its flag as ``None`` and records the error;
    the remaining flags are still evaluated.
    """
    eps_list = sorted({float(e) for e in eps_list})
    if not eps_list:
        raise ValueError("eps_list must not be empty")
    if any(e <= 0 for e in eps_list):
        raise ValueError("eps values must be > 0")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    _nonempty(ds)
    errors: dict[str, str] = {}
    clean = float((predict(model, ds.X) == ds.y).mean())
    by_eps = {}
    for e in eps_list:
        try:
            by_eps[e] = benchmark_accuracies(model, ds, e, seed, spsa_spec)
        except Exception as exc:  # partial report
            log.warning("checklist attacks at eps=%s failed: %s", e, exc)
            errors[f"attacks@{e}"] = f"{type(exc).__name__}: {exc}"
    try:
        unbounded = pgd_unbounded(model, ds.X, ds.y, unbounded_iterations, unbounded_step).accuracy
    except Exception as exc:
        log.warning("unbounded attack failed: %s", exc)
        errors["unbounded"] = f"{type(exc).__name__}: {exc}"
        unbounded = None
    return checklist_from_accuracies(clean, by_eps, unbounded, margin, errors)


# cross-sections ------------------------------------------------------------------------

@dataclass
class CrossSection:
    t_grid: np.ndarray
    curves: np.ndarray  # (N, K)
    boundary: np.ndarray  # (N,), nan where the prediction never flips on the grid

    @property
    def mean_curve(self) -> np.ndarray:
        return self.curves.mean(axis=0)

    @property
    def std_curve(self) -> np.ndarray:
        return self.curves.std(axis=0)

    @property
    def boundary_found(self) -> np.ndarray:
        return self.boundary[np.isfinite(self.boundary)]

    @property
    def boundary_mean(self) -> float | None:
        b = self.boundary_found
        return float(b.mean()) if b.size else None

    @property
    def boundary_std(self) -> float | None:
        b = self.boundary_found
        return float(b.std()) if b.size else None

    @property
    def peak_index(self) -> int:
        return int(np.argmax(self.mean_curve))

    def to_dict(self) -> dict:
        return {
            "t_grid": [float(t) for t in self.t_grid],
            "mean_loss": [float(v) for v in self.mean_curve],
            "std_loss": [float(v) for v in self.std_curve],
            "boundary": [None if not np.isfinite(b) else float(b) for b in self.boundary],
            "boundary_mean": self.boundary_mean,
            "boundary_std": self.boundary_std,
            "n": int(self.curves.shape[0]),
            "tool_version": TOOL_VERSION,
        }

    def csv_rows(self) -> tuple[list[str], list[list]]:
        header = ["t", "mean_loss", "std_loss", "boundary_mean", "boundary_std"]
        bm = "" if self.boundary_mean is None else self.boundary_mean
        bs = "" if self.boundary_std is None else self.boundary_std
        rows = [[t, m, s, bm, bs] for t, m, s in zip(self.t_grid, self.mean_curve, self.std_curve)]
        return header, rows


def loss_cross_section(model: Model, ds: LabeledDataset, t_max: float, K: int) -> CrossSection:
    """Loss along the clamped ray x + t*sign(grad L(x, y)) for t on a uniform K-point grid over [0, t_max]."""
    if not t_max > 0:
        raise ValueError("t_max must be > 0")
    if K < 2:
        raise ValueError("K must be >= 2")
    _nonempty(ds)
    x, y = ds.X, ds.y
    n = len(ds)
    clean_loss, g, z = loss_and_input_gradient(model, x, y)
    direction = np.sign(g)
    pred0 = z.argmax(axis=1)
    t_grid = np.linspace(0.0, t_max, K)
    curves = np.empty((n, K))
    flips = np.zeros((n, K), dtype=bool)
    curves[:, 0] = clean_loss
    for j, t in enumerate(t_grid[1:], start=1):
        xt = np.clip(x + t * direction, 0.0, 1.0)
        curves[:, j] = per_example_loss(model, xt, y)
        flips[:, j] = predict(model, xt) != pred0
    if not np.isfinite(curves).all():
        raise DiagnosticError("non-finite loss along the cross-section")
    boundary = np.full(n, np.nan)
    hit = flips.any(axis=1)
    first = flips.argmax(axis=1)
    idx = np.flatnonzero(hit)
    if idx.size:
        lo = t_grid[first[idx] - 1].copy()
        hi = t_grid[first[idx]].copy()
        xi, di, pi = x[idx], direction[idx], pred0[idx]
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            flipped = predict(model, np.clip(xi + mid[:, None] * di, 0.0, 1.0)) != pi
            hi = np.where(flipped, mid, hi)
            lo = np.where(flipped, lo, mid)
        boundary[idx] = hi
    return CrossSection(t_grid, curves, boundary)


# robustness score -------------------------------------------------------------------------

@dataclass
class RobustnessScore:
    score: float
    n: int
    excluded: int

    def to_dict(self) -> dict:
        return {"score": self.score, "n": self.n, "excluded": self.excluded}


def robustness_score(model: Model, ds: LabeledDataset, max_iter: int = 50, overshoot: float = 0.02,
                     refine: bool = True) -> RobustnessScore:
    """Mean of ||delta||_2 / ||x||_2 over examples where DeepFool found a boundary.

    By default each DeepFool perturbation is line-searched back to the first
    label flip along its ray, so the score tracks the minimal perturbation
    rather than DeepFool's overshoot.
    """
    _nonempty(ds)
    res = deepfool(model, ds.X, ds.y, max_iter, overshoot, refine=refine)
    xn = np.linalg.norm(ds.X, axis=1)
    ok = res.converged & (xn > 0)
    if ok.mean() < MIN_CONVERGED_FRACTION:
        raise DiagnosticError(f"DeepFool converged on {int(ok.sum())}/{len(ds)} examples; need at least half")
    ratio = np.linalg.norm(res.delta[ok], axis=1) / xn[ok]
    return RobustnessScore(float(ratio.mean()), int(ok.sum()), int((~ok).sum()))


# correlations ---------------------------------------------------------------------------------

def pearson(a, b) -> float | None:
    """Pearson correlation; None when either column has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-D columns of equal length")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0 or sb == 0:
        return None
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def spearman(a, b) -> float | None:
    return pearson(rankdata(a), rankdata(b))


@dataclass
class CorrelationMatrix:
    model_ids: list[str]
    metrics: list[str]
    gaps: list[str]
    metric_gap: dict  # metric -> gap -> r or None
    metric_metric: dict  # metric -> metric -> r or None
    spearman_metric_metric: dict

    def to_dict(self) -> dict:
        return {
            "model_ids": self.model_ids,
            "metrics": self.metrics,
            "gaps": self.gaps,
            "pearson_metric_gap": self.metric_gap,
            "pearson_metric_metric": self.metric_metric,
            "spearman_metric_metric": self.spearman_metric_metric,
            "tool_version": TOOL_VERSION,
        }


def correlation_matrix(zoo: list[tuple[str, dict[str, float], dict[str, float]]]) -> CorrelationMatrix:
    """Correlate per-model metric means with gap quantities across a zoo.

    ``zoo`` holds ``(model_id, {metric_column: mean}, {gap_name: value})``;
    every model must report the same columns.  Undefined correlations (zero
    variance) are ``None``.
    """
    if len(zoo) < 3:
        raise ValueError("correlation analysis needs at least 3 models")
    ids = [m for m, _, _ in zoo]
    metrics = sorted(zoo[0][1])
    gaps = sorted(zoo[0][2])
    for mid, mv, gv in zoo:
        if sorted(mv) != metrics or sorted(gv) != gaps:
            raise ValueError(f"model {mid!r} reports different columns from {ids[0]!r}")
    col = {m: [mv[m] for _, mv, _ in zoo] for m in metrics}
    gcol = {g: [gv[g] for _, _, gv in zoo] for g in gaps}
    metric_gap = {m: {g: pearson(col[m], gcol[g]) for g in gaps} for m in metrics}
    mm = {a: {b: pearson(col[a], col[b]) for b in metrics} for a in metrics}
    sm = {a: {b: spearman(col[a], col[b]) for b in metrics} for a in metrics}
    return CorrelationMatrix(ids, metrics, gaps, metric_gap, mm, sm)
