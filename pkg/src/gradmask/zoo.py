"""Train-and-evaluate pipeline for one model and for a whole zoo.

Everything a zoo run writes is a deterministic function of the manifest, so
two runs with the same manifest produce byte-identical bundles.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import diagnostics as dg
from .attacks import step_ll
from .config import CrossSectionSpec, EvalSpec, ExperimentConfig, ZooManifest
from .datasets import LabeledDataset, make_dataset, subsample
from .io import TOOL_VERSION, digest, write_csv, write_json
from .metrics import EPS_METRICS, METRICS, run_metric_suite
from .models import Model, load_model, save_model
from .training import TrainReport, train

log = logging.getLogger(__name__)


def eps_tag(eps: float | None) -> str:
    return "none" if eps is None else f"{eps:.6f}"


def config_digest(cfg: ExperimentConfig) -> str:
    return digest(cfg.to_dict())


def eval_set(cfg: ExperimentConfig, split: str, ev: EvalSpec | None = None) -> LabeledDataset:
    ev = ev or cfg.eval
    ds = make_dataset(cfg.dataset, split)
    size = ev.test_size if split == "test" else ev.train_size
    return subsample(ds, min(size, len(ds)), ev.seed)


# training -------------------------------------------------------------------------

def train_from_config(cfg: ExperimentConfig) -> TrainReport:
    ds = make_dataset(cfg.dataset, "train")
    report = train(cfg.model, ds, cfg.train)
    report.model.provenance = f"{cfg.train.regime.tag} config:{config_digest(cfg)}"
    return report


def train_outputs(cfg: ExperimentConfig, out: Path) -> tuple[Model, dict]:
    """Train, then write ``{id}.model`` and ``{id}_train.json``."""
    from .training import evaluate_accuracy

    report = train_from_config(cfg)
    save_model(report.model, out / f"{cfg.model_id}.model")
    body = {"model_id": cfg.model_id, "config_digest": config_digest(cfg), "tool_version": TOOL_VERSION,
            "config": cfg.to_dict(), **report.to_dict(),
            "final_clean_acc": {split: evaluate_accuracy(report.model, eval_set(cfg, split)) for split in ("train", "test")}}
    write_json(out / f"{cfg.model_id}_train.json", body)
    return report.model, body


def load_or_train(cfg: ExperimentConfig, out: Path) -> Model:
    """Reuse an existing model file when it was trained from this exact config."""
    path = out / f"{cfg.model_id}.model"
    if path.exists():
        try:
            model = load_model(path)
            if model.provenance.endswith(f"config:{config_digest(cfg)}"):
                return model
        except Exception as exc:  # unreadable file: retrain
            log.warning("ignoring model file %s: %s", path, exc)
    return train_outputs(cfg, out)[0]


# per-model evaluation -------------------------------------------------------------------

def benchmark_table(model: Model, ds: LabeledDataset, eps_list, seed: int) -> dict:
    """Clean accuracy, per-bound attack accuracies and the unbounded attack."""
    from .attacks import pgd_unbounded
    from .training import evaluate_accuracy

    by_eps = {}
    for e in sorted(eps_list):
        accs = dg.benchmark_accuracies(model, ds, e, seed)
        accs["step_ll"] = step_ll(model, ds.X, ds.y, e).accuracy
        by_eps[e] = accs
    return {
        "clean": evaluate_accuracy(model, ds),
        "by_eps": by_eps,
        "unbounded": pgd_unbounded(model, ds.X, ds.y).accuracy,
    }


def metric_columns(reports) -> dict[str, float]:
    """``metric`` (bound-free) or ``metric@tag`` -> mean."""
    return {(r.metric if r.epsilon is None else f"{r.metric}@{eps_tag(r.epsilon)}"): r.mean for r in reports}


def evaluate_model(cfg: ExperimentConfig, out: Path, eps_list, splits=("test",), ev: EvalSpec | None = None,
                   cs: CrossSectionSpec | None = None) -> dict:
    """Train (or reuse) one model, run every diagnostic and write its files.

    Returns the per-model summary (also written as ``{id}_summary.json``).
    """
    out = Path(out)
    mid = cfg.model_id
    cdig = config_digest(cfg)
    ev = ev or cfg.eval
    cs = cs or cfg.cross_section
    model = load_or_train(cfg, out)
    test = eval_set(cfg, "test", ev)
    errors: dict[str, str] = {}

    bench = benchmark_table(model, test, eps_list, cfg.seed)
    checklist = dg.checklist_from_accuracies(bench["clean"], bench["by_eps"], bench["unbounded"])
    write_json(out / f"{mid}_checklist.json", {"model_id": mid, "config_digest": cdig, **checklist.to_dict()})

    metrics: dict[str, dict[str, float]] = {}
    for split in splits:
        ds = test if split == "test" else eval_set(cfg, "train", ev)
        reports, errs = run_metric_suite(model, ds, eps_list, mid, cdig)
        for rep in reports:
            write_json(out / f"{mid}_{rep.metric}_{eps_tag(rep.epsilon)}_{split}.json", rep.to_dict())
        errors.update({f"{split}:{k}": v for k, v in errs.items()})
        metrics[split] = metric_columns(reports)

    section = dg.loss_cross_section(model, test, cs.t_max, cs.K)
    header, rows = section.csv_rows()
    write_csv(out / f"{mid}_cross_section.csv", header, rows)
    write_json(out / f"{mid}_cross_section.json", {"model_id": mid, "config_digest": cdig, **section.to_dict()})

    try:
        score = dg.robustness_score(model, test).to_dict()
    except dg.DiagnosticError as exc:
        errors["robustness_score"] = str(exc)
        score = None

    summary = {
        "model_id": mid,
        "regime": cfg.train.regime.tag,
        "config_digest": cdig,
        "tool_version": TOOL_VERSION,
        "n_test": len(test),
        "clean_acc": bench["clean"],
        "unbounded_acc": bench["unbounded"],
        "benchmarks": [{"epsilon": e, **accs} for e, accs in bench["by_eps"].items()],
        "checklist": {**checklist.flags(), "overall_suspect": checklist.overall_suspect},
        "metrics": metrics,
        "cross_section": {"peak_index": section.peak_index, "K": cs.K, "t_max": cs.t_max,
                          "mean_loss": [float(v) for v in section.mean_curve]},
        "robustness_score": score,
        "errors": errors,
    }
    write_json(out / f"{mid}_summary.json", summary)
    return summary


# zoo ---------------------------------------------------------------------------------------

@dataclass
class ZooBundle:
    summaries: list[dict]
    failures: dict[str, str] = field(default_factory=dict)
    correlations: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures) or any(s["errors"] for s in self.summaries)


def _evaluate_safe(args) -> tuple[dict | None, str | None]:
    cfg, out, eps, splits, ev, cs = args
    try:
        return evaluate_model(cfg, out, eps, splits, ev, cs), None
    except Exception as exc:  # one failing model must not sink the zoo
        log.error("model %s failed: %s", cfg.model_id, exc)
        return None, f"{type(exc).__name__}: {exc}"


def run_zoo(manifest: ZooManifest, out, jobs: int = 1) -> ZooBundle:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "manifest.json", manifest.to_dict())
    tasks = [(cfg, out, tuple(manifest.eps), tuple(manifest.splits), manifest.eval, manifest.cross_section)
             for cfg in manifest.models]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_safe, tasks))
    else:
        results = [_evaluate_safe(t) for t in tasks]
    summaries, failures = [], {}
    for cfg, (summary, err) in zip(manifest.models, results):
        if err is None:
            summaries.append(summary)
        else:
            failures[cfg.model_id] = err
    bundle = ZooBundle(summaries, failures)
    bundle.correlations = write_aggregates(summaries, failures, out, digest(manifest.to_dict()))
    return bundle


def gap_columns(summary: dict, eps: float) -> dict[str, float]:
    row = next(b for b in summary["benchmarks"] if eps_tag(b["epsilon"]) == eps_tag(eps))
    return {"fgsm_minus_strong": row["fgsm"] - row["strong"], "fgsm_minus_pgd": row["fgsm"] - row["pgd"]}


def metrics_at(summary: dict, eps: float, split: str = "test") -> dict[str, float]:
    """Metric means relevant to one bound, keyed by bare metric name."""
    cols = summary["metrics"].get(split, {})
    out = {}
    for name in METRICS:
        key = f"{name}@{eps_tag(eps)}" if name in EPS_METRICS else name
        if key in cols:
            out[name] = cols[key]
    return out


def correlations(summaries: list[dict], split: str = "test") -> dict:
    """Per-bound correlation matrices across the zoo (models missing a metric are dropped)."""
    if not summaries:
        return {"by_epsilon": {}, "split": split}
    eps_list = [b["epsilon"] for b in summaries[0]["benchmarks"]]
    result = {}
    for e in eps_list:
        rows = [(s["model_id"], metrics_at(s, e, split), gap_columns(s, e)) for s in summaries]
        common = set.intersection(*(set(m) for _, m, _ in rows))
        rows = [(mid, {k: v for k, v in m.items() if k in common}, g) for mid, m, g in rows]
        try:
            result[eps_tag(e)] = {"epsilon": e, **dg.correlation_matrix(rows).to_dict()}
        except ValueError as exc:
            result[eps_tag(e)] = {"epsilon": e, "error": str(exc)}
    return {"by_epsilon": result, "split": split}


BENCH_COLUMNS = ["model_id", "regime", "epsilon", "clean", "fgsm", "step_ll", "pgd", "strong", "spsa", "unbounded",
                 "fgsm_minus_pgd", "fgsm_minus_strong"]


def write_aggregates(summaries: list[dict], failures: dict, out: Path, manifest_digest: str) -> dict:
    bench_rows, metric_rows, scatter_rows = [], [], []
    for s in summaries:
        for b in s["benchmarks"]:
            bench_rows.append([s["model_id"], s["regime"], b["epsilon"], s["clean_acc"], b["fgsm"], b["step_ll"],
                               b["pgd"], b["strong"], b["spsa"], s["unbounded_acc"], b["fgsm"] - b["pgd"],
                               b["fgsm"] - b["strong"]])
        for split, cols in s["metrics"].items():
            for key in sorted(cols):
                name, _, tag = key.partition("@")
                metric_rows.append([s["model_id"], name, tag or "none", split, cols[key]])
        for b in s["benchmarks"]:
            gaps = gap_columns(s, b["epsilon"])
            for name, value in sorted(metrics_at(s, b["epsilon"]).items()):
                scatter_rows.append([s["model_id"], b["epsilon"], name, value, b["fgsm"], b["strong"],
                                     gaps["fgsm_minus_strong"], gaps["fgsm_minus_pgd"]])
    write_csv(out / "benchmarks.csv", BENCH_COLUMNS, bench_rows)
    write_csv(out / "metrics.csv", ["model_id", "metric", "epsilon", "split", "mean"], metric_rows)
    write_csv(out / "scatter.csv", ["model_id", "epsilon", "metric", "metric_mean", "fgsm_acc", "strong_acc",
                                    "fgsm_minus_strong", "fgsm_minus_pgd"], scatter_rows)
    corr = correlations(summaries)
    write_json(out / "correlations.json", {**corr, "manifest_digest": manifest_digest, "tool_version": TOOL_VERSION,
                                           "strong_attack": dg.STRONG_PGD.to_dict()})
    write_json(out / "failures.json", {"failures": failures, "manifest_digest": manifest_digest,
                                       "metric_errors": {s["model_id"]: s["errors"] for s in summaries if s["errors"]},
                                       "tool_version": TOOL_VERSION})
    return corr


def reseeded(manifest: ZooManifest, seed: int) -> ZooManifest:
    from .config import with_seed

    return replace(manifest, models=tuple(with_seed(m, seed) for m in manifest.models),
                   eval=replace(manifest.eval, seed=seed))
