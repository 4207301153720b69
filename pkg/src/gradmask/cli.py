"""Command-line driver.

    python -m gradmask [--out DIR] [--seed N] [--jobs N] <command> ...

Commands: train, attack, metrics, checklist, cross-section, zoo, report.
Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 partial
failure.  Errors are also printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import diagnostics as dg
from .attacks import AttackSpec, result_to_bytes, run_attack
from .config import (ConfigError, CrossSectionSpec, ExperimentConfig, default_manifest, load_config,
                     load_manifest, with_seed)
from .io import TOOL_VERSION, atomic_write_bytes, write_csv, write_json
from .metrics import METRICS, run_metric_suite
from .models import load_model
from .training import TrainingDivergedError
from .zoo import (config_digest, eps_tag, eval_set, load_or_train, reseeded, run_zoo, train_outputs,
                  write_aggregates)

log = logging.getLogger("gradmask")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


class PartialFailure(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg if args.seed is None else with_seed(cfg, args.seed)


def _model(args, cfg: ExperimentConfig, out: Path):
    if getattr(args, "model", None):
        return load_model(args.model)
    return load_or_train(cfg, out)


def _splits(choice: str) -> list[str]:
    return ["train", "test"] if choice == "both" else [choice]


# commands --------------------------------------------------------------------------

def cmd_train(args, out: Path) -> int:
    cfg = _config(args)
    try:
        _, body = train_outputs(cfg, out)
    except TrainingDivergedError as exc:
        write_json(out / f"{cfg.model_id}_error.json", {"error": "diverged", "epoch": exc.epoch, "batch": exc.batch,
                                                        "message": str(exc), "config_digest": config_digest(cfg),
                                                        "tool_version": TOOL_VERSION})
        raise
    acc = body["final_clean_acc"]
    print(f"trained {cfg.model_id}: {out / (cfg.model_id + '.model')} (clean acc train {acc['train']:.4f}, test {acc['test']:.4f})")
    return EXIT_OK


def _attack_specs(cfg: ExperimentConfig) -> list[AttackSpec]:
    if cfg.attacks:
        return list(cfg.attacks)
    return [AttackSpec(kind, e, seed=cfg.seed) for e in cfg.metric_eps for kind in ("fgsm", "pgd")]


def cmd_attack(args, out: Path) -> int:
    cfg = _config(args)
    model = _model(args, cfg, out)
    cdig = config_digest(cfg)
    for split in _splits(args.split):
        ds = eval_set(cfg, split)
        for spec in _attack_specs(cfg):
            res = run_attack(model, ds.X, ds.y, spec)
            eps = spec.eps if spec.kind not in ("pgd_unbounded", "deepfool") else None
            stem = f"{cfg.model_id}_attack_{spec.kind}_{eps_tag(eps)}_{split}"
            atomic_write_bytes(out / f"{stem}.bin", result_to_bytes(res, spec))
            write_json(out / f"{stem}.json", {
                "model_id": cfg.model_id, "attack": spec.to_dict(), "split": split, "n": len(ds),
                "accuracy": res.accuracy, "mean_loss": float(res.loss_achieved.mean()),
                "config_digest": cdig, "tool_version": TOOL_VERSION})
            print(f"{stem}: accuracy {res.accuracy:.4f}")
    return EXIT_OK


def cmd_metrics(args, out: Path) -> int:
    cfg = _config(args)
    names = tuple(args.metric) if args.metric else METRICS
    unknown = [m for m in names if m not in METRICS]
    if unknown:
        raise ConfigError("metric", f"unknown metric {unknown[0]!r} (valid: {', '.join(METRICS)})")
    eps_list = tuple(args.eps) if args.eps else cfg.metric_eps
    if not eps_list:
        raise ConfigError("eps", "empty epsilon list")
    model = _model(args, cfg, out)
    cdig = config_digest(cfg)
    failures = {}
    for split in _splits(args.split):
        reports, errors = run_metric_suite(model, eval_set(cfg, split), eps_list, cfg.model_id, cdig, names)
        for rep in reports:
            path = out / f"{cfg.model_id}_{rep.metric}_{eps_tag(rep.epsilon)}_{split}.json"
            write_json(path, rep.to_dict())
            print(f"{path.name}: mean {rep.mean:.6g} (n={rep.n}, excluded={rep.excluded})")
        failures.update({f"{split}:{k}": v for k, v in errors.items()})
    if failures:
        write_json(out / f"{cfg.model_id}_metrics_failures.json",
                   {"model_id": cfg.model_id, "failures": failures, "config_digest": cdig, "tool_version": TOOL_VERSION})
        raise PartialFailure(f"{len(failures)} metric computation(s) failed")
    return EXIT_OK


def cmd_checklist(args, out: Path) -> int:
    cfg = _config(args)
    model = _model(args, cfg, out)
    eps_list = tuple(args.eps) if args.eps else cfg.metric_eps
    rep = dg.run_checklist(model, eval_set(cfg, "test"), eps_list, margin=args.margin, seed=cfg.seed)
    write_json(out / f"{cfg.model_id}_checklist.json",
               {"model_id": cfg.model_id, "config_digest": config_digest(cfg), **rep.to_dict()})
    for name, flag in rep.flags().items():
        print(f"{name}: {flag}")
    print(f"overall_suspect: {rep.overall_suspect}")
    if rep.errors:
        raise PartialFailure(f"{len(rep.errors)} checklist item(s) failed")
    return EXIT_OK


def cmd_cross_section(args, out: Path) -> int:
    cfg = _config(args)
    try:
        spec = CrossSectionSpec(args.t_max if args.t_max is not None else cfg.cross_section.t_max,
                                args.K if args.K is not None else cfg.cross_section.K)
    except ValueError as exc:
        raise ConfigError("cross_section", str(exc)) from None
    model = _model(args, cfg, out)
    section = dg.loss_cross_section(model, eval_set(cfg, "test"), spec.t_max, spec.K)
    header, rows = section.csv_rows()
    write_csv(out / f"{cfg.model_id}_cross_section.csv", header, rows)
    write_json(out / f"{cfg.model_id}_cross_section.json",
               {"model_id": cfg.model_id, "config_digest": config_digest(cfg), **section.to_dict()})
    print(f"peak of mean loss at grid index {section.peak_index} of {spec.K}")
    return EXIT_OK


def cmd_zoo(args, out: Path) -> int:
    manifest = load_manifest(args.manifest) if args.manifest else default_manifest(args.seed or 0)
    if args.manifest and args.seed is not None:
        manifest = reseeded(manifest, args.seed)
    bundle = run_zoo(manifest, out, args.jobs)
    print(report_text(out))
    if bundle.failures and not bundle.summaries:
        raise RuntimeError("every model in the zoo failed; see failures.json")
    if bundle.partial:
        raise PartialFailure("some models or metrics failed; see failures.json")
    return EXIT_OK


def _load_summaries(out: Path) -> tuple[list[dict], dict, str]:
    from .config import ZooManifest
    from .io import digest

    mpath = out / "manifest.json"
    if not mpath.exists():
        raise ConfigError("out", f"{out} holds no zoo bundle (manifest.json missing)")
    manifest = ZooManifest.from_dict(json.loads(mpath.read_text()))
    summaries, failures = [], {}
    for cfg in manifest.models:
        p = out / f"{cfg.model_id}_summary.json"
        if p.exists():
            summaries.append(json.loads(p.read_text()))
        else:
            failures[cfg.model_id] = "no summary on disk"
    return summaries, failures, digest(manifest.to_dict())


def report_text(out: Path) -> str:
    summaries, _, _ = _load_summaries(out)
    lines = [f"{'model':<14}{'eps':>8}{'clean':>7}{'fgsm':>7}{'pgd':>7}{'strong':>7}{'spsa':>7}  suspect"]
    for s in summaries:
        for b in s["benchmarks"]:
            label = f"{b['epsilon'] * 255:.3g}/255"
            lines.append(f"{s['model_id']:<14}{label:>8}"
                         + f"{s['clean_acc']:>7.3f}{b['fgsm']:>7.3f}{b['pgd']:>7.3f}{b['strong']:>7.3f}{b['spsa']:>7.3f}"
                         + f"  {s['checklist']['overall_suspect']}")
    return "\n".join(lines)


def cmd_report(args, out: Path) -> int:
    src = Path(args.bundle) if args.bundle else out
    summaries, failures, mdig = _load_summaries(src)
    write_aggregates(summaries, failures, out, mdig)
    text = report_text(src)
    atomic_write_bytes(out / "report.txt", (text + "\n").encode())
    print(text)
    if failures:
        raise PartialFailure(f"{len(failures)} model(s) missing from the bundle")
    return EXIT_OK


# parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradmask", description="Measure gradient masking in small models.")
    p.add_argument("--out", default="runs", help="output directory (nothing is written outside it)")
    p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    p.add_argument("--jobs", type=int, default=1, help="parallel model jobs for zoo runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_model(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--model", help="model file; default <out>/<name>.model, trained if missing")

    sp = sub.add_parser("train", help="train one model")
    sp.add_argument("config")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("attack", help="run the config's attacks")
    with_model(sp)
    sp.add_argument("--split", choices=["train", "test", "both"], default="test")
    sp.set_defaults(fn=cmd_attack)

    sp = sub.add_parser("metrics", help="masking metrics, one JSON per metric and bound")
    with_model(sp)
    sp.add_argument("--split", choices=["train", "test", "both"], default="test")
    sp.add_argument("--metric", action="append", help=f"restrict to a metric (repeatable): {', '.join(METRICS)}")
    sp.add_argument("--eps", type=float, action="append", help="distortion bound (repeatable)")
    sp.set_defaults(fn=cmd_metrics)

    sp = sub.add_parser("checklist", help="behavioural masking checklist")
    with_model(sp)
    sp.add_argument("--eps", type=float, action="append")
    sp.add_argument("--margin", type=float, default=dg.CHECKLIST_MARGIN)
    sp.set_defaults(fn=cmd_checklist)

    sp = sub.add_parser("cross-section", help="loss along the gradient-sign direction")
    with_model(sp)
    sp.add_argument("--t-max", dest="t_max", type=float)
    sp.add_argument("--K", type=int)
    sp.set_defaults(fn=cmd_cross_section)

    sp = sub.add_parser("zoo", help="train and evaluate a model zoo")
    sp.add_argument("manifest", nargs="?", help="zoo manifest (JSON); default: the built-in seven-model zoo")
    sp.set_defaults(fn=cmd_zoo)

    sp = sub.add_parser("report", help="rebuild the aggregate tables from a zoo bundle")
    sp.add_argument("bundle", nargs="?", help="zoo output directory; default --out")
    sp.set_defaults(fn=cmd_report)
    return p


def _error_json(kind: str, exc: Exception, **extra) -> str:
    return json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), **extra}, sort_keys=True)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.jobs < 1:
            raise ConfigError("jobs", "must be >= 1")
        out.mkdir(parents=True, exist_ok=True)
        return args.fn(args, out)
    except ConfigError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return EXIT_CONFIG
    except PartialFailure as exc:
        print(_error_json("partial", exc), file=sys.stderr)
        return EXIT_PARTIAL
    except TrainingDivergedError as exc:
        print(_error_json("diverged", exc, epoch=exc.epoch, batch=exc.batch), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("runtime error", exc_info=True)
        print(_error_json("runtime", exc), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
