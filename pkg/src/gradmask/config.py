"""JSON experiment configs and zoo manifests.

Every field is validated on load and errors name the offending field by its
dotted path (``train.regime.attack.eps``).  ``to_dict`` output loads back to
an equal object, so a config file round-trips losslessly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .attacks import AttackSpec
from .models import ModelSpec
from .training import Regime, TrainConfig

EPS_SMALL = 8 / 255
EPS_LARGE = 16 / 255


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}" if field_path else message)
        self.field = field_path
        self.message = message

    def to_dict(self) -> dict:
        return {"error": "config", "field": self.field, "message": self.message}


_SCALARS = {"int": int, "float": (int, float), "bool": bool, "str": str}


def _check_value(value, annot: str, path: str):
    """Type-check one value against a (string) annotation; returns the normalised value."""
    annot = annot.replace(" ", "")
    if annot.endswith("|None"):
        return None if value is None else _check_value(value, annot[:-5], path)
    if annot in _SCALARS:
        ok = isinstance(value, _SCALARS[annot]) and (annot == "bool" or not isinstance(value, bool))
        if not ok:
            raise ConfigError(path, f"expected {annot}, got {type(value).__name__}")
        return float(value) if annot == "float" else value
    if annot.startswith("tuple[") and annot.endswith(",...]"):
        inner = annot[len("tuple["):-len(",...]")]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return tuple(_check_value(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if annot == "dict":
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {type(value).__name__}")
        return value
    raise AssertionError(f"unhandled annotation {annot}")


def _build(cls, data, path: str, nested: dict | None = None, skip=()):
    """Construct dataclass ``cls`` from a JSON object with per-field errors."""
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    nested = nested or {}
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, f"unknown field (valid: {', '.join(sorted(known))})")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in nested:
            kwargs[name] = nested[name](value, sub)
        else:
            kwargs[name] = _check_value(value, known[name].type, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def attack_from_json(data, path: str) -> AttackSpec:
    return _build(AttackSpec, data, path)


def regime_from_json(data, path: str) -> Regime:
    return _build(Regime, data, path, {"attack": lambda v, p: None if v is None else attack_from_json(v, p)})


def train_from_json(data, path: str) -> TrainConfig:
    return _build(TrainConfig, data, path, {"regime": regime_from_json})


def regime_to_json(r: Regime) -> dict:
    return {"kind": r.kind, "attack": None if r.attack is None else r.attack.to_dict(), "lam": r.lam,
            "threshold": r.threshold}


def train_to_json(t: TrainConfig) -> dict:
    d = {f.name: getattr(t, f.name) for f in fields(t)}
    d["regime"] = regime_to_json(t.regime)
    return d


def default_dataset(seed: int = 0) -> dict:
    return {"name": "blobs", "D": 16, "C": 3, "n_per_class": 100, "spread": 0.15, "seed": seed}


def _check_dataset(value, path: str) -> dict:
    value = _check_value(value, "dict", path)
    name = value.get("name", "blobs")
    allowed = {"blobs": {"name", "D", "C", "n_per_class", "spread", "seed"},
               "rings": {"name", "D", "n_per_class", "noise", "seed"}}
    if name not in allowed:
        raise ConfigError(f"{path}.name", f"unknown dataset {name!r} (valid: blobs, rings)")
    missing = sorted(allowed[name] - {"name"} - set(value))
    if missing:
        raise ConfigError(f"{path}.{missing[0]}", "required field missing")
    extra = sorted(set(value) - allowed[name])
    if extra:
        raise ConfigError(f"{path}.{extra[0]}", "unknown field")
    for k, v in value.items():
        if k == "name":
            continue
        annot = "float" if k in ("spread", "noise") else "int"
        _check_value(v, annot, f"{path}.{k}")
    return dict(value)


@dataclass(frozen=True)
class CrossSectionSpec:
    t_max: float = 2 * EPS_LARGE
    K: int = 17

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValueError("t_max must be > 0")
        if self.K < 2:
            raise ValueError("K must be >= 2")


@dataclass(frozen=True)
class EvalSpec:
    test_size: int = 200
    train_size: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.test_size < 1 or self.train_size < 1:
            raise ValueError("evaluation subset sizes must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int = 0
    dataset: dict = field(default_factory=default_dataset)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: tuple[AttackSpec, ...] = ()
    metric_eps: tuple[float, ...] = (EPS_SMALL, EPS_LARGE)
    eval: EvalSpec = field(default_factory=EvalSpec)
    cross_section: CrossSectionSpec = field(default_factory=CrossSectionSpec)

    def __post_init__(self):
        if not self.name or any(c in self.name for c in "/\\") or self.name.startswith("."):
            raise ValueError("name must be a non-empty file-name-safe string")
        if not self.metric_eps or any(not e > 0 for e in self.metric_eps):
            raise ValueError("metric_eps must be a nonempty list of positive values")

    @property
    def model_id(self) -> str:
        return self.name

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "dataset": dict(self.dataset),
            "model": self.model.to_dict(),
            "train": train_to_json(self.train),
            "attacks": [a.to_dict() for a in self.attacks],
            "metric_eps": list(self.metric_eps),
            "eval": {f.name: getattr(self.eval, f.name) for f in fields(self.eval)},
            "cross_section": {"t_max": self.cross_section.t_max, "K": self.cross_section.K},
        }

    @classmethod
    def from_dict(cls, data, path: str = "") -> "ExperimentConfig":
        if isinstance(data, dict) and "name" not in data:
            raise ConfigError(f"{path}.name" if path else "name", "required field missing")
        return _build(cls, data, path, {
            "dataset": _check_dataset,
            "model": lambda v, p: _build(ModelSpec, v, p),
            "train": train_from_json,
            "attacks": lambda v, p: tuple(attack_from_json(a, f"{p}[{i}]") for i, a in enumerate(_check_value(v, "tuple[dict,...]", p))),
            "eval": lambda v, p: _build(EvalSpec, v, p),
            "cross_section": lambda v, p: _build(CrossSectionSpec, v, p),
        })


@dataclass(frozen=True)
class ZooManifest:
    models: tuple[ExperimentConfig, ...]
    eps: tuple[float, ...] = (EPS_SMALL, EPS_LARGE)
    eval: EvalSpec = field(default_factory=EvalSpec)
    cross_section: CrossSectionSpec = field(default_factory=CrossSectionSpec)
    splits: tuple[str, ...] = ("test",)

    def __post_init__(self):
        if not self.models:
            raise ValueError("manifest lists no models")
        names = [m.name for m in self.models]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise ValueError(f"duplicate model names: {', '.join(dup)}")
        if not self.eps or any(not e > 0 for e in self.eps):
            raise ValueError("eps must be a nonempty list of positive values")
        bad = [s for s in self.splits if s not in ("train", "test")]
        if bad or not self.splits:
            raise ValueError("splits must be a nonempty subset of [train, test]")

    def to_dict(self) -> dict:
        return {
            "models": [m.to_dict() for m in self.models],
            "eps": list(self.eps),
            "eval": {f.name: getattr(self.eval, f.name) for f in fields(self.eval)},
            "cross_section": {"t_max": self.cross_section.t_max, "K": self.cross_section.K},
            "splits": list(self.splits),
        }

    @classmethod
    def from_dict(cls, data) -> "ZooManifest":
        if isinstance(data, dict) and "models" not in data:
            raise ConfigError("models", "required field missing")
        return _build(cls, data, "", {
            "models": lambda v, p: tuple(ExperimentConfig.from_dict(m, f"{p}[{i}]")
                                         for i, m in enumerate(_check_value(v, "tuple[dict,...]", p))),
            "eval": lambda v, p: _build(EvalSpec, v, p),
            "cross_section": lambda v, p: _build(CrossSectionSpec, v, p),
        })


def load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}", f"invalid JSON: {exc.msg}") from None


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(load_json(path))


def load_manifest(path) -> ZooManifest:
    return ZooManifest.from_dict(load_json(path))


# default zoo ---------------------------------------------------------------------

ZOO_TRAIN = dict(epochs=100, batch_size=16, learning_rate=0.05, momentum=0.9)
JACOBIAN_LAMBDA = 1e-4


def default_manifest(seed: int = 0) -> ZooManifest:
    """The seven-model desk-scale zoo: one undefended model, four adversarially
    trained models (single-step at both bounds, Step-ll and PGD) and the two
    gradient-regularised models."""
    regimes = {
        "standard": Regime(),
        "fgsm_8": Regime("adversarial", AttackSpec("fgsm", EPS_SMALL)),
        "fgsm_16": Regime("adversarial", AttackSpec("fgsm", EPS_LARGE)),
        "step_ll_16": Regime("adversarial", AttackSpec("step_ll", EPS_LARGE)),
        "pgd_8": Regime("adversarial", AttackSpec("pgd", EPS_SMALL, iterations=7, relative_step=0.25)),
        "jacobian": Regime("jacobian", lam=JACOBIAN_LAMBDA),
        "grad_clip": Regime("grad_clip"),
    }
    models = tuple(
        ExperimentConfig(
            name=name,
            seed=seed,
            dataset=default_dataset(seed),
            model=ModelSpec(seed=seed),
            train=TrainConfig(seed=seed, regime=regime, **ZOO_TRAIN),
        )
        for name, regime in regimes.items()
    )
    return ZooManifest(models)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Re-seed every seeded component of a config."""
    ds = dict(cfg.dataset, seed=seed)
    return replace(cfg, seed=seed, dataset=ds, model=replace(cfg.model, seed=seed), train=replace(cfg.train, seed=seed),
                   eval=replace(cfg.eval, seed=seed))
