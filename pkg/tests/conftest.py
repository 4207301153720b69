import numpy as np
import pytest

from gradmask.config import ZOO_TRAIN, default_manifest
from gradmask.datasets import gen_blobs, subsample
from gradmask.models import Model, ModelSpec
from gradmask.training import TrainConfig, train


def linear_model(D=6, C=3, seed=0, bias_scale=0.3):
    """Random affine softmax model: logits = x W^T + b."""
    m = Model(ModelSpec("linear", (), input_dim=D, num_classes=C, seed=seed))
    rng = np.random.default_rng(seed + 100)
    m.params["b0"] = bias_scale * rng.standard_normal(C)
    return m


def interior_points(n, D, seed=0, lo=0.35, hi=0.65):
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, D))


@pytest.fixture(scope="session")
def blobs():
    return gen_blobs(16, 3, 100, 0.15, 0, "train"), gen_blobs(16, 3, 100, 0.15, 0, "test")


@pytest.fixture(scope="session")
def zoo_models(blobs):
    """The standard and PGD-trained models of the default zoo, seed 0."""
    train_ds, _ = blobs
    out = {}
    for cfg in default_manifest(0).models:
        if cfg.name in ("standard", "pgd_8"):
            out[cfg.name] = train(cfg.model, train_ds, cfg.train).model
    return out


@pytest.fixture(scope="session")
def standard_model(zoo_models):
    return zoo_models["standard"]


@pytest.fixture(scope="session")
def test_subset(blobs):
    return subsample(blobs[1], 200, 0)


def quick_config(**kw):
    return TrainConfig(**{**ZOO_TRAIN, "epochs": 5, **kw})


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
