"""L-infinity attacks (FGSM, Step-ll, PGD, SPSA, random sign), unbounded PGD and L2 DeepFool.

All attacks operate on numpy batches ``x`` of shape (N, D) in [0, 1] and
return a :class:`PerturbationResult`.  Randomness is drawn from one
generator per example keyed on ``(seed, example index, restart)``, so results
do not depend on how a batch is split.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
import json
import struct

import numpy as np

from .models import Model, loss_and_input_gradient, logit_gradient, logits, per_example_loss
from . import tensor as T

KINDS = ("fgsm", "step_ll", "pgd", "pgd_unbounded", "random_sign", "spsa", "deepfool")
BOUNDED = ("fgsm", "step_ll", "pgd", "random_sign", "spsa")
LINF_TOL = 1e-9


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "pgd"
    eps: float = 8 / 255
    iterations: int = 25
    relative_step: float = 0.1
    restarts: int = 1
    spsa_samples: int = 256
    seed: int = 0
    capture_trajectory: bool = False
    random_start: bool = True
    step: float | None = None  # absolute step: pgd_unbounded and spsa
    sigma: float = 0.01  # spsa finite-difference radius
    max_iter: int = 50  # deepfool
    overshoot: float = 0.02  # deepfool

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.iterations < 1 or self.restarts < 1 or self.max_iter < 1:
            raise ValueError("iterations, restarts and max_iter must be >= 1")
        if self.relative_step <= 0:
            raise ValueError("relative_step must be > 0")
        if self.kind == "spsa" and (self.spsa_samples < 2 or self.spsa_samples % 2):
            raise ValueError("spsa_samples must be an even number >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


@dataclass
class PerturbationResult:
    delta: np.ndarray
    x_adv: np.ndarray
    success: np.ndarray
    loss_achieved: np.ndarray
    trajectory: list[np.ndarray] | None = None
    converged: np.ndarray | None = None  # deepfool only
    iterations: np.ndarray | None = None  # deepfool only
    kind: str = ""
    eps: float | None = None

    @property
    def accuracy(self) -> float:
        return float(1.0 - self.success.mean()) if self.success.size else float("nan")


def project_linf(delta, eps: float) -> np.ndarray:
    return np.clip(delta, -eps, eps)


def _sign(g: np.ndarray) -> np.ndarray:
    # np.sign maps 0 to 0: no movement along coordinates without gradient signal
    return np.sign(g)


def _ascent_step(x0: np.ndarray, xk: np.ndarray, direction: np.ndarray, alpha: float, eps: float) -> np.ndarray:
    return np.clip(x0 + project_linf(xk + alpha * direction - x0, eps), 0.0, 1.0)


def _finish(model: Model, x, y, x_adv, kind, eps, trajectory=None, check=True) -> PerturbationResult:
    delta = x_adv - x
    if check:
        _assert_bounded(delta, x_adv, eps)
    per, z = _loss_and_logits(model, x_adv, y)
    return PerturbationResult(delta, x_adv, z.argmax(axis=1) != y, per, trajectory, kind=kind, eps=eps)


def _loss_and_logits(model: Model, x, y):
    z = model.forward(T.Tensor(x))
    per = T.softmax_cross_entropy(z, y, reduction="none")
    return np.array(per.data), np.array(z.data)


def _assert_bounded(delta: np.ndarray, x_adv: np.ndarray, eps: float) -> None:
    if delta.size and np.abs(delta).max() > eps + LINF_TOL:
        raise AttackError(f"perturbation left the eps-ball: {np.abs(delta).max()} > {eps}")
    if x_adv.size and (x_adv.min() < 0.0 or x_adv.max() > 1.0):
        raise AttackError("adversarial input left [0, 1]")


def _example_rng(seed: int, i: int, restart: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(i), int(restart)])


def _prep(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError(f"batch must be (N, D) with (N,) labels, got {x.shape} and {y.shape}")
    return x, y


# single step -------------------------------------------------------------------

def fgsm(model: Model, x, y, eps: float) -> PerturbationResult:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x, y = _prep(x, y)
    _, g, _ = loss_and_input_gradient(model, x, y)
    x_adv = _ascent_step(x, x, _sign(g), eps, eps)
    return _finish(model, x, y, x_adv, "fgsm", eps)


def least_likely_class(z: np.ndarray) -> np.ndarray:
    # argmin takes the first minimum: ties go to the lowest class index
    return z.argmin(axis=1)


def step_ll(model: Model, x, y, eps: float) -> PerturbationResult:
    """One signed step that decreases the loss toward the least-likely class."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x, y = _prep(x, y)
    y_ll = least_likely_class(logits(model, x))
    _, g, _ = loss_and_input_gradient(model, x, y_ll)
    x_adv = _ascent_step(x, x, -_sign(g), eps, eps)
    return _finish(model, x, y, x_adv, "step_ll", eps)


# iterative ---------------------------------------------------------------------

def pgd(model: Model, x, y, spec: AttackSpec) -> PerturbationResult:
    """L-infinity PGD with per-example best-of-restarts selection on the final loss."""
    if spec.eps == 0:
        return _finish(model, *_prep(x, y), np.asarray(x, dtype=np.float64).copy(), "pgd", 0.0,
                       [np.zeros_like(x)] * spec.iterations if spec.capture_trajectory else None)
    x, y = _prep(x, y)
    n, d = x.shape
    eps = spec.eps
    alpha = spec.relative_step * eps
    best_x = best_loss = best_traj = None
    for r in range(spec.restarts):
        if spec.random_start:
            noise = np.stack([_example_rng(spec.seed, i, r).uniform(-eps, eps, d) for i in range(n)]) if n else np.zeros((0, d))
            xk = np.clip(x + noise, 0.0, 1.0)
        else:
            xk = x
        traj = [] if spec.capture_trajectory else None
        for _ in range(spec.iterations):
            _, g, _ = loss_and_input_gradient(model, xk, y)
            s = _sign(g)
            if traj is not None:
                traj.append(s)
            xk = _ascent_step(x, xk, s, alpha, eps)
        final_loss, _ = _loss_and_logits(model, xk, y)
        if best_x is None:
            best_x, best_loss, best_traj = xk, final_loss, traj
        else:
            better = final_loss > best_loss
            best_x = np.where(better[:, None], xk, best_x)
            best_loss = np.where(better, final_loss, best_loss)
            if traj is not None:
                best_traj = [np.where(better[:, None], a, b) for a, b in zip(traj, best_traj)]
    return _finish(model, x, y, best_x, "pgd", eps, best_traj)


def pgd_unbounded(model: Model, x, y, iterations: int = 200, step: float = 0.05) -> PerturbationResult:
    """Signed-gradient ascent with no eps-ball; only the [0, 1] box is enforced."""
    if iterations < 1 or not step > 0:
        raise ValueError("pgd_unbounded needs iterations >= 1 and step > 0")
    x, y = _prep(x, y)
    xk = x
    for _ in range(iterations):
        _, g, _ = loss_and_input_gradient(model, xk, y)
        xk = np.clip(xk + step * _sign(g), 0.0, 1.0)
    return _finish(model, x, y, xk, "pgd_unbounded", None, check=False)


def random_sign(x, eps: float, seed: int, model: Model | None = None, y=None) -> PerturbationResult:
    """Random vertex of the eps-ball; gradient free and model independent."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    s = np.stack([_example_rng(seed, i).choice([-1.0, 1.0], size=d) for i in range(n)]) if n else np.zeros((0, d))
    x_adv = np.clip(x + eps * s, 0.0, 1.0)
    delta = x_adv - x
    _assert_bounded(delta, x_adv, eps)
    if model is None:
        return PerturbationResult(delta, x_adv, np.zeros(n, dtype=bool), np.full(n, np.nan), kind="random_sign", eps=eps)
    y = np.asarray(y, dtype=np.int64)
    return _finish(model, x, y, x_adv, "random_sign", eps)


# black box ---------------------------------------------------------------------

class LossOracle:
    """Black-box view of a model: per-example loss values only, never gradients."""

    def __init__(self, model: Model):
        self._model = model
        self.calls = 0

    def __call__(self, x, y) -> np.ndarray:
        self.calls += 1
        return per_example_loss(self._model, x, y)

    def predict(self, x) -> np.ndarray:
        return logits(self._model, x).argmax(axis=1)


def spsa_gradient_estimate(oracle, x, y, directions: np.ndarray, sigma: float) -> np.ndarray:
    """Simultaneous-perturbation gradient estimate.

    ``directions`` has shape (N, P, D) with entries in {-1, +1}; each of the P
    directions costs two loss evaluations.
    """
    n, p, d = directions.shape
    xs = x[:, None, :]
    pts = np.concatenate([xs + sigma * directions, xs - sigma * directions], axis=1).reshape(-1, d)
    ys = np.repeat(y, 2 * p)
    losses = oracle(pts, ys).reshape(n, 2, p)
    diff = (losses[:, 0] - losses[:, 1]) / (2.0 * sigma)  # N, P
    # 1/Delta == Delta for Rademacher directions
    return (diff[:, :, None] * directions).mean(axis=1)


def spsa(model: Model, x, y, spec: AttackSpec) -> PerturbationResult:
    x, y = _prep(x, y)
    n, d = x.shape
    eps = spec.eps
    oracle = LossOracle(model)
    if eps == 0:
        return _finish(model, x, y, x.copy(), "spsa", 0.0)
    step = spec.step if spec.step is not None else eps / spec.iterations
    pairs = spec.spsa_samples // 2
    rngs = [_example_rng(spec.seed, i) for i in range(n)]
    xk = x
    for _ in range(spec.iterations):
        dirs = np.stack([r.choice([-1.0, 1.0], size=(pairs, d)) for r in rngs]) if n else np.zeros((0, pairs, d))
        g = spsa_gradient_estimate(oracle, xk, y, dirs, spec.sigma)
        xk = _ascent_step(x, xk, _sign(g), step, eps)
    return _finish(model, x, y, xk, "spsa", eps)


# minimal perturbation ------------------------------------------------------------

def class_gradients(model: Model, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits (N, C) and per-example logit gradients (N, C, D), one backward pass per class."""
    c = model.spec.num_classes
    grads = []
    z = None
    for k in range(c):
        w = np.zeros((x.shape[0], c))
        w[:, k] = 1.0
        g, z = logit_gradient(model, x, w)
        grads.append(g)
    return z, np.stack(grads, axis=1)


REFINE_STEPS = 40


def _first_flip(model: Model, x: np.ndarray, p: np.ndarray, label: np.ndarray, steps: int = REFINE_STEPS) -> np.ndarray:
    """Per row, the smallest s in (0, 1] (to bisection precision) with predict(clamp(x + s p)) != label.

    Rows must already be flipped at s = 1.
    """
    lo = np.zeros(x.shape[0])
    hi = np.ones(x.shape[0])
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        flipped = logits(model, np.clip(x + mid[:, None] * p, 0.0, 1.0)).argmax(axis=1) != label
        hi = np.where(flipped, mid, hi)
        lo = np.where(flipped, lo, mid)
    return hi


def deepfool(model: Model, x, y=None, max_iter: int = 50, overshoot: float = 0.02,
             refine: bool = False) -> PerturbationResult:
    """Multi-class L2 DeepFool; non-converged examples are flagged, not raised.

    ``refine`` shrinks each converged perturbation to the first label flip
    along its own ray and re-applies the overshoot there, removing the
    overshoot a single linearised step can pick up on sharply curved models.
    """
    if max_iter < 1 or model.spec.num_classes < 2:
        raise ValueError("deepfool needs max_iter >= 1 and at least two classes")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    k0 = logits(model, x).argmax(axis=1)
    y = k0 if y is None else np.asarray(y, dtype=np.int64)
    r_tot = np.zeros_like(x)
    x_adv = x.copy()
    active = np.ones(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        z, G = class_gradients(model, x_adv[idx])
        k = k0[idx]
        w = G - G[np.arange(idx.size), k][:, None, :]
        f = z - z[np.arange(idx.size), k][:, None]
        wn = np.linalg.norm(w, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(wn > 0, np.abs(f) / wn, np.inf)
        dist[np.arange(idx.size), k] = np.inf
        best = dist.argmin(axis=1)
        sel = np.arange(idx.size)
        wb, fb, nb = w[sel, best], f[sel, best], wn[sel, best]
        movable = np.isfinite(dist[sel, best])
        coef = np.where(movable, np.abs(fb) / np.where(movable, nb * nb, 1.0), 0.0)
        r_tot[idx] += coef[:, None] * wb
        x_adv[idx] = np.clip(x[idx] + (1.0 + overshoot) * r_tot[idx], 0.0, 1.0)
        iters[idx] += 1
        flipped = logits(model, x_adv[idx]).argmax(axis=1) != k
        active[idx[flipped]] = False
        active[idx[~movable]] = False
    pred = logits(model, x_adv).argmax(axis=1)
    converged = pred != k0
    if refine and converged.any():
        idx = np.flatnonzero(converged)
        p = x_adv[idx] - x[idx]
        s = _first_flip(model, x[idx], p, k0[idx])
        cand = np.clip(x[idx] + (1.0 + overshoot) * s[:, None] * p, 0.0, 1.0)
        keep = logits(model, cand).argmax(axis=1) != k0[idx]
        x_adv[idx[keep]] = cand[keep]
        pred = logits(model, x_adv).argmax(axis=1)
    per, _ = _loss_and_logits(model, x_adv, y)
    return PerturbationResult(x_adv - x, x_adv, pred != y, per, converged=converged, iterations=iters,
                              kind="deepfool")


# dispatch and persistence ------------------------------------------------------------

def run_attack(model: Model, x, y, spec: AttackSpec) -> PerturbationResult:
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec.eps)
    if spec.kind == "step_ll":
        return step_ll(model, x, y, spec.eps)
    if spec.kind == "pgd":
        return pgd(model, x, y, spec)
    if spec.kind == "pgd_unbounded":
        return pgd_unbounded(model, x, y, spec.iterations, spec.step if spec.step is not None else 0.05)
    if spec.kind == "random_sign":
        return random_sign(x, spec.eps, spec.seed, model, y)
    if spec.kind == "spsa":
        return spsa(model, x, y, spec)
    return deepfool(model, x, y, spec.max_iter, spec.overshoot)


RESULT_MAGIC = b"GMSKPRT\0"


def result_to_bytes(result: PerturbationResult, spec: AttackSpec) -> bytes:
    """Replay artifact: JSON header (spec, shape, success) followed by the float64 deltas."""
    header = {
        "spec": spec.to_dict(),
        "shape": list(result.delta.shape),
        "success": [bool(s) for s in result.success],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    raw = np.ascontiguousarray(result.delta, dtype="<f8").tobytes()
    return RESULT_MAGIC + struct.pack("<Q", len(hb)) + hb + raw


def result_from_bytes(blob: bytes) -> tuple[dict, np.ndarray]:
    if not blob.startswith(RESULT_MAGIC):
        raise ValueError("not a perturbation artifact")
    pos = len(RESULT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos:pos + hlen])
    delta = np.frombuffer(blob[pos + hlen:], dtype="<f8").reshape(header["shape"]).astype(np.float64)
    return header, delta
