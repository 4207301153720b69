"""Small classifiers: an MLP and a one-convolution net, plus a binary model file format."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

FORMAT_VERSION = 1
MAGIC = b"GMSKMDL\0"


class ModelFormatError(ValueError):
    """Model file is corrupt or of an unsupported version."""


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "mlp"  # "mlp" | "tinyconv" | "linear"
    widths: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    input_dim: int = 16
    num_classes: int = 3
    seed: int = 0
    channels: int = 8  # tinyconv only

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.architecture not in ("mlp", "tinyconv", "linear"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be >= 1 and num_classes >= 2")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.architecture == "tinyconv":
            side = math.isqrt(self.input_dim)
            if side * side != self.input_dim or side % 2:
                raise ValueError("tinyconv needs input_dim = s*s with even side s")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _uniform_he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: ModelSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    params: dict[str, np.ndarray] = {}
    d, c = spec.input_dim, spec.num_classes
    if spec.architecture == "linear":
        params["W0"] = _uniform_he(rng, d, (c, d))
        params["b0"] = np.zeros(c)
    elif spec.architecture == "mlp":
        dims = [d, *spec.widths, c]
        for i in range(len(dims) - 1):
            params[f"W{i}"] = _uniform_he(rng, dims[i], (dims[i + 1], dims[i]))
            params[f"b{i}"] = np.zeros(dims[i + 1])
    else:
        side = math.isqrt(d)
        k = spec.channels
        params["K"] = _uniform_he(rng, 9, (k, 1, 3, 3))
        params["kb"] = np.zeros(k)
        dims = [k * (side // 2) ** 2, *spec.widths, c]
        for i in range(len(dims) - 1):
            params[f"W{i}"] = _uniform_he(rng, dims[i], (dims[i + 1], dims[i]))
            params[f"b{i}"] = np.zeros(dims[i + 1])
    return params


class Model:
    """A classifier with parameters held as float64 arrays.

    ``forward`` builds the logit expression on the tape; pass ``params`` as a
    dict of :class:`Tensor` to differentiate with respect to the weights.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray] | None = None, provenance: str = "untrained"):
        self.spec = spec
        self.params = {k: np.array(v, dtype=np.float64) for k, v in (params or init_params(spec)).items()}
        self.provenance = provenance
        expected = init_params(spec) if params is not None else self.params
        for k, v in expected.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"parameter {k} missing or mis-shaped for {spec.architecture}")
        for k, v in self.params.items():
            if not np.isfinite(v).all():
                raise T.NonFiniteError(f"parameter {k} is not finite")

    def copy(self, provenance: str | None = None) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()}, provenance or self.provenance)

    def param_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def _act(self, h: Tensor) -> Tensor:
        return T.relu(h) if self.spec.activation == "relu" else T.tanh(h)

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        spec = self.spec
        if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
            raise T.ShapeError(f"model expects inputs of shape (N, {spec.input_dim}), got {x.shape}")
        p = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        if spec.architecture == "linear":
            return T.matmul(x, _transpose(p["W0"])) + p["b0"]
        h = x
        if spec.architecture == "tinyconv":
            n = x.shape[0]
            side = math.isqrt(spec.input_dim)
            k = spec.channels
            img = h.reshape(n, 1, side, side)
            z = T.conv2d(img, p["K"]) + p["kb"].reshape(1, k, 1, 1)
            z = self._act(z)
            half = side // 2
            pooled = z.reshape(n, k, half, 2, half, 2).sum(axis=(3, 5)) * 0.25
            h = pooled.reshape(n, k * half * half)
        n_dense = len(spec.widths) + 1
        for i in range(n_dense):
            h = T.matmul(h, _transpose(p[f"W{i}"])) + p[f"b{i}"]
            if i < n_dense - 1:
                h = self._act(h)
        return h


def _transpose(w: Tensor) -> Tensor:
    """2-D transpose as a tape op."""
    def backward(g):
        return (g.T,)

    return T._make(w.data.T, (w,), backward, "transpose")


# functional API ---------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def logits(model: Model, x) -> np.ndarray:
    return np.array(model.forward(_as_tensor(x)).data)


def predict(model: Model, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return logits(model, x).argmax(axis=1)


def _check_labels(model: Model, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= model.spec.num_classes):
        raise ValueError(f"labels must lie in [0, {model.spec.num_classes})")
    return y


def loss(model: Model, x, y) -> float:
    y = _check_labels(model, y)
    return float(T.softmax_cross_entropy(model.forward(_as_tensor(x)), y).data)


def per_example_loss(model: Model, x, y) -> np.ndarray:
    y = _check_labels(model, y)
    return np.array(T.softmax_cross_entropy(model.forward(_as_tensor(x)), y, reduction="none").data)


def input_gradient(model: Model, x, y) -> np.ndarray:
    """Row i is the gradient of L(x_i, y_i) with respect to x_i."""
    y = _check_labels(model, y)
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = T.softmax_cross_entropy(model.forward(xt), y, reduction="sum")
    return T.backward_grad(out, xt)


def loss_and_input_gradient(model: Model, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-example losses, per-example input gradients and the logits, from one pass."""
    y = _check_labels(model, y)
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    z = model.forward(xt)
    per = T.softmax_cross_entropy(z, y, reduction="none")
    g = T.grad(per.sum(), [xt])[0]
    return np.array(per.data), g, np.array(z.data)


def logit_gradient(model: Model, x, weights) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``sum_c weights[i, c] * l_c(x_i)`` w.r.t. each ``x_i``; also returns the logits.

    With one-hot or difference-of-one-hot weights this yields per-example
    gradients of a logit or a logit difference.
    """
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    z = model.forward(xt)
    out = (z * np.asarray(weights, dtype=np.float64)).sum()
    return T.backward_grad(out, xt), np.array(z.data)


def parameter_gradient(model: Model, x, y) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and its gradient w.r.t. every parameter."""
    y = _check_labels(model, y)
    params = model.param_tensors()
    out = T.softmax_cross_entropy(model.forward(Tensor(np.asarray(x, dtype=np.float64)), params), y)
    names = list(params)
    grads = T.grad(out, [params[k] for k in names])
    return float(out.data), dict(zip(names, grads))


# persistence ------------------------------------------------------------------

def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def model_to_bytes(model: Model) -> bytes:
    names = sorted(model.params)
    header = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "provenance": model.provenance,
        "params": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(hbytes)), hbytes]
    for k in names:
        raw = np.ascontiguousarray(model.params[k], dtype="<f8").tobytes()
        parts += [struct.pack("<Q", len(raw)), raw]
    payload = b"".join(parts)
    return payload + _checksum(payload)


def model_from_bytes(blob: bytes) -> Model:
    if len(blob) < len(MAGIC) + 20 or not blob.startswith(MAGIC):
        raise ModelFormatError("not a model file")
    payload, check = blob[:-8], blob[-8:]
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (this build reads {FORMAT_VERSION})")
    if _checksum(payload) != check:
        raise ModelFormatError("checksum mismatch: model file is corrupt")
    pos = len(MAGIC) + 4
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(payload[pos:pos + hlen])
    pos += hlen
    params = {}
    for entry in header["params"]:
        (n,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        arr = np.frombuffer(payload[pos:pos + n], dtype="<f8").astype(np.float64)
        pos += n
        params[entry["name"]] = arr.reshape(entry["shape"])
    if pos != len(payload):
        raise ModelFormatError("trailing bytes in model file")
    return Model(ModelSpec.from_dict(header["spec"]), params, header["provenance"])


def save_model(model: Model, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(Path(path), model_to_bytes(model))


def load_model(path) -> Model:
    return model_from_bytes(Path(path).read_bytes())
