"""Small differentiable classifiers with hand-derived gradients.

Two model kinds are supported, both scored by mean cross-entropy:

* ``linear-softmax``: ``logits = W x + b`` with ``W`` of shape
  ``(num_classes, input_dim)``.
* ``mlp-1hidden``: ``logits = W2 act(W1 x + b1) + b2``.

Parameters live in one flat float64 vector. Layout, layer by layer, weights
row-major first and then biases::

    linear-softmax : W (K*D), b (K)
    mlp-1hidden    : W1 (H*D), b1 (H), W2 (K*H), b2 (K)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import FormatError, LayoutError, NumericError, PreconditionError

KINDS = ("linear-softmax", "mlp-1hidden")
ACTIVATIONS = ("tanh", "relu")
INIT_SCALE = 0.1

# Parameter vectors are plain float64 arrays; the layout is carried by the
# ModelSpec they were created for (see ModelSpec.layout_id).
ParamVector = np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LayoutError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise LayoutError("input_dim must be positive")
        if self.num_classes < 2:
            raise LayoutError("num_classes must be >= 2")
        if self.kind == "mlp-1hidden":
            if self.hidden_dim < 1:
                raise LayoutError("mlp-1hidden needs a positive hidden_dim")
            if self.activation not in ACTIVATIONS:
                raise LayoutError(f"unknown activation {self.activation!r}")

    @property
    def num_params(self) -> int:
        d, k, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "linear-softmax":
            return k * d + k
        return h * d + h + k * h + k

    @property
    def layout_id(self) -> str:
        if self.kind == "linear-softmax":
            return f"linear-softmax/d{self.input_dim}/k{self.num_classes}"
        return (
            f"mlp-1hidden/d{self.input_dim}/h{self.hidden_dim}"
            f"/k{self.num_classes}/{self.activation}"
        )

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "input_dim": self.input_dim, "num_classes": self.num_classes}
        if self.kind == "mlp-1hidden":
            out["hidden_dim"] = self.hidden_dim
            out["activation"] = self.activation
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def _kernel_args(self):
        kind = 0 if self.kind == "linear-softmax" else 1
        act = 0 if self.activation == "tanh" else 1
        return kind, self.input_dim, self.hidden_dim, self.num_classes, act


@dataclass(frozen=True)
class Example:
    features: np.ndarray
    label: int
    safety_flag: bool
    example_id: int


@dataclass(frozen=True, eq=False)
class Batch:
    """A set of examples stored column-wise.

    Also used for whole datasets and groups; a training batch is just a row
    subset (see :meth:`take`).
    """

    features: np.ndarray
    labels: np.ndarray
    example_ids: np.ndarray
    safety_flags: np.ndarray

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise LayoutError("features must be a 2-d array")
        n = X.shape[0]
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        ids = np.ascontiguousarray(self.example_ids, dtype=np.int64)
        flags = np.ascontiguousarray(self.safety_flags, dtype=bool)
        if y.shape != (n,) or ids.shape != (n,) or flags.shape != (n,):
            raise LayoutError("labels, example_ids and safety_flags must have one entry per row")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "example_ids", ids)
        object.__setattr__(self, "safety_flags", flags)

    @classmethod
    def from_examples(cls, examples: Iterable[Example]) -> "Batch":
        examples = list(examples)
        if not examples:
            raise PreconditionError("a batch needs at least one example")
        dims = {len(e.features) for e in examples}
        if len(dims) != 1:
            raise LayoutError("examples disagree on input_dim")
        return cls(
            np.array([e.features for e in examples], dtype=np.float64),
            np.array([e.label for e in examples]),
            np.array([e.example_id for e in examples]),
            np.array([e.safety_flag for e in examples]),
        )

    def __len__(self):
        return self.features.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield Example(
                self.features[i],
                int(self.labels[i]),
                bool(self.safety_flags[i]),
                int(self.example_ids[i]),
            )

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def take(self, index) -> "Batch":
        index = np.asarray(index, dtype=np.intp)
        return Batch(
            self.features[index],
            self.labels[index],
            self.example_ids[index],
            self.safety_flags[index],
        )

    def select_ids(self, ids) -> "Batch":
        mask = np.isin(self.example_ids, np.asarray(list(ids), dtype=np.int64))
        return self.take(np.flatnonzero(mask))

    def concat(self, other: "Batch") -> "Batch":
        return Batch(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.example_ids, other.example_ids]),
            np.concatenate([self.safety_flags, other.safety_flags]),
        )


def init_params(spec: ModelSpec, seed: int | None = 0, zero: bool = False) -> ParamVector:
    """Uniform(-0.1, 0.1) initialization, or all zeros when ``zero``."""
    if zero:
        return np.zeros(spec.num_params)
    rng = np.random.default_rng(seed)
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=spec.num_params)


def check_params(spec: ModelSpec, params) -> np.ndarray:
    p = np.ascontiguousarray(params, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != spec.num_params:
        raise LayoutError(
            f"parameter vector of length {p.size} does not match {spec.layout_id} "
            f"({spec.num_params} parameters)"
        )
    return p


def _check_batch(spec: ModelSpec, batch: Batch):
    if len(batch) == 0:
        raise PreconditionError("batch is empty")
    if batch.input_dim != spec.input_dim:
        raise LayoutError(f"batch input_dim {batch.input_dim} != model input_dim {spec.input_dim}")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise LayoutError("label out of range for num_classes")


def _raise_non_finite(spec, params, batch):
    losses = kernels.per_example_loss(batch.features, batch.labels, params, *spec._kernel_args())
    bad = np.flatnonzero(~np.isfinite(losses))
    example_id = int(batch.example_ids[bad[0]]) if bad.size else None
    raise NumericError(f"non-finite loss (example_id={example_id})", example_id=example_id)


def forward_loss(spec: ModelSpec, params, batch: Batch) -> float:
    """Mean cross-entropy of the batch."""
    p = check_params(spec, params)
    _check_batch(spec, batch)
    loss, _ = kernels.loss_grad(
        batch.features, batch.labels, p, *spec._kernel_args(), want_grad=False
    )
    if not np.isfinite(loss):
        _raise_non_finite(spec, p, batch)
    return float(loss)


def loss_and_grad(spec: ModelSpec, params, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its exact gradient in one pass."""
    p = check_params(spec, params)
    _check_batch(spec, batch)
    loss, g = kernels.loss_grad(batch.features, batch.labels, p, *spec._kernel_args(), want_grad=True)
    if not (np.isfinite(loss) and np.isfinite(g).all()):
        _raise_non_finite(spec, p, batch)
        raise NumericError("non-finite gradient")
    return float(loss), g


def grad(spec: ModelSpec, params, batch: Batch) -> np.ndarray:
    return loss_and_grad(spec, params, batch)[1]


def per_example_loss(spec: ModelSpec, params, batch: Batch) -> np.ndarray:
    p = check_params(spec, params)
    _check_batch(spec, batch)
    return np.asarray(
        kernels.per_example_loss(batch.features, batch.labels, p, *spec._kernel_args())
    )


def logits(spec: ModelSpec, params, features) -> np.ndarray:
    p = check_params(spec, params)
    X = np.ascontiguousarray(np.atleast_2d(features), dtype=np.float64)
    if X.shape[1] != spec.input_dim:
        raise LayoutError(f"features have dimension {X.shape[1]}, model expects {spec.input_dim}")
    return np.asarray(kernels.logits(X, p, *spec._kernel_args()))


def predict(spec: ModelSpec, params, features) -> int:
    """Argmax class for one feature vector; ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise LayoutError("predict takes a single feature vector; use predict_many")
    return int(np.argmax(logits(spec, params, features)[0]))


def predict_many(spec: ModelSpec, params, features) -> np.ndarray:
    return np.argmax(logits(spec, params, features), axis=1)


def central_difference(fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central-difference gradient of a scalar function."""
    if not h > 0:
        raise PreconditionError("finite-difference step h must be positive")
    x = np.array(x, dtype=np.float64, ndmin=1)
    out = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        up = fn(x)
        x[i] = orig - h
        down = fn(x)
        x[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out


def finite_diff_grad(spec: ModelSpec, params, batch: Batch, h: float = 1e-5) -> np.ndarray:
    if not h > 0:
        raise PreconditionError("finite-difference step h must be positive")
    p = check_params(spec, params).copy()
    return central_difference(lambda v: forward_loss(spec, v, batch), p, h)


# -- checkpoints -------------------------------------------------------------

MAGIC = b"VAA1"


def save_checkpoint(path, spec: ModelSpec, params) -> None:
    """Write ``MAGIC | u32 header_len | JSON header | u32 count | f64 LE values``."""
    p = check_params(spec, params)
    header = dict(spec.to_dict(), layout_id=spec.layout_id, num_params=spec.num_params)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", p.size))
        fh.write(p.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a VAA1 checkpoint")
    try:
        (hlen,) = struct.unpack_from("<I", data, 4)
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
        (count,) = struct.unpack_from("<I", data, 8 + hlen)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    layout_id = header.pop("layout_id", None)
    declared = header.pop("num_params", None)
    spec = ModelSpec.from_dict(header)
    if layout_id != spec.layout_id or declared != spec.num_params or count != spec.num_params:
        raise FormatError(f"{path}: header does not match parameter layout")
    start = 12 + hlen
    raw = data[start:]
    if len(raw) != 8 * count:
        raise FormatError(f"{path}: expected {count} parameters, found {len(raw) // 8}")
    return spec, np.frombuffer(raw, dtype="<f8").astype(np.float64)
