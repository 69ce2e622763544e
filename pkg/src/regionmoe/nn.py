"""Dense three-layer MLPs: forward, reverse-mode backward, softmax, init, JSON I/O.

Everything is float64. Inputs may be a single vector ``(in_dim,)`` or a batch
``(n, in_dim)``; gradients of a batch are summed over rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, SerializationError

SCHEMA_VERSION = 1
ACTIVATIONS = ("relu", "id")


@dataclass
class DenseLayer:
    w: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)
    act: str = "relu"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.ndim != 1:
            raise DimensionError("layer weights must be 2-D and bias 1-D", self.w.shape, self.b.shape)
        if self.w.shape[0] != self.b.shape[0]:
            raise DimensionError("weight rows must equal bias length", self.w.shape[0], self.b.shape[0])
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]


@dataclass
class MlpParams:
    layers: list[DenseLayer]

    def __post_init__(self):
        if len(self.layers) != 3:
            raise DimensionError("an MLP has exactly three layers", 3, len(self.layers))
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError("adjacent layer dims do not chain", a.out_dim, b.in_dim)
        if self.layers[-1].act != "id":
            raise ValueError("final layer must emit raw logits (act='id')")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def tensors(self) -> list[tuple[np.ndarray, bool]]:
        """Parameter arrays in a fixed order, paired with whether weight decay applies."""
        out = []
        for layer in self.layers:
            out.append((layer.w, True))
            out.append((layer.b, False))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([DenseLayer(l.w.copy(), l.b.copy(), l.act) for l in self.layers])


@dataclass
class GradientBundle:
    dw: list[np.ndarray]
    db: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        """Flattened in the same order as ``MlpParams.tensors``."""
        out = []
        for w, b in zip(self.dw, self.db):
            out.append(w)
            out.append(b)
        return out


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activation of each layer
    single: bool = False


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.in_dim:
        raise DimensionError("mlp input", params.in_dim, xb.shape[-1] if xb.ndim else 0)
    cache = ForwardCache(single=single)
    a = xb
    for layer in params.layers:
        cache.inputs.append(a)
        z = a @ layer.w.T + layer.b
        cache.pre.append(z)
        a = np.maximum(z, 0.0) if layer.act == "relu" else z
    return (a[0] if single else a), cache


def mlp_backward(params: MlpParams, cache: ForwardCache, grad_logits) -> tuple[GradientBundle, np.ndarray]:
    g = np.asarray(grad_logits, dtype=np.float64)
    if cache.single:
        g = g[None, :] if g.ndim == 1 else g
    if len(cache.pre) != len(params.layers):
        raise DimensionError("stale cache: layer count", len(params.layers), len(cache.pre))
    if g.ndim != 2 or g.shape != cache.pre[-1].shape:
        raise DimensionError("grad_logits shape", cache.pre[-1].shape, g.shape)
    dws: list[np.ndarray] = [None] * 3  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * 3  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        a_in, z = cache.inputs[i], cache.pre[i]
        if z.shape[1] != layer.out_dim or a_in.shape[1] != layer.in_dim:
            raise DimensionError(f"stale cache at layer {i}", layer.w.shape, (z.shape[1], a_in.shape[1]))
        if layer.act == "relu":
            g = g * (z > 0.0)
        dws[i] = g.T @ a_in
        dbs[i] = g.sum(axis=0)
        g = g @ layer.w
    grad_input = g[0] if cache.single else g
    return GradientBundle(dws, dbs), grad_input


def stable_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DimensionError("softmax of empty vector", ">=1", 0)
    _check_finite(v, "softmax input")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits given p = softmax(z) and dL/dp (last axis)."""
    return p * (grad_p - (p * grad_p).sum(axis=-1, keepdims=True))


def init_params(in_dim: int, hidden_dims: Sequence[int], out_dim: int, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases; bit-identical for a fixed seed."""
    dims = [in_dim, *hidden_dims, out_dim]
    if len(dims) != 4:
        raise DimensionError("hidden_dims must have two entries", 2, len(hidden_dims))
    if any(int(d) <= 0 for d in dims):
        raise DimensionError("all dims must be positive", "> 0", dims)
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        layers.append(DenseLayer(w, np.zeros(fan_out), "id" if i == 2 else "relu"))
    return MlpParams(layers)


def zero_params(in_dim: int, hidden_dims: Sequence[int], out_dim: int) -> MlpParams:
    dims = [in_dim, *hidden_dims, out_dim]
    return MlpParams(
        [
            DenseLayer(np.zeros((o, i)), np.zeros(o), "id" if k == 2 else "relu")
            for k, (i, o) in enumerate(zip(dims[:-1], dims[1:]))
        ]
    )


# -- serialization -----------------------------------------------------------
# repr() of a Python float is the shortest string that round-trips exactly
# (never more than 17 significant digits), so json.dumps is value-exact.


def params_to_dict(params: MlpParams) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "layers": [{"w": l.w.tolist(), "b": l.b.tolist(), "act": l.act} for l in params.layers],
    }


def params_from_dict(doc: dict) -> MlpParams:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SerializationError(f"unsupported schema_version {doc.get('schema_version')!r}")
    try:
        layers = [
            DenseLayer(np.array(l["w"], dtype=np.float64).reshape(len(l["b"]), -1), np.array(l["b"], dtype=np.float64), l["act"])
            for l in doc["layers"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise SerializationError(f"malformed MLP document: {exc}") from exc
    return MlpParams(layers)


def dumps_params(params: MlpParams) -> str:
    return json.dumps(params_to_dict(params))


def loads_params(text: str) -> MlpParams:
    return params_from_dict(json.loads(text))
