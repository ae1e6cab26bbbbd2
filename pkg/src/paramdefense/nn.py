"""Dense feed-forward networks with exact backpropagation over a flat parameter vector.

Parameters are stored flat, layer by layer, each layer contributing its weight
matrix (``n_in x n_out``, row-major) followed by its bias vector.  A
:class:`Model` is immutable; every operation that changes parameters returns a
new instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import RejectedInputError

ACTIVATIONS = ("relu", "tanh", "identity")
HEADS = ("softmax_ce", "mse")


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int
    activation: str = "relu"

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise RejectedInputError(f"layer dimensions must be positive, got {self.n_in}x{self.n_out}")
        if self.activation not in ACTIVATIONS:
            raise RejectedInputError(f"unknown activation {self.activation!r}")

    @property
    def size(self) -> int:
        return self.n_in * self.n_out + self.n_out


def _readonly(x: np.ndarray) -> np.ndarray:
    x.flags.writeable = False
    return x


class Model:
    """A stack of dense layers ending in a loss head.

    A model may carry a corruption offset on top of its base parameters (see
    :func:`apply_corruption`).  Keeping the offset separate means that applying
    ``a`` and then ``-a`` restores the base parameters bit for bit.
    """

    __slots__ = ("layers", "head", "_base", "_offset", "_params")

    def __init__(self, layers: Sequence[Dense], head: str, params, _offset=None):
        layers = tuple(layers)
        if not layers:
            raise RejectedInputError("a model needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.n_out != nxt.n_in:
                raise RejectedInputError(
                    f"layer dimensions disagree: {prev.n_in}x{prev.n_out} followed by {nxt.n_in}x{nxt.n_out}"
                )
        if head not in HEADS:
            raise RejectedInputError(f"unknown head {head!r}")
        base = np.array(params, dtype=np.float64).reshape(-1)
        total = sum(layer.size for layer in layers)
        if base.size != total:
            raise RejectedInputError(f"expected {total} parameters, got {base.size}")
        self.layers = layers
        self.head = head
        self._base = _readonly(base)
        if _offset is not None and not np.any(_offset):
            _offset = None
        if _offset is None:
            self._offset = None
            self._params = self._base
        else:
            self._offset = _readonly(_offset)
            eff = base.copy()
            touched = _offset != 0
            eff[touched] = base[touched] + _offset[touched]
            self._params = _readonly(eff)

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        activation: str = "relu",
        head: str = "softmax_ce",
        seed: int = 0,
        output_activation: str = "identity",
    ) -> "Model":
        """Build a model with scaled-normal weights and zero biases."""
        if len(sizes) < 2:
            raise RejectedInputError("sizes must list at least input and output widths")
        layers = [
            Dense(a, b, activation if i < len(sizes) - 2 else output_activation)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]
        rng = np.random.default_rng(seed)
        chunks = []
        for layer in layers:
            scale = np.sqrt((2.0 if layer.activation == "relu" else 1.0) / layer.n_in)
            chunks.append(rng.normal(0.0, scale, size=layer.n_in * layer.n_out))
            chunks.append(np.zeros(layer.n_out))
        return cls(layers, head, np.concatenate(chunks))

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def k_total(self) -> int:
        return self._params.size

    @property
    def n_inputs(self) -> int:
        return self.layers[0].n_in

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].n_out

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.layers[0].n_in,) + tuple(layer.n_out for layer in self.layers)

    def with_params(self, params) -> "Model":
        return Model(self.layers, self.head, params)

    def tensor_slices(self) -> list[tuple[str, slice, tuple[int, ...]]]:
        """Name, flat slice and shape of every weight matrix and bias vector."""
        out = []
        pos = 0
        for i, layer in enumerate(self.layers):
            nw = layer.n_in * layer.n_out
            out.append((f"layer{i}.weight", slice(pos, pos + nw), (layer.n_in, layer.n_out)))
            pos += nw
            out.append((f"layer{i}.bias", slice(pos, pos + layer.n_out), (layer.n_out,)))
            pos += layer.n_out
        return out

    def layer_slices(self) -> list[tuple[str, slice]]:
        """One contiguous slice per layer (weight and bias together)."""
        out = []
        pos = 0
        for i, layer in enumerate(self.layers):
            out.append((f"layer{i}", slice(pos, pos + layer.size)))
            pos += layer.size
        return out

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.layers == other.layers
            and self.head == other.head
            and self._params.tobytes() == other._params.tobytes()
        )

    __hash__ = None

    def __repr__(self):
        arch = "-".join(str(s) for s in self.sizes)
        return f"Model({arch}, head={self.head!r}, k_total={self.k_total})"


def flatten(tensors: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for t in tensors])


def unflatten(model: Model, flat=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer ``(W, b)`` views."""
    flat = model.params if flat is None else np.asarray(flat, dtype=np.float64)
    if flat.size != model.k_total:
        raise RejectedInputError(f"expected {model.k_total} parameters, got {flat.size}")
    return _split(model.layers, flat)


def _split(layers, flat):
    out = []
    pos = 0
    for layer in layers:
        nw = layer.n_in * layer.n_out
        W = flat[pos : pos + nw].reshape(layer.n_in, layer.n_out)
        pos += nw
        b = flat[pos : pos + layer.n_out]
        pos += layer.n_out
        out.append((W, b))
    return out


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2:
            raise RejectedInputError(f"inputs must be 2-D, got shape {x.shape}")
        t = np.asarray(self.targets)
        if t.shape[0] != x.shape[0]:
            raise RejectedInputError(f"{x.shape[0]} input rows but {t.shape[0]} targets")
        if x.shape[0] == 0:
            raise RejectedInputError("batch is empty")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", t)

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class ParamPartition:
    """Boolean mask over the flat parameters; ``True`` marks corruptible entries."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool).reshape(-1)
        m = m.copy()
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def k_total(self) -> int:
        return self.mask.size

    @classmethod
    def full(cls, model_or_size) -> "ParamPartition":
        n = model_or_size.k_total if isinstance(model_or_size, Model) else int(model_or_size)
        return cls(np.ones(n, dtype=bool))

    @classmethod
    def from_slices(cls, k_total: int, slices: Sequence[slice]) -> "ParamPartition":
        m = np.zeros(k_total, dtype=bool)
        for s in slices:
            m[s] = True
        return cls(m)

    @classmethod
    def layers(cls, model: Model, indices: Sequence[int]) -> "ParamPartition":
        """Corruptible set made of whole layers (negative indices allowed)."""
        named = model.layer_slices()
        picked = [named[i][1] for i in indices]
        return cls.from_slices(model.k_total, picked)

    def check(self, k_total: int, require_nonempty: bool = True) -> None:
        if self.mask.size != k_total:
            raise RejectedInputError(f"partition covers {self.mask.size} parameters, model has {k_total}")
        if require_nonempty and self.k == 0:
            raise RejectedInputError("partition selects no corruptible parameters")

    def embed(self, a: np.ndarray) -> np.ndarray:
        """Scatter a length-k corruption into a zero full-length vector."""
        full = np.zeros(self.mask.size)
        full[self.mask] = a
        return full

    def __eq__(self, other):
        return isinstance(other, ParamPartition) and np.array_equal(self.mask, other.mask)

    __hash__ = None


def apply_corruption(model: Model, a, partition: ParamPartition | None = None) -> Model:
    """Return ``model`` with its corruptible parameters shifted by ``a``."""
    if partition is None:
        partition = ParamPartition.full(model)
    partition.check(model.k_total, require_nonempty=False)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size != partition.k:
        raise RejectedInputError(f"corruption has length {a.size}, partition has k={partition.k}")
    if not np.all(np.isfinite(a)):
        raise RejectedInputError("corruption contains non-finite entries")
    offset = np.zeros(model.k_total) if model._offset is None else model._offset.copy()
    offset[partition.mask] += a
    return Model(model.layers, model.head, model._base, _offset=offset)


# ---------------------------------------------------------------------------
# forward / backward


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(kind, z, a):
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return None


def _head_loss(head, out, targets, want_grad):
    m = out.shape[0]
    if head == "softmax_ce":
        y = np.asarray(targets).astype(np.int64).reshape(-1)
        if y.size and (y.min() < 0 or y.max() >= out.shape[1]):
            raise RejectedInputError(f"class targets must lie in [0, {out.shape[1]})")
        shifted = out - out.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        total = expd.sum(axis=1, keepdims=True)
        per_example = np.log(total[:, 0]) - shifted[np.arange(m), y]
        loss = float(per_example.mean())
        if not want_grad:
            return loss, None
        d_out = expd / total
        d_out[np.arange(m), y] -= 1.0
        d_out /= m
        return loss, d_out
    t = np.asarray(targets, dtype=np.float64).reshape(m, -1)
    if t.shape[1] != out.shape[1]:
        raise RejectedInputError(f"regression targets have width {t.shape[1]}, model outputs {out.shape[1]}")
    resid = out - t
    loss = float((resid * resid).sum(axis=1).mean())
    if not want_grad:
        return loss, None
    return loss, (2.0 / m) * resid


def evaluate(layers, head, params, inputs, targets, want_grad=True, want_input_grad=False):
    """Core pass shared by every public entry point.

    Returns ``(loss, outputs, param_grad, input_grad)``; gradients are ``None``
    when not requested.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layers[0].n_in:
        raise RejectedInputError(f"model expects inputs of width {layers[0].n_in}, got shape {x.shape}")
    weights = _split(layers, params)
    cache = []
    h = x
    for layer, (W, b) in zip(layers, weights):
        z = h @ W + b
        a = _activate(layer.activation, z)
        cache.append((h, z, a))
        h = a
    loss, d = _head_loss(head, h, targets, want_grad or want_input_grad)
    if not (want_grad or want_input_grad):
        return loss, h, None, None
    grad = np.empty(params.size) if want_grad else None
    spans = []
    pos = 0
    for layer in layers:
        nw = layer.n_in * layer.n_out
        spans.append((pos, pos + nw, pos + nw + layer.n_out))
        pos += layer.size
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h_in, z, a = cache[i]
        dz = _activation_grad(layer.activation, z, a)
        if dz is not None:
            d = d * dz
        if want_grad:
            w0, w1, b1 = spans[i]
            grad[w0:w1] = (h_in.T @ d).reshape(-1)
            grad[w1:b1] = d.sum(axis=0)
        if i > 0 or want_input_grad:
            d = d @ weights[i][0].T
    return loss, h, grad, (d if want_input_grad else None)


def forward(model: Model, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and the network outputs (logits for softmax heads)."""
    loss, out, _, _ = evaluate(model.layers, model.head, model.params, batch.inputs, batch.targets, want_grad=False)
    return loss, out


def backward(model: Model, batch: Batch) -> np.ndarray:
    """Gradient of the mean batch loss, in flatten order."""
    return loss_and_grad(model, batch)[1]


def loss_and_grad(model: Model, batch: Batch) -> tuple[float, np.ndarray]:
    loss, _, grad, _ = evaluate(model.layers, model.head, model.params, batch.inputs, batch.targets)
    return loss, grad


def input_gradient(model: Model, batch: Batch) -> np.ndarray:
    """Gradient of the mean batch loss with respect to the inputs."""
    _, _, _, dx = evaluate(
        model.layers, model.head, model.params, batch.inputs, batch.targets, want_grad=False, want_input_grad=True
    )
    return dx


def accuracy(model: Model, batch: Batch) -> float:
    """Fraction of correctly classified rows (softmax heads only)."""
    if model.head != "softmax_ce":
        raise RejectedInputError("accuracy is defined for classification heads only")
    _, out = forward(model, batch)
    return float(np.mean(np.argmax(out, axis=1) == np.asarray(batch.targets).reshape(-1)))
