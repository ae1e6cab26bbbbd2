"""Loss functions over a flat parameter vector.

Corruption and probing code only needs three things from a loss: the clean
parameter vector ``params``, a way to evaluate ``loss``/``loss_grad`` at any
parameter vector, and (optionally) a split of the data into batches.  Network
losses and closed-form quadratics both provide that surface, which lets the
analytic checks run on exact quadratics while probes run on real models.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericalError, RejectedInputError
from .nn import Batch, Model, ParamPartition, evaluate


class ModelObjective:
    """Mean loss of a :class:`Model` on a dataset, optionally split into batches.

    ``batch=None`` evaluates on all rows; ``batch=i`` evaluates on rows
    ``[i*batch_size, (i+1)*batch_size)``.
    """

    def __init__(self, model: Model, inputs, targets, batch_size: int | None = None):
        data = Batch(inputs, targets)
        if data.inputs.shape[1] != model.n_inputs:
            raise RejectedInputError(
                f"model expects inputs of width {model.n_inputs}, got {data.inputs.shape[1]}"
            )
        self.model = model
        self.inputs = data.inputs
        self.targets = data.targets
        m = len(data)
        self.batch_size = m if batch_size is None else int(batch_size)
        if self.batch_size < 1:
            raise RejectedInputError("batch_size must be positive")
        self.n_batches = math.ceil(m / self.batch_size)

    @classmethod
    def from_batch(cls, model: Model, batch: Batch) -> "ModelObjective":
        return cls(model, batch.inputs, batch.targets)

    @property
    def params(self) -> np.ndarray:
        return self.model.params

    def _rows(self, batch):
        if batch is None:
            return self.inputs, self.targets
        if not 0 <= batch < self.n_batches:
            raise RejectedInputError(f"batch index {batch} out of range [0, {self.n_batches})")
        s = slice(batch * self.batch_size, (batch + 1) * self.batch_size)
        return self.inputs[s], self.targets[s]

    def loss(self, params, batch=None) -> float:
        x, y = self._rows(batch)
        return evaluate(self.model.layers, self.model.head, np.asarray(params, dtype=np.float64), x, y, want_grad=False)[0]

    def loss_grad(self, params, batch=None) -> tuple[float, np.ndarray]:
        x, y = self._rows(batch)
        loss, _, grad, _ = evaluate(self.model.layers, self.model.head, np.asarray(params, dtype=np.float64), x, y)
        return loss, grad


class QuadraticObjective:
    """``L(x) = offset + g.(x - c) + 0.5 (x - c)' H (x - c)`` with ``params = c``.

    ``hessian`` may be a full symmetric matrix or a 1-D diagonal.
    """

    n_batches = 1

    def __init__(self, hessian, gradient, center=None, offset: float = 0.0):
        H = np.asarray(hessian, dtype=np.float64)
        g = np.asarray(gradient, dtype=np.float64).reshape(-1)
        k = g.size
        if H.ndim == 1:
            if H.size != k:
                raise RejectedInputError("diagonal Hessian length must match gradient")
        elif H.shape != (k, k):
            raise RejectedInputError(f"Hessian must be {k}x{k}, got {H.shape}")
        self.hessian = H
        self.gradient = g
        self.center = np.zeros(k) if center is None else np.asarray(center, dtype=np.float64).reshape(-1)
        self.offset = float(offset)

    @property
    def params(self) -> np.ndarray:
        return self.center

    def _hv(self, v):
        return self.hessian * v if self.hessian.ndim == 1 else self.hessian @ v

    def change(self, a) -> float:
        """Exact loss change ``g.a + a'Ha/2`` for a displacement ``a``."""
        a = np.asarray(a, dtype=np.float64)
        return float(self.gradient @ a + 0.5 * (a @ self._hv(a)))

    def loss(self, params, batch=None) -> float:
        return self.offset + self.change(np.asarray(params, dtype=np.float64) - self.center)

    def loss_grad(self, params, batch=None) -> tuple[float, np.ndarray]:
        d = np.asarray(params, dtype=np.float64) - self.center
        hd = self._hv(d)
        return self.offset + float(self.gradient @ d + 0.5 * (d @ hd)), self.gradient + hd

    def trace(self) -> float:
        return float(np.sum(self.hessian) if self.hessian.ndim == 1 else np.trace(self.hessian))

    def max_curvature(self) -> float:
        """Smoothness constant (largest Hessian eigenvalue magnitude)."""
        if self.hessian.ndim == 1:
            return float(np.max(np.abs(self.hessian)))
        return float(np.max(np.abs(np.linalg.eigvalsh(self.hessian))))


def as_objective(model_or_objective, batch: Batch | None = None):
    """Accept either an objective or a ``(Model, Batch)`` pair."""
    if isinstance(model_or_objective, Model):
        if batch is None:
            raise RejectedInputError("a Model needs a Batch to define a loss")
        return ModelObjective.from_batch(model_or_objective, batch)
    return model_or_objective


def masked_grad(objective, params, partition: ParamPartition | None, batch=None):
    """Loss and the gradient restricted to corruptible coordinates."""
    loss, grad = objective.loss_grad(params, batch)
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss!r}")
    return loss, (grad if partition is None else grad[partition.mask])


def hessian_trace_estimate(
    objective,
    probes: int,
    seed: int = 0,
    partition: ParamPartition | None = None,
    batch: Batch | None = None,
    step: float = 1e-4,
) -> tuple[float, float]:
    """Hutchinson estimate of ``tr(H)`` over the corruptible coordinates.

    Hessian-vector products are central differences of the gradient,
    ``(grad(w + h z) - grad(w - h z)) / 2h`` with Rademacher probes ``z``.

    Returns:
        ``(trace_estimate, standard_error)``; the error is 0 for one probe.
    """
    objective = as_objective(objective, batch)
    if probes < 1:
        raise RejectedInputError(f"probes must be >= 1, got {probes}")
    w = np.asarray(objective.params, dtype=np.float64)
    mask = np.ones(w.size, dtype=bool) if partition is None else partition.mask
    k = int(np.count_nonzero(mask))
    rng = np.random.default_rng(seed)
    samples = np.empty(probes)
    for i in range(probes):
        z = rng.integers(0, 2, size=k) * 2.0 - 1.0
        full = np.zeros(w.size)
        full[mask] = z
        lp, gp = objective.loss_grad(w + step * full)
        lm, gm = objective.loss_grad(w - step * full)
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise NumericalError("non-finite loss while estimating the Hessian trace")
        hz = (gp[mask] - gm[mask]) / (2.0 * step)
        samples[i] = z @ hz
    est = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(probes)) if probes > 1 else 0.0
    return est, se
