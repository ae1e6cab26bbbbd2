"""Corruption generators: closed-form gradient corruption, multi-step PGD on
parameters, and random draws (sphere, Gaussian, uniform)."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..constraints import ConstraintSet, constrained_argmax, lp_norm, project, step_update
from ..errors import DegenerateGradientError, RejectedInputError
from ..nn import ParamPartition
from ..objectives import as_objective, masked_grad


class CorruptionWarning(UserWarning):
    """Non-fatal corruption issue (degenerate gradient, unreachable boundary)."""


def _resolve_partition(objective, partition):
    k_total = np.asarray(objective.params).size
    if partition is None:
        return ParamPartition.full(k_total)
    partition.check(k_total)
    return partition


def _shifted(w, partition, a):
    out = w.copy()
    out[partition.mask] += a
    return out


@dataclass
class GradientCorruption:
    a: np.ndarray
    first_order_change: float
    degenerate: bool = False


def gradient_corruption(objective, S: ConstraintSet, partition=None, batch=None) -> GradientCorruption:
    """Maximizer of the first-order loss change ``a.g`` over ``S``.

    ``objective`` is any loss object or a :class:`~paramdefense.nn.Model`
    (then ``batch`` supplies the data).  A vanishing gradient yields the zero
    corruption with ``degenerate=True``.
    """
    objective = as_objective(objective, batch)
    partition = _resolve_partition(objective, partition)
    w = np.asarray(objective.params, dtype=np.float64)
    _, g = masked_grad(objective, w, partition)
    try:
        a, value = constrained_argmax(g, S)
    except DegenerateGradientError:
        warnings.warn("gradient vanishes on the corruptible support; using zero corruption", CorruptionWarning)
        return GradientCorruption(np.zeros(partition.k), 0.0, degenerate=True)
    return GradientCorruption(a, value)


@dataclass
class CorruptionStep:
    a: np.ndarray
    loss: float
    batch_index: int
    step_norm: float
    skipped: bool = False


@dataclass
class CorruptionTrace:
    """Record of one multi-step corruption run."""

    steps: list[CorruptionStep]
    final: np.ndarray
    epsilon: float
    p: float
    n: int | None
    alpha: float
    K: int
    base_loss: float = float("nan")
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def skipped(self) -> list[int]:
        return [i for i, s in enumerate(self.steps) if s.skipped]

    def invariant_violations(self, tol: float = 1e-9) -> list[str]:
        """Feasibility and norm-accumulation checks; empty when all hold."""
        bad = []
        budget = 0.0
        for i, step in enumerate(self.steps, start=1):
            r = lp_norm(step.a, self.p)
            budget += step.step_norm
            if r > self.epsilon + tol:
                bad.append(f"step {i}: ||a||={r!r} exceeds eps={self.epsilon!r}")
            if r > budget + tol:
                bad.append(f"step {i}: ||a||={r!r} exceeds accumulated step length {budget!r}")
        if lp_norm(self.final, self.p) > self.K * self.alpha + tol:
            bad.append("final corruption exceeds K*alpha")
        return bad


def multi_step_corrupt(
    objective,
    S: ConstraintSet,
    K: int | None = None,
    alpha: float | None = None,
    partition=None,
    seed: int = 0,
    batch=None,
) -> CorruptionTrace:
    """Iterate ``a_k = project(a_{k-1} + u_k)`` starting from ``a_0 = 0``.

    ``u_k`` is the ``alpha``-length ascent step along the gradient at
    ``w + a_{k-1}`` on batch ``B_k``.  Batches are visited in a seeded shuffled
    order, reshuffled each pass.  ``K`` defaults to one pass over the batches
    and ``alpha`` to ``1.5 * eps / K``.  Steps with a vanishing gradient are
    skipped and flagged in the trace.
    """
    objective = as_objective(objective, batch)
    partition = _resolve_partition(objective, partition)
    nb = int(objective.n_batches)
    K = nb if K is None else int(K)
    if K < 1:
        raise RejectedInputError(f"K must be >= 1, got {K}")
    eps = S.epsilon
    if alpha is None:
        alpha = 1.5 * eps / K
    alpha = float(alpha)
    if eps > 0 and not alpha > 0:
        raise RejectedInputError(f"alpha must be positive, got {alpha}")
    if K * alpha < eps:
        warnings.warn(
            f"K*alpha = {K * alpha:g} < eps = {eps:g}; the constraint boundary is unreachable",
            CorruptionWarning,
        )
    w = np.asarray(objective.params, dtype=np.float64)
    rng = np.random.default_rng(seed)
    a = np.zeros(partition.k)
    steps = []
    order = None
    for k in range(K):
        if k % nb == 0:
            order = rng.permutation(nb)
        b = int(order[k % nb])
        _, g = masked_grad(objective, _shifted(w, partition, a), partition, b)
        skipped = False
        u_norm = 0.0
        if eps > 0:
            try:
                u = step_update(g, alpha, S.p)
            except DegenerateGradientError:
                skipped = True
            else:
                u_norm = alpha
                a = project(a + u, S)
        loss = objective.loss(_shifted(w, partition, a), b)
        steps.append(CorruptionStep(a.copy(), loss, b, u_norm, skipped))
    if any(s.skipped for s in steps):
        warnings.warn(f"{sum(s.skipped for s in steps)} degenerate step(s) skipped", CorruptionWarning)
    return CorruptionTrace(
        steps=steps,
        final=a,
        epsilon=eps,
        p=S.p,
        n=S.n,
        alpha=alpha,
        K=K,
        base_loss=objective.loss(w),
        mask=partition.mask,
    )


# ---------------------------------------------------------------------------
# random corruptions

_CHUNK_ELEMS = 1 << 20


def _chunk_rows(k: int) -> int:
    return max(1, _CHUNK_ELEMS // max(1, k))


def _chunked(draw, k: int, count: int, seed: int, workers: int = 1) -> np.ndarray:
    """Fill a ``(count, k)`` array chunk by chunk.

    Chunk ``i`` uses the stream ``default_rng([seed, i])``, so the result does
    not depend on ``workers``.
    """
    if count < 0:
        raise RejectedInputError("count must be non-negative")
    rows = _chunk_rows(k)
    bounds = [(i, s, min(count, s + rows)) for i, s in enumerate(range(0, count, rows))]
    out = np.empty((count, k))

    def fill(chunk):
        i, lo, hi = chunk
        out[lo:hi] = draw(np.random.default_rng([seed, i]), (hi - lo, k))

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fill, bounds))
    else:
        for chunk in bounds:
            fill(chunk)
    return out


def sample_sphere(k: int, eps: float, count: int, seed: int = 0, workers: int = 1) -> np.ndarray:
    """``count`` vectors uniform on the Euclidean sphere of radius ``eps`` in R^k."""
    if k < 2:
        raise RejectedInputError(f"sphere sampling needs k >= 2, got {k}")
    if not eps > 0:
        raise RejectedInputError(f"eps must be positive, got {eps}")

    def draw(rng, shape):
        z = rng.standard_normal(shape)
        return z * (eps / np.sqrt(np.einsum("ij,ij->i", z, z)))[:, None]

    return _chunked(draw, k, count, seed, workers)


def sample_gaussian(k: int, sigma: float, count: int, seed: int = 0, workers: int = 1) -> np.ndarray:
    """I.i.d. ``N(0, sigma^2)`` coordinates."""
    if sigma < 0:
        raise RejectedInputError(f"sigma must be >= 0, got {sigma}")
    return _chunked(lambda rng, shape: sigma * rng.standard_normal(shape), k, count, seed, workers)


def sample_uniform(k: int, b: float, count: int, seed: int = 0, workers: int = 1) -> np.ndarray:
    """I.i.d. ``U(-b, b)`` coordinates."""
    if b < 0:
        raise RejectedInputError(f"b must be >= 0, got {b}")
    return _chunked(lambda rng, shape: rng.uniform(-b, b, shape), k, count, seed, workers)


def eta_statistic(a, g, eps: float):
    """Normalized alignment ``|a.g| / (eps ||g||_2)``, clamped to ``[0, 1]``.

    ``a`` may be a single vector or a stack of row vectors.
    """
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    G = math.sqrt(g @ g)
    if G == 0:
        raise RejectedInputError("eta is undefined for a zero gradient")
    if not eps > 0:
        raise RejectedInputError(f"eps must be positive, got {eps}")
    eta = np.clip(np.abs(np.asarray(a, dtype=np.float64) @ g) / (eps * G), 0.0, 1.0)
    return float(eta) if np.ndim(eta) == 0 else eta


def eta_samples(g, count: int, seed: int = 0, workers: int = 1) -> np.ndarray:
    """Monte Carlo draws of eta for sphere corruptions against gradient ``g``.

    Vectors are generated in the same chunks as :func:`sample_sphere` but
    reduced to eta immediately, so memory stays bounded for large ``k``.
    """
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    k = g.size
    rows = _chunk_rows(k)
    bounds = [(i, s, min(count, s + rows)) for i, s in enumerate(range(0, count, rows))]
    out = np.empty(count)

    def fill(chunk):
        i, lo, hi = chunk
        z = np.random.default_rng([seed, i]).standard_normal((hi - lo, k))
        a = z * (1.0 / np.sqrt(np.einsum("ij,ij->i", z, z)))[:, None]
        out[lo:hi] = eta_statistic(a, g, 1.0)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fill, bounds))
    else:
        for chunk in bounds:
            fill(chunk)
    return out
