"""Loss-change indicators and the numerical bound checks built on them."""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..constraints import ConstraintSet, beta_p, constrained_argmax, g_exponent, lp_norm
from ..errors import DegenerateGradientError, OracleResolutionError, RejectedInputError
from ..objectives import QuadraticObjective, as_objective, masked_grad
from .attacks import (
    CorruptionWarning,
    _chunk_rows,
    _resolve_partition,
    _shifted,
    multi_step_corrupt,
)

KINDS = ("delta_ave_mc", "delta_ave_predicted", "delta_max_multistep", "delta_max_firstorder")


@dataclass(frozen=True)
class IndicatorEstimate:
    mean: float
    std_err: float
    samples: int
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RejectedInputError(f"unknown indicator kind {self.kind!r}")
        if self.std_err < 0:
            raise RejectedInputError("std_err must be non-negative")


def predict_delta_ave(trace_est: float, k: int, eps: float) -> float:
    """Second-order prediction ``tr(H) eps^2 / (2k)`` of the sphere-average loss change."""
    if k < 1:
        raise RejectedInputError(f"k must be >= 1, got {k}")
    return trace_est * eps * eps / (2.0 * k)


def estimate_delta_ave(
    objective,
    eps: float,
    samples: int,
    seed: int = 0,
    partition=None,
    batch=None,
    workers: int = 1,
) -> IndicatorEstimate:
    """Monte Carlo mean of the signed loss change over the sphere ``||a||_2 = eps``.

    Corruptions come in the same seeded chunks as
    :func:`~paramdefense.corruption.attacks.sample_sphere`; chunks may be
    evaluated on ``workers`` threads and are reduced in chunk order, so the
    estimate does not depend on the worker count.
    """
    objective = as_objective(objective, batch)
    partition = _resolve_partition(objective, partition)
    if samples < 2:
        raise RejectedInputError(f"samples must be >= 2, got {samples}")
    if eps == 0:
        return IndicatorEstimate(0.0, 0.0, samples, "delta_ave_mc")
    if partition.k < 2:
        raise RejectedInputError("sphere sampling needs at least 2 corruptible parameters")
    w = np.asarray(objective.params, dtype=np.float64)
    base = objective.loss(w)
    k = partition.k
    rows = _chunk_rows(k)
    bounds = [(i, s, min(samples, s + rows)) for i, s in enumerate(range(0, samples, rows))]
    changes = np.empty(samples)

    def run(chunk):
        i, lo, hi = chunk
        z = np.random.default_rng([seed, i]).standard_normal((hi - lo, k))
        a = z * (eps / np.sqrt(np.einsum("ij,ij->i", z, z)))[:, None]
        for j in range(hi - lo):
            changes[lo + j] = objective.loss(_shifted(w, partition, a[j])) - base

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, bounds))
    else:
        for chunk in bounds:
            run(chunk)
    return IndicatorEstimate(
        float(changes.mean()), float(changes.std(ddof=1) / math.sqrt(samples)), samples, "delta_ave_mc"
    )


def estimate_delta_max(
    objective,
    S: ConstraintSet,
    method: str = "first_order",
    partition=None,
    batch=None,
    K: int | None = None,
    alpha: float | None = None,
    seed: int = 0,
) -> IndicatorEstimate:
    """Worst-case loss change, either first-order or by multi-step search.

    ``first_order`` returns ``eps * ||top_n(g)||_q`` (``eps ||g||_2`` on the full
    L2 sphere).  ``multi_step`` returns the observed full-data loss change of
    :func:`multi_step_corrupt`, an empirical lower bound on the true maximum.
    """
    objective = as_objective(objective, batch)
    partition = _resolve_partition(objective, partition)
    if S.epsilon == 0:
        kind = "delta_max_firstorder" if method == "first_order" else "delta_max_multistep"
        return IndicatorEstimate(0.0, 0.0, 1, kind)
    w = np.asarray(objective.params, dtype=np.float64)
    if method == "first_order":
        _, g = masked_grad(objective, w, partition)
        try:
            _, value = constrained_argmax(g, S)
        except DegenerateGradientError:
            warnings.warn("gradient vanishes; first-order indicator is 0", CorruptionWarning)
            value = 0.0
        return IndicatorEstimate(float(value), 0.0, 1, "delta_max_firstorder")
    if method == "multi_step":
        trace = multi_step_corrupt(objective, S, K=K, alpha=alpha, partition=partition, seed=seed)
        change = objective.loss(_shifted(w, partition, trace.final)) - trace.base_loss
        return IndicatorEstimate(float(change), 0.0, 1, "delta_max_multistep")
    raise RejectedInputError(f"unknown method {method!r}; expected 'first_order' or 'multi_step'")


# ---------------------------------------------------------------------------
# gradient-corruption error bound on exact quadratics


def _boundary_directions_2d(step: float, p: float) -> np.ndarray:
    theta = np.arange(0.0, 2.0 * math.pi, step)
    d = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return d / _row_norms(d, p)[:, None]


def _row_norms(d: np.ndarray, p: float) -> np.ndarray:
    if math.isinf(p):
        return np.max(np.abs(d), axis=1)
    return np.sum(np.abs(d) ** p, axis=1) ** (1.0 / p)


def _sphere3(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


_ZOOM_FLOOR = 1e-12


def _grid_max(f, dim: int, p: float, eps: float, resolution: float):
    """Maximize ``f`` over ``{||a||_p = eps}`` in R^dim by an angular grid.

    The boundary is parametrized by angles (one in 2-D, two in 3-D) and
    mapped onto the ``p``-sphere by radial rescaling.  A grid with spacing
    ``resolution`` (2-D) or ``max(resolution, 0.02)`` (3-D) is refined by
    repeated zooming around the best candidates down to an angular spacing
    of 1e-12, so kinks such as the corners of the max-norm cube are resolved.
    """
    if dim == 1:
        pts = np.array([[eps], [-eps]])
        vals = f(pts)
        i = int(np.argmax(vals))
        return float(vals[i]), pts[i]

    def evaluate(angles):
        if dim == 2:
            d = np.stack([np.cos(angles[0]), np.sin(angles[0])], axis=-1)
        else:
            d = _sphere3(angles[0], angles[1])
        pts = eps * d / _row_norms(d, p)[:, None]
        return f(pts), pts

    if dim == 2:
        step = resolution
        grid = [np.arange(0.0, 2.0 * math.pi, step)]
    else:
        step = max(resolution, 0.02)
        th, ph = np.meshgrid(np.arange(0.0, math.pi + step, step), np.arange(0.0, 2 * math.pi, step), indexing="ij")
        grid = [th.ravel(), ph.ravel()]
    vals, pts = evaluate(grid)
    order = np.argsort(-vals, kind="stable")
    best_val, best_pt = float(vals[order[0]]), pts[order[0]]
    for s in order[:8]:
        centre = [g[s] for g in grid]
        h = step
        while h > _ZOOM_FLOOR:
            h /= 5.0
            off = np.arange(-12, 13) * h
            if dim == 2:
                cand = [centre[0] + off]
            else:
                tt, pp = np.meshgrid(centre[0] + off, centre[1] + off, indexing="ij")
                cand = [tt.ravel(), pp.ravel()]
            v, q = evaluate(cand)
            j = int(np.argmax(v))
            centre = [c[j] for c in cand]
            if v[j] > best_val:
                best_val, best_pt = float(v[j]), q[j]
    return best_val, best_pt


@dataclass(frozen=True)
class BoundCheck:
    ratio: float
    constant: float
    delta_max: float
    delta_gradient: float
    a_star: np.ndarray
    a_hat: np.ndarray
    base_loss: float
    loss_at_a_star: float
    loss_at_a_hat: float

    @property
    def ordering_holds(self) -> bool:
        return self.loss_at_a_star >= self.loss_at_a_hat > self.base_loss


def error_bound_ratio(quadratic: QuadraticObjective, S: ConstraintSet, oracle_resolution: float = 1e-4) -> BoundCheck:
    """Compare the true worst-case loss change with that of the gradient corruption.

    The worst case over ``{||a||_p = eps, ||a||_0 <= n}`` is found by a dense
    angular grid on every size-``n`` support; the gradient corruption is
    evaluated exactly on the quadratic.  Returns the ratio and the implied
    big-O constant ``(ratio - 1) G / (L n^g(p) sqrt(k) eps)``.

    Raises:
        OracleResolutionError: the grid maximum falls below the closed-form
            value by more than 1e-6 (relative), i.e. the grid is too coarse.
    """
    g = quadratic.gradient
    k = g.size
    if k > 3:
        raise RejectedInputError(f"grid oracle supports k <= 3, got k={k}")
    if not S.epsilon > 0:
        raise RejectedInputError("epsilon must be positive")
    G = math.sqrt(g @ g)
    if G == 0:
        raise RejectedInputError("gradient must be nonzero")
    n = S.support(k)
    a_hat, _ = constrained_argmax(g, S)
    d_hat = quadratic.change(a_hat)

    def change_rows(pts):
        H = quadratic.hessian
        hp = pts * H if H.ndim == 1 else pts @ H.T
        return pts @ g + 0.5 * np.einsum("ij,ij->i", pts, hp)

    best, best_pt = -math.inf, None
    for support in itertools.combinations(range(k), n):
        idx = list(support)

        def f(local, idx=idx):
            full = np.zeros((local.shape[0], k))
            full[:, idx] = local
            return change_rows(full)

        val, pt = _grid_max(f, n, S.p, S.epsilon, oracle_resolution)
        if val > best:
            best = val
            best_pt = np.zeros(k)
            best_pt[idx] = pt
    if best / d_hat < 1.0 - 1e-6:
        raise OracleResolutionError(
            f"grid maximum {best!r} is below the closed-form value {d_hat!r}; refine oracle_resolution"
        )
    # a_hat lies in S, so the supremum is never below its value; this absorbs
    # the last few ulps by which the grid approaches a kinked maximizer
    if d_hat >= best:
        best, best_pt = d_hat, a_hat.copy()
    ratio = best / d_hat
    L = quadratic.max_curvature()
    scale = L * n ** g_exponent(S.p) * math.sqrt(k) * S.epsilon
    constant = (ratio - 1.0) * G / scale if scale > 0 else 0.0
    base = quadratic.loss(quadratic.center)
    return BoundCheck(
        ratio=ratio,
        constant=constant,
        delta_max=best,
        delta_gradient=d_hat,
        a_star=best_pt,
        a_hat=a_hat,
        base_loss=base,
        loss_at_a_star=base + best,
        loss_at_a_hat=base + d_hat,
    )


# ---------------------------------------------------------------------------
# PAC-Bayes constants


@dataclass(frozen=True)
class PacBayesTerms:
    C: float
    R: float
    beta: float


def pac_bayes_bound(
    w_norm: float,
    k: int,
    eps: float,
    sigma: float,
    dataset_size: int,
    delta: float,
    p=None,
) -> PacBayesTerms:
    """Computable pieces of the PAC-Bayes generalization bound.

    ``w_norm`` is the Euclidean norm of the corruptible parameters.  With
    ``p=None`` the corruption set is the L2 sphere and ``C`` is the KL term
    ``(eps^2 + ||w||^2) / (2 sigma^2) - k/2 + (k/2) log(k sigma^2 / eps^2)``.
    With a norm order ``p`` the ball version ``C_1`` uses ``beta_p = max(1, k^(1/p-1/2))``.
    ``R = sqrt((C + log(|D|/delta)) / (2(|D| - 1)))``; the ``o(eps^2)`` remainder
    is not included.
    """
    if not sigma > 0 or not eps > 0:
        raise RejectedInputError("sigma and eps must be positive")
    if dataset_size < 2:
        raise RejectedInputError("dataset_size must be >= 2")
    if not 0 < delta < 1:
        raise RejectedInputError("delta must lie in (0, 1)")
    if k < 1:
        raise RejectedInputError("k must be >= 1")
    beta = 1.0 if p is None else beta_p(p, k)
    b2 = beta * beta
    C = (eps**2 + b2 * w_norm**2) / (2.0 * b2 * sigma**2) - k / 2.0 + (k / 2.0) * math.log(k * sigma**2 * b2 / eps**2)
    R = math.sqrt((C + math.log(dataset_size / delta)) / (2.0 * (dataset_size - 1)))
    return PacBayesTerms(C, R, beta)
