"""Geometry of the corruption set ``{a : ||a||_p <= eps, ||a||_0 <= n}``.

Norm orders are floats; use ``math.inf`` for the max-norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGradientError, RejectedInputError, UnsupportedNormError

INF = math.inf


def parse_norm(p) -> float:
    """Accept ``2``, ``"2"``, ``"inf"``, ``math.inf`` and friends."""
    if isinstance(p, str):
        p = p.strip().lower()
        p = INF if p in ("inf", "infinity", "+inf", "linf") else float(p)
    p = float(p)
    if not p >= 1:
        raise RejectedInputError(f"norm order must be >= 1, got {p}")
    return p


def format_norm(p: float) -> str:
    return "inf" if math.isinf(p) else f"{p:g}"


def lp_norm(v, p: float) -> float:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        return 0.0
    if math.isinf(p):
        return float(np.max(np.abs(v)))
    if p == 2:
        r = float(np.sqrt(v @ v))
        if 1e-150 < r < 1e150:
            return r
        m = np.max(np.abs(v))
        if m == 0:
            return 0.0
        u = v / m
        return float(m * np.sqrt(u @ u))
    if p == 1:
        return float(np.sum(np.abs(v)))
    m = np.max(np.abs(v))
    if m == 0:
        return 0.0
    return float(m * np.sum((np.abs(v) / m) ** p) ** (1.0 / p))


def dual_exponent(p: float) -> float:
    if math.isinf(p):
        return 1.0
    if p == 1:
        return INF
    return p / (p - 1.0)


@dataclass(frozen=True)
class ConstraintSet:
    """Feasible corruptions.  ``n=None`` leaves the support size unlimited."""

    p: float
    epsilon: float
    n: int | None = None
    boundary_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        eps = float(self.epsilon)
        if not eps >= 0 or math.isinf(eps):
            raise RejectedInputError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        object.__setattr__(self, "epsilon", eps)
        if self.n is not None:
            if int(self.n) < 1:
                raise RejectedInputError(f"n must be >= 1, got {self.n}")
            object.__setattr__(self, "n", int(self.n))

    def support(self, k: int) -> int:
        """Effective sparsity budget in dimension ``k``."""
        if self.n is None:
            return k
        if self.n > k:
            raise RejectedInputError(f"n={self.n} exceeds dimension k={k}")
        return self.n

    def contains(self, a, tol: float = 1e-12) -> bool:
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if np.count_nonzero(a) > self.support(a.size):
            return False
        r = lp_norm(a, self.p)
        if self.boundary_only:
            return abs(r - self.epsilon) <= tol
        return r <= self.epsilon + tol

    def with_epsilon(self, epsilon: float) -> "ConstraintSet":
        return ConstraintSet(self.p, epsilon, self.n, self.boundary_only)


def top_n(v, n: int) -> np.ndarray:
    """Keep the ``n`` largest-magnitude entries and zero the rest.

    Ties on ``|v|`` go to the lower index.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if not 1 <= n <= v.size:
        raise RejectedInputError(f"n must lie in [1, {v.size}], got {n}")
    if n == v.size:
        return v.copy()
    keep = np.argsort(-np.abs(v), kind="stable")[:n]
    out = np.zeros_like(v)
    out[keep] = v[keep]
    return out


def _align(h: np.ndarray, radius: float, p: float) -> np.ndarray:
    """Unit-``p``-norm direction maximizing the inner product with ``h``, scaled to ``radius``."""
    if math.isinf(p):
        return radius * np.sign(h)
    if p == 1:
        i = int(np.argmax(np.abs(h)))
        out = np.zeros_like(h)
        out[i] = radius * np.sign(h[i])
        return out
    if p == 2:
        # rescale first so tiny or huge entries do not under/overflow h.h
        u = h / np.max(np.abs(h))
        return u * (radius / math.sqrt(u @ u))
    mag = np.abs(h) / np.max(np.abs(h))
    t = mag ** (1.0 / (p - 1.0))
    return radius * np.sign(h) * t / lp_norm(t, p)


def constrained_argmax(v, S: ConstraintSet) -> tuple[np.ndarray, float]:
    """Closed-form maximizer of ``a.v`` over ``S`` and the attained value.

    The maximum is ``eps * ||top_n(v)||_q`` with ``q = p/(p-1)``.  For ``p=1``
    all mass goes on the largest-magnitude coordinate.

    Raises:
        DegenerateGradientError: ``top_n(v)`` is the zero vector.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if S.epsilon == 0:
        return np.zeros_like(v), 0.0
    h = top_n(v, S.support(v.size))
    if not np.any(h):
        raise DegenerateGradientError("maximizer undefined for a zero vector")
    a = _align(h, S.epsilon, S.p)
    value = S.epsilon * lp_norm(h, dual_exponent(S.p))
    return a, value


def step_update(g, alpha: float, p: float) -> np.ndarray:
    """Steepest-ascent step of ``p``-norm length ``alpha`` along ``g``."""
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if not alpha > 0:
        raise RejectedInputError(f"alpha must be positive, got {alpha}")
    if not g.any():
        raise DegenerateGradientError("step direction undefined for a zero gradient")
    return _align(g, float(alpha), p if isinstance(p, float) else parse_norm(p))


def project(x, S: ConstraintSet) -> np.ndarray:
    """Euclidean projection onto ``S`` (``p`` in ``{2, inf}`` only).

    Raises:
        UnsupportedNormError: for any other norm order.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not (S.p == 2 or math.isinf(S.p)):
        raise UnsupportedNormError(f"no closed-form projection for p={S.p:g}; only p=2 and p=inf")
    h = top_n(x, S.support(x.size))
    eps = S.epsilon
    if math.isinf(S.p):
        return np.minimum(np.maximum(h, -eps), eps)
    r = lp_norm(h, 2)
    if r <= eps:
        return h
    y = h * (eps / r)
    # Rounding can leave ||y|| a few ulps above eps; shrink so a second projection is a no-op.
    while lp_norm(y, 2) > eps:
        y = np.nextafter(y, 0.0)
    return y


def beta_p(p: float, m: int, direction: str = "lp_le_l2") -> float:
    """Norm-comparison constant between ``l_p`` and ``l_2`` in dimension ``m``.

    ``direction="lp_le_l2"``: ``||x||_p <= beta ||x||_2`` with ``beta = max(1, m^(1/p - 1/2))``.
    ``direction="l2_le_lr"``: ``||x||_2 <= beta ||x||_p`` for ``m``-sparse ``x``, with
    ``beta = max(1, m^(1/2 - 1/p))``.
    """
    if isinstance(p, str):
        p = parse_norm(p)
    if not p > 1:
        raise RejectedInputError(f"beta_p needs p > 1, got {p}")
    if m < 1:
        raise RejectedInputError(f"m must be >= 1, got {m}")
    inv = 0.0 if math.isinf(p) else 1.0 / p
    if direction == "lp_le_l2":
        e = inv - 0.5
    elif direction == "l2_le_lr":
        e = 0.5 - inv
    else:
        raise RejectedInputError(f"unknown direction {direction!r}")
    return max(1.0, float(m) ** e)


def g_exponent(p: float) -> float:
    """Exponent of ``n`` in the gradient-corruption error bound."""
    if isinstance(p, str):
        p = parse_norm(p)
    if not p > 1:
        raise RejectedInputError(f"g_exponent needs p > 1, got {p}")
    if math.isinf(p):
        return 0.5
    return max((p - 4.0) / (2.0 * p), (1.0 - p) / p)
