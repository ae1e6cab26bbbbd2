"""Adversarial parameter defense training and its single-corruption variants.

The main objective averages the batch loss over ``K + 1`` parameter points
``w + a_0, ..., w + a_K`` where ``a_0 = 0`` and each ``a_k`` takes one projected
ascent step from ``a_{k-1}`` on the same batch.  ACRT/SAM use a single
gradient corruption; AWP corrupts parameters after an FGSM input attack.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .constraints import INF, ConstraintSet, constrained_argmax, lp_norm, parse_norm, project, step_update
from .errors import DegenerateGradientError, DivergedTrainingError, RejectedInputError
from .nn import Batch, Model, ParamPartition, evaluate

VARIANTS = ("multi_step_avg", "acrt", "sam", "awp")


class DefenseWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DefenseConfig:
    K: int = 1
    epsilon: float = 0.0
    p: float = INF
    n: int | None = None
    alpha: float | None = None
    start_epoch: int = 0
    partition: ParamPartition | None = None
    variant: str = "multi_step_avg"
    alpha_mix: float = 1.0
    substitutive: bool = False
    inner_K: int = 1
    input_eps: float = 0.0
    random_init: bool = False
    allow_short_budget: bool = False

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        if self.variant not in VARIANTS:
            raise RejectedInputError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if int(self.K) != self.K or self.K < 0:
            raise RejectedInputError(f"K must be a non-negative integer, got {self.K}")
        if self.epsilon < 0:
            raise RejectedInputError("epsilon must be >= 0")
        if self.start_epoch < 0:
            raise RejectedInputError("start_epoch must be >= 0")
        if self.variant == "sam":
            object.__setattr__(self, "alpha_mix", 1.0)
        if not 0.0 <= self.alpha_mix <= 1.0:
            raise RejectedInputError(f"alpha_mix must lie in [0, 1], got {self.alpha_mix}")
        if self.variant == "awp" and self.inner_K < 1:
            raise RejectedInputError("awp needs inner_K >= 1")
        if self.input_eps < 0:
            raise RejectedInputError("input_eps must be >= 0")
        if self.alpha is not None and not self.alpha > 0:
            raise RejectedInputError("alpha must be positive")
        steps = self.inner_K if self.variant == "awp" else self.K
        if (
            self.variant in ("multi_step_avg", "awp")
            and steps > 0
            and steps * self.step_size < self.epsilon * (1 - 1e-12)
            and not self.allow_short_budget
        ):
            warnings.warn(
                f"K*alpha = {steps * self.step_size:g} < eps = {self.epsilon:g}; corruptions cannot reach the boundary",
                DefenseWarning,
            )

    @property
    def constraint(self) -> ConstraintSet:
        return ConstraintSet(self.p, self.epsilon, self.n)

    @property
    def step_size(self) -> float:
        """Per-step ascent length; defaults to ``1.5 * eps / K``."""
        if self.alpha is not None:
            return float(self.alpha)
        steps = self.inner_K if self.variant == "awp" else self.K
        return 1.5 * self.epsilon / steps if steps else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["p"] = "inf" if math.isinf(self.p) else self.p
        d["partition"] = None if self.partition is None else int(self.partition.k)
        d["alpha"] = self.step_size
        return d


@dataclass
class DefenseStep:
    """Result of evaluating a defense objective on one batch."""

    objective: float
    grad: np.ndarray
    losses: list[float] = field(default_factory=list)
    degenerate_steps: list[int] = field(default_factory=list)
    corruptions: list[np.ndarray] = field(default_factory=list)
    mask: np.ndarray | None = None


def _mask(cfg, k_total):
    if cfg.partition is None:
        return None
    cfg.partition.check(k_total)
    return cfg.partition.mask


def _shift(params, mask, a):
    out = params.copy()
    if mask is None:
        out += a
    else:
        out[mask] += a
    return out


def _random_start(rng, k, eps, p):
    if math.isinf(p):
        a = rng.uniform(-1.0, 1.0, k)
    else:
        a = rng.standard_normal(k)
    r = lp_norm(a, p)
    return a * (eps / r) if r > 0 else a


def _multi_step_core(layers, head, params, X, y, cfg, K, rng=None, keep=False):
    mask = _mask(cfg, params.size)
    S = cfg.constraint
    alpha = cfg.step_size
    k = params.size if mask is None else int(np.count_nonzero(mask))
    if cfg.random_init and K > 0 and cfg.epsilon > 0:
        a = _random_start(rng if rng is not None else np.random.default_rng(0), k, cfg.epsilon, cfg.p)
        point = _shift(params, mask, a)
    else:
        a = None
        point = params
    loss, _, grad, _ = evaluate(layers, head, point, X, y)
    total = loss
    grad_sum = grad.copy()
    step = DefenseStep(objective=loss, grad=grad_sum, losses=[loss], mask=mask)
    if keep:
        step.corruptions.append(np.zeros(k) if a is None else a.copy())
    for i in range(1, K + 1):
        a_prev = np.zeros(k) if a is None else a
        g = grad if mask is None else grad[mask]
        if cfg.epsilon == 0:
            a = a_prev
        else:
            try:
                a = project(a_prev + step_update(g, alpha, cfg.p), S)
            except DegenerateGradientError:
                a = a_prev
                step.degenerate_steps.append(i)
        if keep:
            step.corruptions.append(a.copy())
        loss, _, grad, _ = evaluate(layers, head, _shift(params, mask, a), X, y)
        total += loss
        grad_sum += grad
        step.losses.append(loss)
    if not keep and a is not None:
        step.corruptions.append(a)
    if K > 0:
        step.objective = total / (K + 1)
        grad_sum /= K + 1
    return step


def defense_objective_grad(model: Model, batch: Batch, cfg: DefenseConfig, K: int | None = None, seed: int = 0,
                           keep_corruptions: bool = False) -> DefenseStep:
    """Average loss over ``K + 1`` multi-step corruption points and its gradient.

    The gradient is accumulated as a running sum, so memory holds one sum and
    one current gradient regardless of ``K``.  ``K`` overrides ``cfg.K``.
    """
    K = cfg.K if K is None else K
    rng = np.random.default_rng(seed)
    return _multi_step_core(model.layers, model.head, model.params, batch.inputs, batch.targets, cfg, K, rng,
                            keep_corruptions)


def _acrt_core(layers, head, params, X, y, cfg):
    loss0, _, g0, _ = evaluate(layers, head, params, X, y)
    mix = cfg.alpha_mix
    mask = _mask(cfg, params.size)
    step = DefenseStep(objective=loss0, grad=g0, losses=[loss0], mask=mask)
    if mix == 0.0 or cfg.epsilon == 0.0:
        return step
    g = g0 if mask is None else g0[mask]
    try:
        a_hat, _ = constrained_argmax(g, cfg.constraint)
    except DegenerateGradientError:
        step.degenerate_steps.append(1)
        return step
    step.corruptions.append(a_hat)
    if cfg.substitutive:
        t = 1e-4 / max(lp_norm(a_hat, 2), 1e-300)
        _, _, gp, _ = evaluate(layers, head, _shift(params, mask, t * a_hat), X, y)
        _, _, gm, _ = evaluate(layers, head, _shift(params, mask, -t * a_hat), X, y)
        step.objective = loss0 + mix * float(a_hat @ g)
        step.grad = g0 + mix * (gp - gm) / (2.0 * t)
        return step
    loss1, _, g1, _ = evaluate(layers, head, _shift(params, mask, a_hat), X, y)
    step.losses.append(loss1)
    step.objective = (1.0 - mix) * loss0 + mix * loss1
    step.grad = (1.0 - mix) * g0 + mix * g1
    return step


def acrt_objective_grad(model: Model, batch: Batch, eps: float, p=2, n: int | None = None, alpha_mix: float = 1.0,
                        substitutive: bool = False, partition: ParamPartition | None = None) -> DefenseStep:
    """``(1 - mix) L(w) + mix L(w + a_hat)`` with ``a_hat`` the gradient corruption.

    ``mix = 1`` is SAM.  ``substitutive=True`` minimizes the first-order
    surrogate ``L(w) + mix a_hat.grad L(w)`` instead; its gradient uses a
    finite-difference Hessian-vector product.
    """
    cfg = DefenseConfig(K=1, epsilon=eps, p=p, n=n, variant="acrt", alpha_mix=alpha_mix, substitutive=substitutive,
                        partition=partition)
    return _acrt_core(model.layers, model.head, model.params, batch.inputs, batch.targets, cfg)


def _fgsm(layers, head, params, X, y, input_eps):
    if input_eps == 0:
        return X
    _, _, _, dx = evaluate(layers, head, params, X, y, want_grad=False, want_input_grad=True)
    return X + input_eps * np.sign(dx)


def fgsm_batch(model: Model, batch: Batch, input_eps: float) -> Batch:
    """One signed-gradient ascent step of size ``input_eps`` on the inputs."""
    if input_eps < 0:
        raise RejectedInputError("input_eps must be >= 0")
    if input_eps == 0:
        return batch
    return Batch(_fgsm(model.layers, model.head, model.params, batch.inputs, batch.targets, input_eps), batch.targets)


def _awp_core(layers, head, params, X, y, cfg):
    mask = _mask(cfg, params.size)
    Xa = _fgsm(layers, head, params, X, y, cfg.input_eps)
    k = params.size if mask is None else int(np.count_nonzero(mask))
    a = np.zeros(k)
    step = DefenseStep(objective=0.0, grad=None, mask=mask)
    if cfg.epsilon > 0:
        alpha = cfg.step_size
        for i in range(1, cfg.inner_K + 1):
            _, _, g, _ = evaluate(layers, head, _shift(params, mask, a), Xa, y)
            try:
                a = project(a + step_update(g if mask is None else g[mask], alpha, cfg.p), cfg.constraint)
            except DegenerateGradientError:
                step.degenerate_steps.append(i)
    step.corruptions.append(a)
    loss, _, grad, _ = evaluate(layers, head, _shift(params, mask, a), Xa, y)
    step.objective, step.grad, step.losses = loss, grad, [loss]
    return step


def awp_objective_grad(model: Model, batch: Batch, cfg: DefenseConfig) -> DefenseStep:
    """Loss at ``w + a`` on FGSM-perturbed inputs, ``a`` from ``inner_K`` PGD steps."""
    if cfg.inner_K < 1:
        raise RejectedInputError("inner_K must be >= 1")
    return _awp_core(model.layers, model.head, model.params, batch.inputs, batch.targets, cfg)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SGD:
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise RejectedInputError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise RejectedInputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise RejectedInputError("weight_decay must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float | None
    objective: float
    defense_active: bool
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    config: dict
    wall_time: float = field(default=0.0, compare=False)
    checkpoint: str | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        rows = []
        for e in self.epochs:
            d = asdict(e)
            if not include_timing:
                d.pop("wall_time")
            rows.append(d)
        out = {"epochs": rows, "config": self.config, "checkpoint": self.checkpoint}
        if include_timing:
            out["wall_time"] = self.wall_time
        return out


def defense_step(layers, head, params, X, y, cfg: DefenseConfig | None, active: bool, rng=None) -> DefenseStep:
    """Objective and gradient for one training step under ``cfg``."""
    if cfg is None or not active:
        loss, _, grad, _ = evaluate(layers, head, params, X, y)
        return DefenseStep(objective=loss, grad=grad, losses=[loss])
    if cfg.variant == "multi_step_avg":
        return _multi_step_core(layers, head, params, X, y, cfg, cfg.K, rng)
    if cfg.variant in ("acrt", "sam"):
        return _acrt_core(layers, head, params, X, y, cfg)
    return _awp_core(layers, head, params, X, y, cfg)


def train(
    model: Model,
    data: Batch,
    cfg: DefenseConfig | None = None,
    optimizer: SGD = SGD(),
    epochs: int = 10,
    seed: int = 0,
    batch_size: int = 32,
    on_step: Callable[[int, int, DefenseStep], None] | None = None,
) -> tuple[Model, TrainReport]:
    """Mini-batch SGD on the clean loss (``cfg=None``) or a defense objective.

    Defense is inactive (plain training) for epochs before ``cfg.start_epoch``.
    Data order is drawn from ``seed``; any randomness inside the defense uses
    an independent stream, so a disabled defense reproduces the baseline
    trajectory bit for bit.

    Raises:
        DivergedTrainingError: a non-finite objective or gradient appears.
    """
    if epochs < 1:
        raise RejectedInputError("epochs must be >= 1")
    if batch_size < 1:
        raise RejectedInputError("batch_size must be >= 1")
    if cfg is not None and cfg.partition is not None:
        cfg.partition.check(model.k_total)
    layers, head = model.layers, model.head
    X, y = data.inputs, data.targets
    m = X.shape[0]
    order_rng = np.random.default_rng(seed)
    defense_rng = np.random.default_rng([seed, 1])
    params = model.params.copy()
    velocity = np.zeros_like(params) if optimizer.momentum else None
    records = []
    t_start = time.perf_counter()
    for epoch in range(epochs):
        t_epoch = time.perf_counter()
        active = cfg is not None and epoch >= cfg.start_epoch
        perm = order_rng.permutation(m)
        objectives = []
        for step_idx, lo in enumerate(range(0, m, batch_size)):
            idx = perm[lo : lo + batch_size]
            step = defense_step(layers, head, params, X[idx], y[idx], cfg, active, defense_rng)
            if not math.isfinite(step.objective) or not np.all(np.isfinite(step.grad)):
                raise DivergedTrainingError(epoch, step_idx, step.objective)
            if on_step is not None:
                on_step(epoch, step_idx, step)
            grad = step.grad
            if optimizer.weight_decay:
                grad = grad + optimizer.weight_decay * params
            if velocity is not None:
                velocity = optimizer.momentum * velocity + grad
                grad = velocity
            params -= optimizer.lr * grad
            objectives.append(step.objective)
        loss, out, _, _ = evaluate(layers, head, params, X, y, want_grad=False)
        if not math.isfinite(loss):
            raise DivergedTrainingError(epoch, len(objectives), loss)
        acc = float(np.mean(np.argmax(out, axis=1) == y.reshape(-1))) if head == "softmax_ce" else None
        records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss,
                train_accuracy=acc,
                objective=float(np.mean(objectives)),
                defense_active=active,
                wall_time=time.perf_counter() - t_epoch,
            )
        )
    config = {
        "epochs": epochs,
        "seed": seed,
        "batch_size": batch_size,
        "optimizer": asdict(optimizer),
        "defense": None if cfg is None else cfg.to_dict(),
    }
    report = TrainReport(records, config, wall_time=time.perf_counter() - t_start)
    return model.with_params(params), report
