"""Corruption sweeps and per-layer vulnerability probes over a trained checkpoint."""

from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..constraints import ConstraintSet, format_norm, parse_norm
from ..corruption import gradient_corruption, multi_step_corrupt, sample_gaussian, sample_uniform
from ..errors import ParamDefenseError, RejectedInputError
from ..nn import Batch, Model, ParamPartition, apply_corruption, evaluate
from ..objectives import ModelObjective
from ..quantize import quantize_model
from .checkpoint import load_checkpoint

METHODS = ("multi_step", "gradient", "gaussian", "uniform", "quantize")
METRICS = ("loss", "accuracy")

# parameters each method accepts, in the order they appear in a setting label
METHOD_PARAMS = {
    "multi_step": ("epsilon", "p", "n", "K", "alpha", "batch_size"),
    "gradient": ("epsilon", "p", "n"),
    "gaussian": ("sigma",),
    "uniform": ("b",),
    "quantize": ("bits",),
}
REQUIRED = {"multi_step": "epsilon", "gradient": "epsilon", "gaussian": "sigma", "uniform": "b", "quantize": "bits"}

CSV_COLUMNS = ("method", "setting", "seed", "metric", "clean", "corrupted", "error")


@dataclass(frozen=True)
class ReportRow:
    method: str
    setting: str
    seed: int
    metric: str
    clean: float
    corrupted: float | None
    error: str = ""


def _fmt(v) -> str:
    if v is None:
        return "all"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return format(v, ".12g")
    return str(v)


def setting_label(method: str, setting: dict) -> str:
    return ";".join(f"{k}={_fmt(setting.get(k))}" for k in METHOD_PARAMS[method] if k in setting)


def expand_grid(method: str, grid: dict) -> list[dict]:
    """Cartesian product of a method's parameter lists, validated."""
    if method not in METHODS:
        raise RejectedInputError(f"unknown corruption method {method!r}; expected one of {METHODS}")
    unknown = set(grid) - set(METHOD_PARAMS[method])
    if unknown:
        raise RejectedInputError(f"{method} does not take parameter(s) {sorted(unknown)}")
    if REQUIRED[method] not in grid:
        raise RejectedInputError(f"{method} grid needs {REQUIRED[method]!r}")
    keys = [k for k in METHOD_PARAMS[method] if k in grid]
    values = []
    for k in keys:
        v = grid[k]
        v = list(v) if isinstance(v, (list, tuple)) else [v]
        if not v:
            raise RejectedInputError(f"{method} grid for {k!r} is empty")
        values.append(v)
    out = []
    for combo in itertools.product(*values):
        s = dict(zip(keys, combo))
        if "p" in s:
            s["p"] = parse_norm(s["p"])
        for name in ("epsilon", "sigma", "b"):
            if name in s and not s[name] >= 0:
                raise RejectedInputError(f"{method}: {name} must be >= 0")
        if "bits" in s and (int(s["bits"]) != s["bits"] or s["bits"] < 2):
            raise RejectedInputError(f"quantize: bits must be an integer >= 2, got {s['bits']}")
        out.append(s)
    return out


def _metrics(model: Model, data: Batch) -> dict:
    loss, out, _, _ = evaluate(model.layers, model.head, model.params, data.inputs, data.targets, want_grad=False)
    m = {"loss": loss}
    if model.head == "softmax_ce":
        m["accuracy"] = float(np.mean(np.argmax(out, axis=1) == data.targets.reshape(-1)))
    return m


def corrupt(model: Model, partition: ParamPartition, method: str, setting: dict, data: Batch, seed: int) -> Model:
    """Apply one corruption method to the corruptible entries of ``model``.

    Search-based corruptions (multi-step, gradient) use ``data`` as the
    probing objective.
    """
    k = partition.k
    if method == "quantize":
        return quantize_model(model, int(setting["bits"]), partition)
    if method == "gaussian":
        if setting["sigma"] == 0:
            return model
        a = sample_gaussian(k, setting["sigma"], 1, seed)[0]
        return apply_corruption(model, a, partition)
    if method == "uniform":
        if setting["b"] == 0:
            return model
        a = sample_uniform(k, setting["b"], 1, seed)[0]
        return apply_corruption(model, a, partition)
    S = ConstraintSet(setting.get("p", math.inf), setting["epsilon"], setting.get("n"))
    if S.epsilon == 0:
        return model
    if method == "gradient":
        res = gradient_corruption(ModelObjective(model, data.inputs, data.targets), S, partition)
        return apply_corruption(model, res.a, partition)
    obj = ModelObjective(model, data.inputs, data.targets, batch_size=setting.get("batch_size", 32))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        trace = multi_step_corrupt(obj, S, K=setting.get("K"), alpha=setting.get("alpha"), partition=partition,
                                   seed=seed)
    return apply_corruption(model, trace.final, partition)


def _load(checkpoint):
    if isinstance(checkpoint, (str, Path)):
        return load_checkpoint(checkpoint)
    model, partition = checkpoint
    return model, partition if partition is not None else ParamPartition.full(model)


def _sort_key(row: ReportRow):
    return (METHODS.index(row.method), row.setting, row.seed, row.metric)


def run_probe_sweep(checkpoint, methods: dict, data: Batch, seeds, metrics=("loss",),
                    workers: int = 1) -> list[ReportRow]:
    """Evaluate every (method, setting, seed) cell on ``data``.

    ``checkpoint`` is a path or a ``(Model, ParamPartition)`` pair; each cell
    works on its own copy.  ``methods`` maps a method name to its parameter
    grid.  A failing cell becomes a row with an ``error`` message and the
    sweep carries on.  Rows come back sorted.
    """
    seeds = list(seeds)
    if not seeds:
        raise RejectedInputError("at least one seed is required")
    if not methods:
        raise RejectedInputError("at least one corruption method is required")
    for m in metrics:
        if m not in METRICS:
            raise RejectedInputError(f"unknown metric {m!r}; expected one of {METRICS}")
    cells = [(m, s, seed) for m, grid in methods.items() for s in expand_grid(m, grid) for seed in seeds]

    def run(cell):
        method, setting, seed = cell
        label = setting_label(method, setting)
        model, partition = _load(checkpoint)
        clean = _metrics(model, data)
        try:
            corrupted = _metrics(corrupt(model, partition, method, setting, data, seed), data)
            err = ""
        except (ParamDefenseError, ArithmeticError, ValueError) as exc:
            corrupted, err = {}, f"{type(exc).__name__}: {exc}"
        return [
            ReportRow(method, label, int(seed), m, clean.get(m, math.nan), corrupted.get(m), err)
            for m in metrics
        ]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            groups = list(pool.map(run, cells))
    else:
        groups = [run(c) for c in cells]
    return sorted((r for g in groups for r in g), key=_sort_key)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows_csv(rows, path, columns=None) -> Path:
    path = Path(path)
    rows = list(rows)
    if columns is None:
        columns = list(asdict(rows[0])) if rows else list(CSV_COLUMNS)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            d = asdict(r)
            w.writerow([_cell(d[c]) for c in columns])
    return path


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def write_rows_json(rows, path) -> Path:
    path = Path(path)
    payload = [{k: _json_safe(v) for k, v in asdict(r).items()} for r in rows]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_sweep_csv(path) -> list[ReportRow]:
    rows = []
    with Path(path).open(newline="") as fh:
        for d in csv.DictReader(fh):
            rows.append(
                ReportRow(
                    d["method"],
                    d["setting"],
                    int(d["seed"]),
                    d["metric"],
                    float(d["clean"]),
                    float(d["corrupted"]) if d["corrupted"] else None,
                    d.get("error", ""),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# per-layer probing


@dataclass(frozen=True)
class LayerProbeRow:
    group: str
    k: int
    base_loss: float
    corrupted_loss: float
    delta: float


def layer_groups(model: Model, grouping: str = "layers") -> list[tuple[str, ParamPartition]]:
    """Named partitions: one per layer, or one per weight matrix / bias vector."""
    if grouping == "layers":
        spans = model.layer_slices()
    elif grouping == "tensors":
        spans = [(name, sl) for name, sl, _ in model.tensor_slices()]
    elif grouping == "all":
        spans = [("all", slice(0, model.k_total))]
    else:
        raise RejectedInputError(f"unknown grouping {grouping!r}; expected 'layers', 'tensors' or 'all'")
    return [(name, ParamPartition.from_slices(model.k_total, [sl])) for name, sl in spans]


def layer_probe(checkpoint, groups, S: ConstraintSet, K: int | None, alpha: float | None, data: Batch,
                seed: int = 0, batch_size: int = 32) -> list[LayerProbeRow]:
    """Multi-step corruption confined to each group in turn.

    ``groups`` is a grouping name (see :func:`layer_groups`) or a list of
    ``(name, ParamPartition)`` pairs that must partition the parameters.
    """
    model, _ = _load(checkpoint)
    if isinstance(groups, str):
        groups = layer_groups(model, groups)
    if not groups:
        raise RejectedInputError("no groups given")
    cover = np.zeros(model.k_total, dtype=int)
    for name, part in groups:
        part.check(model.k_total, require_nonempty=False)
        if part.k == 0:
            raise RejectedInputError(f"group {name!r} is empty")
        cover += part.mask
    if np.any(cover != 1):
        raise RejectedInputError("groups must be disjoint and cover every parameter")
    obj = ModelObjective(model, data.inputs, data.targets, batch_size=batch_size)
    rows = []
    for name, part in groups:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            trace = multi_step_corrupt(obj, S, K=K, alpha=alpha, partition=part, seed=seed)
        loss = obj.loss(apply_corruption(model, trace.final, part).params)
        rows.append(LayerProbeRow(name, part.k, trace.base_loss, loss, loss - trace.base_loss))
    return rows


def describe_setting(S: ConstraintSet) -> str:
    return f"epsilon={_fmt(S.epsilon)};p={format_norm(S.p)};n={_fmt(S.n)}"
