"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from ..constraints import ConstraintSet, format_norm
from ..corruption import error_bound_ratio, eta_cdf, eta_samples, pdf_integral
from ..defense import SGD, DefenseConfig, train
from ..errors import CheckpointError, ConfigError, DataFormatError, NumericalError, RejectedInputError
from ..nn import Model, ParamPartition, evaluate
from ..objectives import QuadraticObjective
from ..quantize import quantize_model
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config
from .datasets import SYNTH_KINDS, Dataset, load_csv, load_idx, synth_dataset
from .stats import two_sample_t
from .sweep import (
    layer_probe,
    read_sweep_csv,
    run_probe_sweep,
    write_rows_csv,
    write_rows_json,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class _DataError(Exception):
    pass


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _finite(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    task = cfg.section("task")
    kind = task["kind"]
    if kind in SYNTH_KINDS:
        return synth_dataset(kind, task["count"], task["noise"], task["seed"])
    try:
        if kind == "csv":
            return load_csv(task["path"], seed=task["seed"])
        if kind == "idx":
            return load_idx(task["images"], task["labels"], seed=task["seed"])
    except KeyError as exc:
        raise ConfigError(f"[task] kind = {kind} needs key {exc.args[0]!r}") from None
    except OSError as exc:
        raise _DataError(f"{exc.filename}: {exc.strerror}") from None
    raise ConfigError(f"[task] unknown kind {kind!r}")


def build_defense(cfg: ExperimentConfig, model: Model) -> DefenseConfig | None:
    if not cfg.has("defense"):
        return None
    d = dict(cfg.section("defense"))
    layers = d.pop("layers", None)
    try:
        partition = ParamPartition.layers(model, layers) if layers else None
    except IndexError:
        raise ConfigError(f"[defense] layers {layers} out of range for a {len(model.layers)}-layer model") from None
    try:
        return DefenseConfig(partition=partition, **d)
    except RejectedInputError as exc:
        raise ConfigError(f"[defense] {exc}") from None


def _out_dir(args, cfg) -> Path:
    out = Path(args.out if args.out is not None else cfg.section("run")["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seeds(args, cfg):
    return [args.seed] if args.seed is not None else cfg.seeds


def _metrics(model, data):
    loss, out, _, _ = evaluate(model.layers, model.head, model.params, data.inputs, data.targets, want_grad=False)
    res = {"loss": loss}
    if model.head == "softmax_ce":
        res["accuracy"] = float(np.mean(np.argmax(out, axis=1) == data.targets.reshape(-1)))
    return res


def cmd_train(args, cfg: ExperimentConfig, defend: bool) -> int:
    if defend and not cfg.has("defense"):
        raise ConfigError("defend needs a [defense] section")
    data = build_dataset(cfg)
    m, t = cfg.section("model"), cfg.section("train")
    out = _out_dir(args, cfg)
    summary = []
    for seed in _seeds(args, cfg):
        try:
            model = Model.init(m["sizes"], m["activation"], m["head"], seed, m["output_activation"])
            opt = SGD(t["lr"], t["momentum"], t["weight_decay"])
        except RejectedInputError as exc:
            raise ConfigError(str(exc)) from None
        if model.n_inputs != data.n_features:
            raise ConfigError(f"[model] sizes start at {model.n_inputs} but the data has {data.n_features} features")
        dcfg = build_defense(cfg, model) if defend else None
        trained, report = train(model, data.train, dcfg, opt, t["epochs"], seed, t["batch_size"])
        tag = "defend" if defend else "train"
        ckpt = out / f"{tag}_seed{seed}.ckpt"
        save_checkpoint(trained, None if dcfg is None else dcfg.partition, ckpt)
        report.checkpoint = ckpt.name
        _dump_json(report.to_dict(), out / f"{tag}_seed{seed}.json")
        summary.append({"seed": seed, "checkpoint": ckpt.name, "test": _metrics(trained, data.test),
                        "train": _metrics(trained, data.train)})
    _dump_json({"runs": summary}, out / f"{'defend' if defend else 'train'}_summary.json")
    return EXIT_OK


def _checkpoint_path(args, cfg) -> Path:
    path = args.checkpoint or cfg.section("run").get("checkpoint")
    if not path:
        raise ConfigError("no checkpoint given (use --checkpoint or [run] checkpoint)")
    return Path(path)


def cmd_probe(args, cfg) -> int:
    if not cfg.sweep:
        raise ConfigError("probe needs at least one [sweep.<method>] section")
    data = build_dataset(cfg)
    ckpt = _checkpoint_path(args, cfg)
    load_checkpoint(ckpt)
    run = cfg.section("run")
    try:
        rows = run_probe_sweep(ckpt, cfg.sweep, data.test, _seeds(args, cfg), run["metrics"], run["workers"])
    except RejectedInputError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args, cfg)
    write_rows_csv(rows, out / "sweep.csv")
    write_rows_json(rows, out / "sweep.json")
    return EXIT_OK


def cmd_layer_probe(args, cfg) -> int:
    data = build_dataset(cfg)
    ckpt = _checkpoint_path(args, cfg)
    pr = cfg.section("probe")
    try:
        S = ConstraintSet(pr["p"], pr["epsilon"], pr["n"])
        seed = _seeds(args, cfg)[0]
        rows = layer_probe(ckpt, pr["grouping"], S, pr["K"], pr["alpha"], data.test, seed, pr["batch_size"])
    except RejectedInputError as exc:
        raise ConfigError(str(exc)) from None
    write_rows_csv(rows, _out_dir(args, cfg) / "layer_probe.csv")
    return EXIT_OK


def cmd_quantize_eval(args, cfg) -> int:
    data = build_dataset(cfg)
    model, partition = load_checkpoint(_checkpoint_path(args, cfg))
    clean = _metrics(model, data.test)
    rows = []
    for bits in cfg.section("quantize")["bits"]:
        try:
            q = quantize_model(model, bits, partition)
        except RejectedInputError as exc:
            raise ConfigError(f"[quantize] {exc}") from None
        qm = _metrics(q, data.test)
        rows.append({
            "bits": bits,
            "clean_loss": clean["loss"],
            "quantized_loss": qm["loss"],
            "clean_accuracy": clean.get("accuracy"),
            "quantized_accuracy": qm.get("accuracy"),
            "max_abs_change": float(np.max(np.abs(q.params - model.params))),
        })
    out = _out_dir(args, cfg)
    cols = list(rows[0])
    lines = [",".join(cols)] + [",".join("" if r[c] is None else repr(r[c]) for c in cols) for r in rows]
    (out / "quantize.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def ks_distance(samples: np.ndarray, k: int) -> float:
    """Sup distance between the empirical cdf of ``samples`` and the eta cdf."""
    x = np.sort(samples)
    n = x.size
    F = np.array([eta_cdf(float(v), k) for v in x])
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def cmd_eta_stats(args, cfg) -> int:
    e = cfg.section("eta")
    seed = _seeds(args, cfg)[0]
    result = {}
    for k in e["k"]:
        if k < 2:
            raise ConfigError(f"[eta] k must be >= 2, got {k}")
        g = np.zeros(k)
        g[0] = 1.0
        s = eta_samples(g, e["samples"], seed, e["workers"])
        result[str(k)] = {"samples": e["samples"], "ks_distance": ks_distance(s, k), "pdf_integral": pdf_integral(k),
                          "mean": float(s.mean())}
    _dump_json({"seed": seed, "k": result}, _out_dir(args, cfg) / "eta.json")
    return EXIT_OK


def cmd_bound_check(args, cfg) -> int:
    b = cfg.section("bound")
    h, g = np.array(b["hessian"]), np.array(b["gradient"])
    if h.size != g.size:
        raise ConfigError(f"[bound] hessian diagonal has {h.size} entries but gradient has {g.size}")
    quad = QuadraticObjective(h, g)
    rows = []
    for eps in b["epsilon"]:
        try:
            r = error_bound_ratio(quad, ConstraintSet(b["p"], eps, b["n"]), b["resolution"])
        except RejectedInputError as exc:
            raise ConfigError(f"[bound] {exc}") from None
        rows.append([eps, r.ratio, r.ratio - 1.0, r.constant, r.delta_max, r.delta_gradient, r.ordering_holds])
    cols = ["epsilon", "ratio", "ratio_minus_1", "constant", "delta_max", "delta_gradient", "ordering_holds"]
    lines = [",".join(cols)] + [",".join(repr(v) if isinstance(v, float) else str(v) for v in row) for row in rows]
    (_out_dir(args, cfg) / "bound.csv").write_text(f"# p={format_norm(b['p'])}\n" + "\n".join(lines) + "\n")
    return EXIT_OK


def _seed_stats(rows, metric):
    groups = {}
    for r in rows:
        if r.metric == metric and r.corrupted is not None and not r.error:
            groups.setdefault((r.method, r.setting), []).append(r.corrupted)
    return {key: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0, len(v))
            for key, v in groups.items()}


def cmd_ttest(args, cfg) -> int:
    results = []
    if args.values:
        m1, s1, m2, s2, n = args.values
        if n != int(n):
            raise ConfigError("n must be an integer")
        try:
            r = two_sample_t(m1, s1, m2, s2, int(n))
        except RejectedInputError as exc:
            raise ConfigError(str(exc)) from None
        results.append({"t": r.t, "df": r.df, "critical": r.critical, "significant": r.significant})
    else:
        if not (args.a and args.b):
            raise ConfigError("ttest needs --values or both --a and --b sweep CSVs")
        a, b = _seed_stats(read_sweep_csv(args.a), args.metric), _seed_stats(read_sweep_csv(args.b), args.metric)
        for key in sorted(set(a) & set(b)):
            (m1, s1, n1), (m2, s2, n2) = a[key], b[key]
            row = {"method": key[0], "setting": key[1], "metric": args.metric, "mean_a": m1, "std_a": s1,
                   "mean_b": m2, "std_b": s2, "n": min(n1, n2)}
            if n1 != n2 or n1 < 2 or (s1 == 0 and s2 == 0):
                row.update(t=None, df=None, critical=None, significant=None)
            else:
                r = two_sample_t(m1, s1, m2, s2, n1)
                row.update(t=r.t, df=r.df, critical=r.critical, significant=r.significant)
            results.append(row)
    text = json.dumps({"tests": results}, indent=2, sort_keys=True) + "\n"
    if args.out is not None or cfg.source is not None:
        (_out_dir(args, cfg) / "ttest.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args, cfg) -> int:
    if not args.sweep:
        raise ConfigError("report needs at least one --sweep CSV")
    rows = [r for path in args.sweep for r in read_sweep_csv(path)]
    groups = {}
    for r in rows:
        groups.setdefault((r.method, r.setting, r.metric), []).append(r)
    out_rows = []
    for (method, setting, metric), rs in sorted(groups.items()):
        ok = [r for r in rs if not r.error and r.corrupted is not None]
        clean = np.array([r.clean for r in rs])
        corr = np.array([r.corrupted for r in ok])
        out_rows.append({
            "method": method,
            "setting": setting,
            "metric": metric,
            "seeds": len(rs),
            "errors": len(rs) - len(ok),
            "clean_mean": float(clean.mean()),
            "clean_std": float(clean.std(ddof=1)) if clean.size > 1 else 0.0,
            "corrupted_mean": float(corr.mean()) if corr.size else None,
            "corrupted_std": (float(corr.std(ddof=1)) if corr.size > 1 else 0.0) if corr.size else None,
        })
    out = _out_dir(args, cfg)
    cols = list(out_rows[0]) if out_rows else ["method"]
    lines = [",".join(cols)] + [",".join("" if r[c] is None else str(r[c]) if not isinstance(r[c], float)
                                         else repr(r[c]) for c in cols) for r in out_rows]
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    _dump_json([{k: _finite(v) for k, v in r.items()} for r in out_rows], out / "report.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI sections)")
    common.add_argument("--seed", type=int, help="run a single seed, overriding [run] seeds")
    common.add_argument("--out", help="output directory, overriding [run] out")
    parser = argparse.ArgumentParser(prog="paramdefense", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train baseline models")
    sub.add_parser("defend", parents=[common], help="train with a [defense] section")
    for name, text in (("probe", "corruption sweep over [sweep.*] grids"),
                       ("layer-probe", "per-layer multi-step corruption"),
                       ("quantize-eval", "loss/accuracy after n-bit quantization")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint to probe, overriding [run] checkpoint")
    sub.add_parser("eta-stats", parents=[common], help="Monte Carlo check of the eta distribution")
    sub.add_parser("bound-check", parents=[common], help="gradient-corruption error ratio on a quadratic")
    t = sub.add_parser("ttest", parents=[common], help="two-sample t statistic")
    t.add_argument("--values", nargs=5, type=float, metavar=("MEAN1", "STD1", "MEAN2", "STD2", "N"))
    t.add_argument("--a", help="sweep CSV of the first model")
    t.add_argument("--b", help="sweep CSV of the second model")
    t.add_argument("--metric", default="accuracy")
    r = sub.add_parser("report", parents=[common], help="aggregate sweep CSVs over seeds")
    r.add_argument("--sweep", action="append", help="sweep CSV (repeatable)")
    return parser


COMMANDS = {
    "train": lambda a, c: cmd_train(a, c, defend=False),
    "defend": lambda a, c: cmd_train(a, c, defend=True),
    "probe": cmd_probe,
    "layer-probe": cmd_layer_probe,
    "quantize-eval": cmd_quantize_eval,
    "eta-stats": cmd_eta_stats,
    "bound-check": cmd_bound_check,
    "ttest": cmd_ttest,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else parse_config("", "<defaults>")
        if not args.config:
            cfg.source = None
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, _DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
