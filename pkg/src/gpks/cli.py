"""Command-line front end: ``gpks {search,fit,predict,evaluate,split}``.

Settings come from an optional INI file (section ``[gpks]``, keys named like
the long flags with dashes or underscores) and are overridden by flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    CsvSchema,
    DataError,
    ModelFormatError,
    RawTable,
    Stratified,
    Temporal,
    atomic_write,
    load_csv,
    load_model,
    make_lag_features,
    rows_for_units,
    save_model,
    standardize_apply,
    standardize_fit,
    stratified_split,
    temporal_split,
)
from .evidence import Criterion, HessianError, aic_log_evidence, bic_log_evidence, laplace_log_evidence
from .gp import FactorizationError, TrainedGP, fit_gp, posterior_predict, predict_intervals
from .kernels import KernelSyntaxError, Leaf, Kind, format_kernel_expr, num_hyperparams, parse_kernel_expr
from .metrics import MetricError, evaluate, format_table, nominal_coverage
from .optimize import AllRestartsFailed, OptimizerConfig, optimize_hyperparams
from .search import SearchConfig, run_search_session

log = logging.getLogger("gpks")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
BASELINE = "Ma5"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    data: str | None = None
    schema: str | None = None
    criterion: str = "all"
    max_level: int = 3
    seed: int = 0
    restarts: int = 3
    k_sigma: float = 2.0
    kernel: str | None = None
    out_dir: str = "gpks-out"
    split: str | None = None
    lags: int = 0
    model: str | None = None
    max_iters: int = 200

    def criteria(self) -> list[Criterion]:
        names = ["aic", "bic", "laplace"] if self.criterion == "all" else self.criterion.split(",")
        try:
            return [Criterion(n.strip().lower()) for n in names]
        except ValueError:
            raise UsageError(f"unknown criterion {self.criterion!r}; use aic, bic, laplace or all")

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(max_iters=self.max_iters, restarts=self.restarts, seed=self.seed)


_INT_KEYS = {"max_level", "seed", "restarts", "lags", "max_iters"}


def _read_config_file(path: str) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not parser.has_section("gpks"):
        raise UsageError(f"config {path} has no [gpks] section")
    return {k.replace("-", "_"): v for k, v in parser.items("gpks")}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(_read_config_file(args.config))
    for key in RunConfig.__dataclass_fields__:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    unknown = set(values) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    try:
        for key in _INT_KEYS & set(values):
            values[key] = int(values[key])
        if "k_sigma" in values:
            values["k_sigma"] = float(values["k_sigma"])
    except ValueError as exc:
        raise UsageError(f"bad numeric setting: {exc}")
    config = RunConfig(**values)
    config.criteria()
    if config.max_level < 1 or config.restarts < 1 or config.k_sigma < 0 or config.lags < 0:
        raise UsageError("max-level and restarts must be >= 1, k-sigma and lags >= 0")
    return config


def _schema(config: RunConfig) -> CsvSchema:
    if not config.schema:
        raise UsageError("--schema is required")
    try:
        path = Path(config.schema)
        if path.suffix == ".json" and path.exists():
            doc = json.loads(path.read_text(encoding="utf-8"))
            return CsvSchema(**{k: (tuple(v) if k == "feature_columns" else v) for k, v in doc.items()})
        return CsvSchema.parse(config.schema)
    except (TypeError, DataError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad schema: {exc}")


def parse_split(text: str | None, seed: int):
    """``stratified:<col>:<ratio>[:<repeats>]`` or ``temporal:<a>/<b>:<c>/<d>``."""
    if not text or text == "none":
        return None
    kind, _, rest = text.partition(":")
    try:
        if kind == "stratified":
            parts = rest.split(":")
            if len(parts) not in (2, 3):
                raise ValueError("expected stratified:<col>:<ratio>:<repeats>")
            repeats = int(parts[2]) if len(parts) == 3 else 1
            return Stratified(parts[0], float(parts[1]), repeats, seed)
        if kind == "temporal":
            # ISO timestamps may contain ':', so try every separator position
            for i, c in enumerate(rest):
                if c != ":":
                    continue
                try:
                    return Temporal(_parse_range(rest[:i]), _parse_range(rest[i + 1 :]))
                except ValueError:
                    continue
            raise ValueError("expected temporal:<start>/<end>:<start>/<end>")
    except (ValueError, DataError) as exc:
        raise UsageError(f"bad --split {text!r}: {exc}")
    raise UsageError(f"bad --split {text!r}: unknown kind {kind!r}")


def _parse_range(text: str):
    start, sep, end = text.partition("/")
    if not sep:
        raise ValueError(f"range {text!r} lacks '/'")
    return datetime.fromisoformat(start), datetime.fromisoformat(end)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _provenance(config: RunConfig, *inputs) -> dict:
    return {
        "gpks_version": __version__,
        "config": asdict(config),
        "inputs": {str(p): _sha256(p) for p in inputs if p},
    }


def _dump(path: Path, doc) -> None:
    atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Shared pipeline steps
# ---------------------------------------------------------------------------


def _load_table(config: RunConfig) -> tuple[RawTable, CsvSchema]:
    if not config.data:
        raise UsageError("--data is required")
    schema = _schema(config)
    table = load_csv(config.data, schema)
    if config.lags:
        if table.timestamps is None:
            raise UsageError("--lags needs a timestamp column in the schema")
        table = make_lag_features(table.timestamps, table.y, config.lags, name=schema.target_column)
    return table, schema


def _splits(table: RawTable, schema: CsvSchema, config: RunConfig):
    """Yield ``(train_rows, test_rows)`` per repeat; test is None without a split."""
    plan = parse_split(config.split, config.seed)
    if plan is None:
        return [(np.arange(len(table)), None)]
    if isinstance(plan, Temporal):
        return [temporal_split(table, plan)]
    out = []
    for r in range(plan.repeats):
        train_u, test_u = stratified_split(table, plan.group_column, plan.ratio, plan.seed + r, schema.unit_column)
        out.append((rows_for_units(table, train_u, schema.unit_column),
                    rows_for_units(table, test_u, schema.unit_column)))
    return out


def _trained(expr, theta, train, table: RawTable, provenance: dict) -> TrainedGP:
    model = fit_gp(expr, theta, train)
    model.meta.update(target_name=table.target_name, provenance=provenance)
    return model


def _report_row(name: str, kernel: str, report) -> dict:
    d = {"model": name, "kernel": kernel}
    if report is not None:
        d.update(RMSE=report.rmse, MAPE=report.mape, PICP=report.picp, MPIW=report.mpiw,
                 n_test=report.n_test, n_excluded_mape=report.n_excluded_mape)
    return d


def _aggregate(per_repeat: list[list[dict]]) -> list[dict]:
    rows = []
    for i, first in enumerate(per_repeat[0]):
        row = {"model": first["model"], "kernels": [rep[i]["kernel"] for rep in per_repeat]}
        for col in ("RMSE", "MAPE", "PICP", "MPIW"):
            vals = [rep[i][col] for rep in per_repeat if col in rep[i]]
            if vals:
                row[col] = float(np.mean(vals))
                row[col + "_sd"] = float(np.std(vals))
        rows.append(row)
    return rows


def _table_text(rows: list[dict], nominal: float) -> str:
    cols = ("RMSE", "MAPE", "PICP", "MPIW")
    width = max(len("Model"), *(len(r["model"]) for r in rows))
    lines = [f"{'Model':<{width}}  " + "  ".join(f"{c:>10}" for c in cols)]
    for r in rows:
        cells = [f"{r[c]:>10.4f}" if c in r else f"{'-':>10}" for c in cols]
        lines.append(f"{r['model']:<{width}}  " + "  ".join(cells))
    lines.append(f"nominal coverage: {nominal}%")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_search(config: RunConfig) -> int:
    criteria = config.criteria()
    table, schema = _load_table(config)
    out = Path(config.out_dir)
    prov = _provenance(config, config.data)
    splits = _splits(table, schema, config)

    per_repeat, timings = [], {}
    for r, (train_rows, test_rows) in enumerate(splits):
        sub = out if len(splits) == 1 else out / f"repeat_{r}"
        train, transforms = standardize_fit(table.subset(train_rows))
        test = None if test_rows is None else standardize_apply(transforms, table.subset(test_rows))
        opt_config = config.optimizer()
        configs = [SearchConfig(criterion=c, max_level=config.max_level, optimizer=opt_config) for c in criteria]
        rows = []
        for entry in run_search_session(train, configs):
            crit = entry.config.criterion
            if entry.result is None:
                _dump(sub / f"search_{crit.value}.json", {"error": entry.error, "provenance": prov})
                rows.append({"model": crit.label, "kernel": None, "error": entry.error})
                continue
            result = entry.result
            doc = result.to_dict(include_timing=False)
            doc["provenance"] = prov
            _dump(sub / f"search_{crit.value}.json", doc)
            timings[f"repeat_{r}/{crit.value}"] = [
                [c.wall_time for c in lv.candidates] for lv in result.levels
            ]
            model = _trained(result.best_expr, result.best_opt.theta, train, table, prov)
            save_model(model, sub / f"model_{crit.value}.json")
            report = evaluate(model, test, config.k_sigma) if test is not None else None
            rows.append(_report_row(crit.label, format_kernel_expr(result.best_expr), report))

        baseline = Leaf(Kind.Ma5)
        opt = optimize_hyperparams(baseline, train, np.zeros(num_hyperparams(baseline)), opt_config)
        model = _trained(baseline, opt.theta, train, table, prov)
        save_model(model, sub / "model_ma5.json")
        report = evaluate(model, test, config.k_sigma) if test is not None else None
        rows.append(_report_row(BASELINE, BASELINE, report))
        per_repeat.append(rows)

    nominal = nominal_coverage(config.k_sigma)
    final = per_repeat[0] if len(per_repeat) == 1 else _aggregate(per_repeat)
    doc = {"rows": final, "nominal_coverage": nominal, "provenance": prov}
    if len(per_repeat) > 1:
        doc["per_repeat"] = per_repeat
    _dump(out / "report.json", doc)
    text = _table_text(final, nominal)
    atomic_write(out / "report.txt", text)
    _dump(out / "timings.json", timings)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_fit(config: RunConfig) -> int:
    if not config.kernel:
        raise UsageError("--kernel is required")
    try:
        expr = parse_kernel_expr(config.kernel)
    except KernelSyntaxError as exc:
        raise UsageError(str(exc))
    table, schema = _load_table(config)
    train_rows, _ = _splits(table, schema, config)[0]
    train, _ = standardize_fit(table.subset(train_rows))
    opt = optimize_hyperparams(expr, train, np.zeros(num_hyperparams(expr)), config.optimizer())
    prov = _provenance(config, config.data)
    model = _trained(expr, opt.theta, train, table, prov)
    path = Path(config.out_dir) / "model.json"
    save_model(model, path)
    m = num_hyperparams(expr)
    try:
        lap = laplace_log_evidence(expr, opt, train).value
    except HessianError:
        lap = None
    summary = {
        "kernel": format_kernel_expr(expr),
        "lml": opt.lml,
        "m": m,
        "n": train.n,
        "aic": aic_log_evidence(opt.lml, m),
        "bic": bic_log_evidence(opt.lml, m, train.n),
        "laplace": lap,
        "converged": opt.converged,
        "model_path": str(path),
    }
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def _model_inputs(config: RunConfig, require_target: bool):
    if not config.model:
        raise UsageError("--model is required")
    if not config.data:
        raise UsageError("--data is required")
    model = load_model(config.model)
    target = model.meta.get("target_name") or "y"
    schema = CsvSchema(model.dataset.feature_names, target)
    table = load_csv(config.data, schema, require_target=require_target)
    return model, table


def cmd_predict(config: RunConfig) -> int:
    model, table = _model_inputs(config, require_target=False)
    X = model.dataset.x_transform.apply(table.X)
    mean, _ = posterior_predict(model, X)
    lower, upper = predict_intervals(model, X, config.k_sigma)
    mean = model.dataset.y_transform.invert(mean)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mean", "lower", "upper"])
    for row in zip(mean, lower, upper):
        writer.writerow([repr(float(v)) for v in row])
    if config.out_dir:
        out = Path(config.out_dir)
        atomic_write(out / "predictions.csv", buf.getvalue())
        _dump(out / "predictions.meta.json",
              {"provenance": _provenance(config, config.model, config.data), "k_sigma": config.k_sigma})
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_evaluate(config: RunConfig) -> int:
    model, table = _model_inputs(config, require_target=True)
    train = model.dataset
    test = standardize_apply((train.x_transform, train.y_transform), table)
    report = evaluate(model, test, config.k_sigma)
    name = format_kernel_expr(model.expr)
    doc = {
        "model": name,
        **report.to_dict(),
        "provenance": _provenance(config, config.model, config.data),
    }
    out = Path(config.out_dir)
    _dump(out / "evaluation.json", doc)
    text = format_table([(name, report)])
    atomic_write(out / "evaluation.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def _write_table_csv(path: Path, table: RawTable) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    label_cols = list(table.labels)
    stamp = ["timestamp"] if table.timestamps is not None else []
    writer.writerow(stamp + label_cols + list(table.feature_names) + [table.target_name])
    for i in range(len(table)):
        row = [table.timestamps[i].isoformat()] if stamp else []
        row += [table.labels[c][i] for c in label_cols]
        row += [repr(float(v)) for v in table.X[i]] + [repr(float(table.y[i]))]
        writer.writerow(row)
    atomic_write(path, buf.getvalue())


def cmd_split(config: RunConfig) -> int:
    table, schema = _load_table(config)
    if not config.split:
        raise UsageError("--split is required")
    out = Path(config.out_dir)
    splits = _splits(table, schema, config)
    index = []
    for r, (train_rows, test_rows) in enumerate(splits):
        _write_table_csv(out / f"train_{r}.csv", table.subset(train_rows))
        _write_table_csv(out / f"test_{r}.csv", table.subset(test_rows))
        index.append({"repeat": r, "train_rows": len(train_rows), "test_rows": len(test_rows)})
    _dump(out / "split.json", {"splits": index, "provenance": _provenance(config, config.data)})
    sys.stdout.write(json.dumps(index) + "\n")
    return EXIT_OK


COMMANDS = {
    "search": cmd_search,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "split": cmd_split,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpks", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with a [gpks] section")
        p.add_argument("--data")
        p.add_argument("--schema", help="inline 'target=y;features=a,b;...' or a .json file")
        p.add_argument("--criterion", help="aic, bic, laplace, all, or a comma list")
        p.add_argument("--max-level", dest="max_level", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--restarts", type=int)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--k-sigma", dest="k_sigma", type=float)
        p.add_argument("--kernel")
        p.add_argument("--model")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--split")
        p.add_argument("--lags", type=int, help="build this many lag features from the target series")
        p.add_argument("-v", "--verbose", action="store_true", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config)
    except UsageError as exc:
        _emit_error("UsageError", str(exc))
        return EXIT_USAGE
    except (DataError, ModelFormatError, MetricError, KernelSyntaxError, FactorizationError,
            AllRestartsFailed, OSError, ValueError) as exc:
        _emit_error(type(exc).__name__, str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
