"""Command line entry point: ``itemfit {fit,project,synth,report-residuals,validate}``.

Exit codes: 0 success, 2 bad input, 3 numerical failure. Every command
writes a JSON manifest next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import SyntheticSpec, generate_synthetic, load_csv, load_schema, save_schema, shuffle, write_csv
from .errors import InputError, ItemError, NumericalError
from .fitter import expand_categorical, fit
from .likelihood import model_data, predict_proba
from .model import FitConfig, load_model, save_model, validate_grid
from .projection import (
    ItemTransitionModel,
    hybrid_trace,
    project_hybrid,
    project_matrix,
    simulate_paths,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("itemfit")


# --------------------------------------------------------------------------- #
# Helpers
# --------------------------------------------------------------------------- #


def _coerce(field_type, text: str):
    t = str(field_type)
    if "bool" in t:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InputError(f"not a boolean: {text!r}")
    if text.strip().lower() in ("none", "") and "None" in t:
        return None
    if "int" in t:
        return int(text)
    if "float" in t:
        return float(text)
    return text.strip()


_CONFIG_FIELDS = {f.name: f.type for f in fields(FitConfig)}


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment.

    Keys are FitConfig field names; camelCase spellings (``maxCurves``) are
    accepted too.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = re.sub(r"(?<=[a-z0-9])([A-Z])", r"_\1", key).lower()
        if key not in _CONFIG_FIELDS:
            raise InputError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(_CONFIG_FIELDS[key], value)
        except ValueError:
            raise InputError(f"config line {lineno}: bad value {value!r} for {key}") from None
    return out


def _config_snapshot(config: FitConfig) -> dict:
    d = asdict(config)
    d["criterion"] = config.criterion.value
    return d


def _write_manifest(path: Path, command: str, args: argparse.Namespace, started: float, **extra) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "wall_clock_seconds": round(time.time() - started, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _load_grid(data, schema_path):
    schema = load_schema(schema_path)
    return load_csv(data, schema), schema


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_fit(args) -> int:
    started = time.time()
    values = parse_config(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    for key in ("criterion", "max_curves", "seed", "anneal_loops", "noise_sd", "start_status", "threads", "m0"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    config = FitConfig(**values)
    grid, _ = _load_grid(args.data, args.schema)
    problems = validate_grid(grid, grid.space())
    if problems:
        raise InputError("invalid grid: " + "; ".join(problems[:5]))
    grid = shuffle(expand_categorical(grid), config.seed)
    model, report = fit(grid, config)
    save_model(model, args.out_model)
    report.write_csv(args.out_report)
    _write_manifest(
        _manifest_path(args.out_model), "fit", args, started,
        config=_config_snapshot(config),
        seed=config.seed,
        rows_processed=grid.n_rows,
        curves=len(model.curves),
        terminal_reason=report.reason.value if report.reason else None,
    )
    print(f"fitted {len(model.curves)} curve(s); stop reason {report.reason.value if report.reason else '-'}")
    return EXIT_OK


def _read_covariates(path) -> dict:
    """CSV with one column per regressor, one row per period (an optional ``time`` column is ignored)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols: dict[str, list[float]] = {name: [] for name in reader.fieldnames or [] if name != "time"}
        for rec in reader:
            for name in cols:
                try:
                    cols[name].append(float(rec[name]))
                except ValueError:
                    raise InputError(f"{path} line {reader.line_num}: {name}={rec[name]!r} is not a number") from None
    if cols and not all(cols.values()):
        raise InputError(f"{path}: no covariate rows")
    return {k: np.array(v) for k, v in cols.items()}


def _parse_pairs(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InputError(f"expected name=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_project(args) -> int:
    started = time.time()
    models = [load_model(p) for p in args.model]
    covariates = _read_covariates(args.covariates) if args.covariates else {}
    tm = ItemTransitionModel(models, covariates, _parse_pairs(args.history_feature))
    start = args.start or models[0].start_status
    if args.method == "matrix":
        proj = project_matrix(tm, start, args.horizon)
    elif args.method == "simulate":
        proj = simulate_paths(tm, start, args.horizon, args.paths, args.seed)
    else:
        proj = project_hybrid(tm, args.horizon, args.paths, args.seed, start=start,
                              trace=hybrid_trace(tm, args.horizon, start))
    proj.write_csv(args.out)
    _write_manifest(_manifest_path(args.out), "project", args, started, seed=args.seed,
                    rows_processed=proj.rows_evaluated)
    return EXIT_OK


def cmd_synth(args) -> int:
    started = time.time()
    try:
        spec = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.spec}: not valid JSON ({exc})") from None
    model_ref = spec.get("model")
    if model_ref is None:
        raise InputError("synthetic spec needs a 'model' path")
    model_path = Path(args.spec).parent / model_ref
    model = load_model(model_path)
    n = int(args.rows if args.rows is not None else spec.get("n", 1000))
    seed = int(args.seed if args.seed is not None else spec.get("seed", 0))
    dists = {k: tuple(v) for k, v in spec.get("distributions", {}).items()}
    grid = generate_synthetic(SyntheticSpec(model, n, seed, dists))
    schema = write_csv(grid, args.out)
    schema_path = Path(args.schema_out) if args.schema_out else Path(args.out).with_suffix(".schema.json")
    save_schema(schema, schema_path)
    _write_manifest(_manifest_path(args.out), "synth", args, started, seed=seed, rows_processed=n,
                    schema=str(schema_path), generator=grid.metadata)
    print(f"wrote {n} rows; generator entropy {grid.metadata['generator_entropy']:.6f}")
    return EXIT_OK


def residual_table(model, grid, regressor: str, buckets: int = 50):
    """Equal-count buckets of ``regressor`` with actual vs. predicted rates per end state.

    Returns ``(rows, warning)``; each row is ``(bucket, lo, hi, mean_x, n,
    state, actual, predicted)``.
    """
    if regressor not in model.regressor_names:
        raise InputError(f"unknown regressor {regressor!r}")
    if buckets < 1:
        raise InputError("buckets must be at least 1")
    data = model_data(grid, model)
    if data.n == 0:
        raise InputError(f"no rows start in {model.start_status!r}")
    k = model.regressor_names.index(regressor)
    x = data.x[:, k]
    warning = None
    if x.min() == x.max():
        warning = f"regressor {regressor!r} is constant; using a single bucket"
        buckets = 1
    order = np.argsort(x, kind="stable")
    p = predict_proba(model, data.x)
    rows = []
    for b, idx in enumerate(np.array_split(order, min(buckets, data.n))):
        if len(idx) == 0:
            continue
        for j, s in enumerate(model.outcome_states):
            rows.append((b, float(x[idx].min()), float(x[idx].max()), float(x[idx].mean()), len(idx), s,
                         float(data.y[idx, j].mean()), float(p[idx, j].mean())))
    return rows, warning


def cmd_report_residuals(args) -> int:
    started = time.time()
    model = load_model(args.model)
    grid, _ = _load_grid(args.data, args.schema)
    grid = expand_categorical(grid)
    rows, warning = residual_table(model, grid, args.regressor, args.buckets)
    if warning:
        print(f"warning: {warning}", file=sys.stderr)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bucket", "x_min", "x_max", "x_mean", "n", "state", "actual", "model"])
        for r in rows:
            w.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3]), r[4], r[5], repr(r[6]), repr(r[7])])
    _write_manifest(_manifest_path(args.out), "report-residuals", args, started, rows_processed=grid.n_rows,
                    warning=warning)
    return EXIT_OK


def cmd_validate(args) -> int:
    grid, schema = _load_grid(args.data, args.schema)
    problems = validate_grid(grid, grid.space())
    if args.model:
        model = load_model(args.model)
        expanded = expand_categorical(grid)
        if expanded.names != model.regressor_names:
            problems.append(f"grid columns {expanded.names} do not match model regressors {model.regressor_names}")
    for p in problems:
        print(p)
    if problems:
        return EXIT_INPUT
    print(f"ok: {grid.n_rows} rows, {grid.n_regressors} regressors")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="itemfit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a grid")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--config")
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--criterion", choices=["AIC", "BIC"])
    p.add_argument("--max-curves", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--anneal-loops", type=int)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--start-status")
    p.add_argument("--m0", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("project", help="project a fitted model forward")
    p.add_argument("--model", required=True, action="append", help="model file; repeat for each start status")
    p.add_argument("--covariates", help="CSV with one column per regressor and one row per period")
    p.add_argument("--method", choices=["matrix", "simulate", "hybrid"], default="matrix")
    p.add_argument("--paths", type=int, default=10_000)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start")
    p.add_argument("--history-feature", action="append", help="regressor=feature, e.g. age=time_in_state")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("synth", help="generate a synthetic grid from a model")
    p.add_argument("--spec", required=True, help="JSON with model (path), n, seed, distributions")
    p.add_argument("--rows", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report-residuals", help="bucketed actual vs. model rates for one regressor")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--regressor", required=True)
    p.add_argument("--buckets", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report_residuals)

    p = sub.add_parser("validate", help="check a grid (and optionally a model) for consistency")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--model")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ItemError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (OSError, ValueError, KeyError) as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
