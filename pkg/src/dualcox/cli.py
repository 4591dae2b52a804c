"""Command-line interface.

Exit codes: 0 success, 1 numerical failure, 2 input error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .cox import CoxOptions, fit_weighted_cox
from .em import FitOptions, fit
from .errors import DataError, DualCoxError, NumericalError, SchemaError
from .metrics import roc_curves_csv, subgroup_auc
from .simulation import SimConfig, calibrate_censoring, generate_dataset, run_replications
from .survival import kaplan_meier, logrank_test, read_csv, write_csv

EXIT_OK, EXIT_NUMERICAL, EXIT_INPUT = 0, 1, 2

INIT_CHOICES = {"pi-prior": "pi_prior", "random": "uniform_random",
                "boundary": "boundary_bernoulli"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else f"{v:.10g}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else _fmt(c) for c in row])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_seed(seed):
    env = os.environ.get("DUALCOX_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise SchemaError(f"DUALCOX_SEED must be an integer, got {env!r}") from None
    return seed


def _write_manifest(path: Path, command: str, options: dict, inputs: dict, started: float):
    manifest = {
        "command": command,
        "options": options,
        "inputs": {name: {"path": str(p), "sha256": _digest(p)} for name, p in inputs.items()},
        "tool_version": __version__,
        "duration_seconds": round(time.perf_counter() - started, 3),
    }
    _write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fit_options(args) -> FitOptions:
    return FitOptions(
        init_method=INIT_CHOICES[args.init],
        restarts=args.restarts,
        seed=args.seed,
        abstol=args.abstol,
        reltol=args.reltol,
        max_em_iter=args.max_iter,
        convergence=args.convergence,
    )


def _options_dict(args) -> dict:
    skip = {"func", "command"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
            if k not in skip}


def _covariate_list(text):
    if text is None:
        return None
    names = [c.strip() for c in text.split(",") if c.strip()]
    if not names:
        raise SchemaError("--covariates is empty")
    return names


def _coef_rows(label, names, cfit):
    return [[label, name, cfit.beta[j], cfit.std_errors[j], cfit.hazard_ratios[j],
             cfit.wald_p[j]] for j, name in enumerate(names)]


def _report_text(ds, report, pooled, opts) -> str:
    m = report.model
    names = ds.covariate_names
    lines = [
        "[data]",
        f"n = {ds.n}",
        f"n_labeled = {ds.n_labeled}",
        f"n_unlabeled = {ds.n_unlabeled}",
        f"censoring_rate = {_fmt(ds.censoring_rate)}",
        f"tied_event_times = {str(ds.has_tied_event_times).lower()}",
        "",
        "[fit]",
        f"init_method = {opts.init_method}",
        f"restarts = {opts.restarts}",
        f"selected_restart = {report.restart}",
        f"failed_restarts = {report.failed_restarts}",
        f"seed = {opts.seed}",
        f"convergence_rule = {opts.convergence}",
        f"converged = {str(report.converged).lower()}",
        f"reason = {report.trace.reason}",
        f"em_iterations = {report.iterations}",
        f"observed_loglik = {_fmt(report.loglik)}",
        "",
        "[mixing]",
        f"pi1 = {_fmt(m.pi[0])}",
        f"pi2 = {_fmt(m.pi[1])}",
        f"control_response_rate = {_fmt(report.control_response_rate)}",
        f"experimental_response_rate = {_fmt(report.experimental_response_rate)}",
    ]
    for label, cfit in (("responders", report.component_fits[0]),
                        ("non_responders", report.component_fits[1]),
                        ("overall", pooled)):
        lines += ["", f"[{label}]", "covariate, beta, se, hr, p"]
        for j, name in enumerate(names):
            lines.append(", ".join([name, _fmt(cfit.beta[j]), _fmt(cfit.std_errors[j]),
                                    _fmt(cfit.hazard_ratios[j]), _fmt(cfit.wald_p[j])]))
    tail = report.trace.observed_loglik[-5:]
    start = report.iterations - len(tail) + 1
    lines += ["", "[loglik_trace_tail]"]
    lines += [f"{start + i} = {_fmt(v)}" for i, v in enumerate(tail)]
    return "\n".join(lines) + "\n"


def cmd_fit(args) -> int:
    started = time.perf_counter()
    args.seed = _resolve_seed(args.seed)
    ds = read_csv(args.data, _covariate_list(args.covariates))
    opts = _fit_options(args)
    report = fit(ds, opts)
    pooled = fit_weighted_cox(ds, None, CoxOptions())
    out = Path(args.out_dir)
    names = ds.covariate_names

    _write(out / "report.txt", _report_text(ds, report, pooled, opts))
    rows = (_coef_rows("responders", names, report.component_fits[0])
            + _coef_rows("non_responders", names, report.component_fits[1])
            + _coef_rows("overall", names, pooled))
    _write(out / "estimates.csv",
           _csv_text(["group", "covariate", "beta", "se", "hazard_ratio", "p_value"], rows))
    classes = report.all_classes
    u = report.memberships
    _write(out / "memberships.csv", _csv_text(
        ["id", "labeled", "u1", "u2", "class"],
        [[ds.ids[i], int(ds.labeled[i]), u[i, 0], u[i, 1], int(classes[i])]
         for i in range(ds.n)]))
    tr = report.trace
    _write(out / "trace.csv", _csv_text(
        ["iteration", "observed_loglik", "complete_loglik", "pi1", "max_abs_dbeta"],
        [[i + 1, tr.observed_loglik[i], tr.complete_loglik[i], tr.pi[i][0], tr.max_dbeta[i]]
         for i in range(tr.iterations)]))
    _write_manifest(out / "manifest.json", "fit", _options_dict(args),
                    {"data": args.data}, started)
    print(f"pi1={_fmt(report.model.pi[0])} iterations={report.iterations} "
          f"converged={str(report.converged).lower()} -> {out}")
    return EXIT_OK


def _load_config(name_or_path: str) -> SimConfig:
    path = Path(name_or_path)
    if path.exists():
        return SimConfig.from_file(path)
    name = name_or_path if name_or_path.endswith(".cfg") else f"{name_or_path}.cfg"
    bundled = resources.files("dualcox").joinpath("configs", name)
    if bundled.is_file():
        return SimConfig.from_text(bundled.read_text(encoding="utf-8"))
    raise SchemaError(f"config {name_or_path!r} is neither a file nor a bundled config")


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed)
    if seed is not None:
        cfg = SimConfig(**{**cfg.__dict__, "seed": seed})
    if args.n is not None:
        cfg = SimConfig(**{**cfg.__dict__, "n": args.n})
    if args.c is not None:
        cfg = SimConfig(**{**cfg.__dict__, "c": args.c})
    args.seed = cfg.seed
    opts = FitOptions(init_method=INIT_CHOICES[args.init], abstol=args.abstol,
                      reltol=args.reltol, max_em_iter=args.max_iter,
                      convergence=args.convergence, seed=cfg.seed)
    reps = args.reps if args.reps is not None else cfg.replications
    summary = run_replications(cfg, opts, reps, threads=args.threads)
    out = Path(args.out)
    _write(out, summary.to_csv())
    if args.replicates_out:
        _write(Path(args.replicates_out), _csv_text(
            ["replicate", "accuracy", "pi1", "censoring_rate", "iterations", "loglik",
             "swapped", *[f"beta{k}{j}" for k in (1, 2) for j in range(1, 5)], "error"],
            [[r.index, r.accuracy, r.pi1, r.censoring_rate, r.iterations, r.loglik,
              int(r.swapped), *(r.betas or [float("nan")] * 8), r.error]
             for r in summary.results]))
    opts_dict = _options_dict(args)
    opts_dict["resolved_config"] = cfg.to_text()
    inputs = {"config": args.config} if Path(args.config).exists() else {}
    _write_manifest(out.with_name(out.name + ".manifest.json"), "simulate", opts_dict,
                    inputs, started)
    print(f"accuracy={_fmt(summary.accuracy_mean)} failed={summary.n_failed} -> {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    started = time.perf_counter()
    cfg = _load_config(args.config)
    seed = _resolve_seed(args.seed)
    updates = {k: v for k, v in (("seed", seed), ("n", args.n), ("c", args.c)) if v is not None}
    cfg = SimConfig(**{**cfg.__dict__, **updates})
    sim = generate_dataset(cfg, args.replicate)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(sim.dataset, out)
    if args.truth_out:
        _write(Path(args.truth_out), _csv_text(
            ["id", "component"],
            [[sim.dataset.ids[i], int(sim.true_labels[i])] for i in range(cfg.n)]))
    _write_manifest(out.with_name(out.name + ".manifest.json"), "generate",
                    {**_options_dict(args), "resolved_config": cfg.to_text()}, {}, started)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config)
    c = calibrate_censoring(cfg, args.target, reps=args.reps)
    print(_fmt(c))
    return EXIT_OK


def _read_memberships(path, ds):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "id" not in reader.fieldnames or \
                "class" not in reader.fieldnames:
            raise SchemaError("memberships file needs 'id' and 'class' columns", line=1)
        classes = {}
        for row in reader:
            cls = row["class"].strip()
            if cls not in ("1", "2"):
                raise SchemaError(f"class must be 1 or 2, got {cls!r}", line=reader.line_num)
            classes[row["id"]] = int(cls)
    missing = [i for i in ds.ids if i not in classes]
    if missing:
        raise SchemaError(f"memberships file lacks id(s) {missing[:5]}")
    return np.array([classes[i] for i in ds.ids])


def cmd_roc(args) -> int:
    started = time.perf_counter()
    ds = read_csv(args.data, _covariate_list(args.covariates))
    inputs = {"data": args.data}
    if args.memberships:
        groups = _read_memberships(args.memberships, ds)
        inputs["memberships"] = args.memberships
    else:
        args.seed = _resolve_seed(args.seed)
        groups = fit(ds, _fit_options(args)).all_classes
    try:
        grid = [float(t) for t in args.times.split(",") if t.strip()]
    except ValueError:
        raise SchemaError(f"--times must be comma-separated numbers: {args.times!r}") from None
    if not grid:
        raise SchemaError("--times is empty")
    out = Path(args.out_dir)
    results = subgroup_auc(ds, groups, grid)
    auc_rows = []
    curve_text = []
    for name, (curves, omitted) in results.items():
        for t in omitted:
            print(f"warning: t={_fmt(t)} omitted for {name} (empty risk or survivor set)",
                  file=sys.stderr)
        for cur in curves:
            auc_rows.append([name, cur.t, cur.auc])
        text = roc_curves_csv(curves, group=name)
        curve_text.append(text if not curve_text else text.split("\n", 1)[1])
    _write(out / "roc_curves.csv", "".join(curve_text))
    _write(out / "auc.csv", _csv_text(["group", "t", "auc"], auc_rows))
    _write_manifest(out / "manifest.json", "roc", _options_dict(args), inputs, started)
    print(f"{len(auc_rows)} AUC values -> {out}")
    return EXIT_OK


def cmd_km(args) -> int:
    started = time.perf_counter()
    ds = read_csv(args.data, _covariate_list(args.covariates))
    col = args.group
    if col == "arm":
        keys = ds.labeled.astype(int)
        keep = np.ones(ds.n, dtype=bool)
    elif col == "response":
        keys = ds.response
        keep = ds.labeled.copy()
    elif col in ds.covariate_names:
        keys = ds.covariates[:, ds.covariate_names.index(col)]
        keep = np.ones(ds.n, dtype=bool)
    else:
        raise SchemaError(f"unknown group column {col!r}")
    levels = np.unique(keys[keep])
    rows = []
    curves = {}
    for lv in levels:
        m = keep & (keys == lv)
        km = kaplan_meier(ds.times[m], ds.statuses[m])
        curves[lv] = m
        label = _fmt(lv)
        rows.append([label, 0.0, 1.0])
        rows += [[label, t, s] for t, s in zip(km.knots, km.values)]
    out = Path(args.out)
    _write(out, _csv_text(["group", "t", "survival"], rows))
    summary = [f"group_column = {col}", f"groups = {', '.join(_fmt(v) for v in levels)}"]
    if levels.size == 2:
        a, b = (curves[lv] for lv in levels)
        stat, p = logrank_test(ds.times[a], ds.statuses[a], ds.times[b], ds.statuses[b])
        summary += [f"logrank_statistic = {_fmt(stat)}", f"logrank_p = {_fmt(p)}"]
        print(f"log-rank chi2={_fmt(stat)} p={_fmt(p)}")
    else:
        summary.append("logrank = not computed (needs exactly two groups)")
    _write(out.with_name(out.name + ".summary.txt"), "\n".join(summary) + "\n")
    _write_manifest(out.with_name(out.name + ".manifest.json"), "km", _options_dict(args),
                    {"data": args.data}, started)
    return EXIT_OK


def _add_fit_flags(p):
    p.add_argument("--abstol", type=float, default=1e-5)
    p.add_argument("--reltol", type=float, default=1e-7)
    p.add_argument("--max-iter", type=int, default=1000, dest="max_iter")
    p.add_argument("--init", choices=sorted(INIT_CHOICES), default="pi-prior")
    p.add_argument("--convergence", choices=["and", "or-compat"], default="and")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualcox",
        description="Semi-supervised two-component Cox mixture for clinical-trial data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the mixture to a trial CSV")
    p.add_argument("data")
    p.add_argument("--covariates", help="comma-separated covariate columns (default: all)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a replication study")
    p.add_argument("config", help="config file or bundled name (table2, table3, table4)")
    p.add_argument("--reps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--replicates-out")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--c", type=float)
    p.add_argument("--threads", type=int, default=1)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("generate", help="write one simulated trial as CSV")
    p.add_argument("config")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--c", type=float)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("calibrate", help="find c giving a target censoring rate")
    p.add_argument("config")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--reps", type=int, default=50)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("roc", help="time-dependent ROC/AUC per subgroup")
    p.add_argument("data")
    p.add_argument("--covariates")
    p.add_argument("--memberships", help="memberships.csv written by 'fit'")
    p.add_argument("--times", required=True, help="comma-separated evaluation times")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("km", help="Kaplan-Meier curves and log-rank test")
    p.add_argument("data")
    p.add_argument("--covariates")
    p.add_argument("--group", default="arm",
                   help="'arm', 'response' or a covariate column (default: arm)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_km)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (DataError, FileNotFoundError, IsADirectoryError, UnicodeDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, DualCoxError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
