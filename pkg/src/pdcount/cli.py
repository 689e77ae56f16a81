"""Command-line front end.

Subcommands: ``fit``, ``simulate``, ``study``, ``diagnose`` and
``reproduce``.  Every run writes ``manifest.json`` (arguments, versions and
seed) next to its outputs.  Exit codes: 0 success, 1 error, 3 outputs
written but a fit did not converge.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import platform
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from pdcount.core import CountSeries
from pdcount.diagnostics import estimate_factors, recommend, standardized_residuals
from pdcount.errors import (
    DataError,
    MissingColumnError,
    MissingValueError,
    NegativeCountError,
    NonIntegerCountError,
    PdcountError,
    TooFewRowsError,
)
from pdcount.estimators import fmm_fit, glm_fit, hmm_fit
from pdcount.inference import ddw_moment_se, white_covariance
from pdcount.simulation import SimConfig, export_series, simulate
from pdcount.study import StudyDesign, preset, run_study

__all__ = [
    "ingest_csv",
    "polio_series",
    "seizure_series",
    "cmd_fit",
    "cmd_simulate",
    "cmd_study",
    "cmd_diagnose",
    "cmd_reproduce",
    "build_parser",
    "main",
]

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED = 0, 1, 3
MODEL_FLAGS = {"glm": ("GLM",), "fmm2": ("FMM2",), "hmm2": ("HMM2",), "all": ("GLM", "FMM2", "HMM2")}
SE_FLAGS = {"white": ("white",), "ddw": ("ddw",), "both": ("white", "ddw")}
_NA = {"", "na", "nan", "null", "none"}

POLIO_SCHEMA = (
    "CSV with header and a column `y` of 168 monthly counts (Jan 1970 - Dec 1983); "
    "columns trend, cos12, sin12, cos6, sin6 are built when absent"
)
SEIZURE_SCHEMA = "CSV with header and a column `y` of 204 daily counts"
# HMM day coefficient the two trend codings are compared against
SEIZURE_TARGET_DAY = -0.933


# -- input -----------------------------------------------------------------------


def ingest_csv(path) -> CountSeries:
    """Read a CSV with a count column ``y`` and numeric covariate columns.

    An intercept column is prepended.  Rows are taken as time order.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TooFewRowsError(f"{path}: empty file") from None
        records = [row for row in reader if any(cell.strip() for cell in row)]
    if "y" not in header:
        raise MissingColumnError(f"{path}: no column named 'y' (columns: {', '.join(header)})")
    iy = header.index("y")
    others = [j for j in range(len(header)) if j != iy]
    y = np.empty(len(records), dtype=np.int64)
    X = np.ones((len(records), 1 + len(others)))
    for i, row in enumerate(records):
        where = f"{path}: row {i} (line {i + 2})"
        if len(row) != len(header):
            raise DataError(f"{where} has {len(row)} fields, header has {len(header)}")
        for j, cell in enumerate(row):
            if cell.strip().lower() in _NA:
                raise MissingValueError(f"{where}: missing value in column {header[j]!r}")
        try:
            v = float(row[iy])
        except ValueError:
            raise NonIntegerCountError(f"{where}: count {row[iy]!r} is not a number") from None
        if not math.isfinite(v):
            raise MissingValueError(f"{where}: count {row[iy]!r} is not finite")
        if v != math.floor(v):
            raise NonIntegerCountError(f"{where}: count {row[iy]!r} is not an integer")
        if v < 0:
            raise NegativeCountError(f"{where}: negative count {row[iy]!r}")
        y[i] = int(v)
        for k, j in enumerate(others, start=1):
            try:
                X[i, k] = float(row[j])
            except ValueError:
                raise DataError(f"{where}: column {header[j]!r} value {row[j]!r} is not numeric") from None
            if not math.isfinite(X[i, k]):
                raise MissingValueError(f"{where}: column {header[j]!r} is not finite")
    if len(records) < 2:
        raise TooFewRowsError(f"{path}: need at least 2 data rows, got {len(records)}")
    return CountSeries(y, X, ("intercept",) + tuple(header[j] for j in others))


def _require(path, schema) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset not found: expected {path} ({schema})")
    return path


def polio_series(path, trend_center: float = 73.0) -> CountSeries:
    """Polio counts with trend ``(t - trend_center) / 1000`` and two harmonic pairs.

    A file that already has covariate columns is used as is.
    """
    data = ingest_csv(_require(path, POLIO_SCHEMA))
    if data.d > 1:
        return data
    t = np.arange(1, data.n + 1, dtype=float)
    w = 2 * np.pi * t / 12
    X = np.column_stack([np.ones(data.n), (t - trend_center) / 1000, np.cos(w), np.sin(w), np.cos(2 * w),
                         np.sin(2 * w)])
    return CountSeries(data.y, X, ("intercept", "trend", "cos12", "sin12", "cos6", "sin6"))


def seizure_series(path, scale: str = "n") -> CountSeries:
    """Seizure counts with a day trend ``t / n`` (``scale="n"``) or ``t / 1000``."""
    data = ingest_csv(_require(path, SEIZURE_SCHEMA))
    if data.d > 1:
        return data
    t = np.arange(1, data.n + 1, dtype=float)
    div = {"n": float(data.n), "1000": 1000.0}[scale]
    return CountSeries(data.y, np.column_stack([np.ones(data.n), t / div]), ("intercept", "day"))


# -- output helpers --------------------------------------------------------------


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _manifest(out: Path, args, outputs, extra=None):
    echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {"command": args.command, "arguments": echo, "seed": getattr(args, "seed", None),
           "versions": _versions(), "outputs": sorted(outputs)}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2))


def _table(rows, header) -> str:
    cells = [header] + [[c if isinstance(c, str) else ("" if c is None else f"{c:.3f}") for c in r] for r in rows]
    widths = [max(len(r[j]) for r in cells) for j in range(len(header))]
    lines = ["  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _fit_and_se(data, models, se_methods, ell, seed, starts=10):
    fits, ses = {}, {}
    for m in models:
        if m == "GLM":
            f = glm_fit(data)
        elif m == "FMM2":
            f = fmm_fit(data, starts=starts, seed=seed, glm=fits.get("GLM"))
        else:
            f = hmm_fit(data, starts=starts, seed=seed, glm=fits.get("GLM"), fmm=fits.get("FMM2"))
        fits[m] = f
        ses[m] = {}
        for s in se_methods:
            if s == "ddw" and m != "GLM":
                continue
            ses[m][s] = white_covariance(f, data, ell) if s == "white" else ddw_moment_se(f, data)
    return fits, ses


def _coef_rows(data, fits, ses):
    rows = []
    for m, f in fits.items():
        for k, lab in enumerate(data.labels):
            w = ses[m].get("white")
            d = ses[m].get("ddw")
            rows.append([f"{m} {lab}", float(f.beta[k]), None if w is None else float(w.se[k]),
                         None if d is None else float(d.se[k])])
    return rows


def _write_fit(out: Path, data, fits, ses) -> list[str]:
    (out / "fit.json").write_text(json.dumps({m: f.to_dict() for m, f in fits.items()}, indent=2))
    se_doc = {m: {s: c.to_dict(data.labels) for s, c in d.items()} for m, d in ses.items()}
    (out / "se.json").write_text(json.dumps(se_doc, indent=2))
    text = _table(_coef_rows(data, fits, ses), ["coefficient", "estimate", "se_white", "se_ddw"])
    (out / "fit.txt").write_text(text)
    sys.stdout.write(text)
    return ["fit.json", "se.json", "fit.txt"]


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -----------------------------------------------------------------


def cmd_fit(args) -> int:
    data = ingest_csv(args.input)
    out = _out(args)
    fits, ses = _fit_and_se(data, MODEL_FLAGS[args.model], SE_FLAGS[args.se], args.ell, args.seed, args.starts)
    outputs = _write_fit(out, data, fits, ses)
    _manifest(out, args, outputs)
    return EXIT_OK if all(f.converged for f in fits.values()) else EXIT_NOT_CONVERGED


def _design_from_args(args) -> StudyDesign:
    if args.preset:
        return preset(args.preset, R=args.reps, n=args.n, seed=args.seed)
    if not args.config:
        raise DataError("give --preset NAME or --config FILE")
    doc = json.loads(Path(args.config).read_text())
    if "config" not in doc:
        doc = {"name": Path(args.config).stem, "config": doc}
    doc.setdefault("R", args.reps)
    doc.setdefault("seed", args.seed)
    return StudyDesign.from_dict(doc)


def cmd_simulate(args) -> int:
    out = _out(args)
    config: SimConfig = _design_from_args(args).config
    data, alpha = simulate(config, args.replicate)
    csv_path, side = export_series(data, config, out / "series.csv", alpha)
    _manifest(out, args, [csv_path.name, side.name], {"replicate": args.replicate})
    return EXIT_OK


def cmd_study(args) -> int:
    design = _design_from_args(args)
    out = _out(args)
    summary = run_study(design, out, n_jobs=args.jobs)
    _manifest(out, args, ["design.json", "replicates.csv", "summary.json", "ratios.csv"])
    _print_summary(summary)
    return EXIT_OK


def _print_summary(summary):
    rows = []
    for m, coefs in summary.estimators.items():
        for lab, e in coefs.items():
            rows.append([f"{m} {lab}", e["bias"], e["ssd"], e.get("se_white"), e.get("se_ddw"),
                         summary.convergence[m]])
    sys.stdout.write(_table(rows, ["estimator", "bias", "ssd", "se_white", "se_ddw", "converged"]))


def cmd_diagnose(args) -> int:
    data = ingest_csv(args.input)
    out = _out(args)
    rec = _diagnose(data, args.seed)
    (out / "diagnose.json").write_text(rec.to_json())
    sys.stdout.write(f"{rec.estimator}: {rec.rule}\n")
    _manifest(out, args, ["diagnose.json"])
    return EXIT_OK


def _diagnose(data, seed):
    g = glm_fit(data)
    prof = estimate_factors(standardized_residuals(g, data), g, data, seed=seed)
    return recommend(prof, data.d - 1)


TABLE2_ROWS = (
    ("se-table2-hmm-binary", "Poisson 2-state HMM", "Binary"),
    ("se-table2-hmm-trend", "Poisson 2-state HMM", "Trend"),
    ("se-table2-glmm-binary", "Poisson GLMM", "Binary"),
    ("se-table2-glmm-trend", "Poisson GLMM", "Trend"),
)
FIGURES = {
    "fig2": ("study1-low", "study1-medium", "study1-high"),
    "fig3": ("study2-hmm4-low", "study2-hmm4-medium", "study2-hmm4-high"),
    "fig4": ("study2-glmm-low", "study2-glmm-medium", "study2-glmm-high"),
}


def _run_preset(name, args, out):
    design = preset(name, R=args.reps, n=args.n, seed=args.seed)
    return run_study(design, out / name, n_jobs=args.jobs)


def _reproduce_table2(args, out):
    rows = []
    for name, truth, cov in TABLE2_ROWS:
        s = _run_preset(name, args, out)
        slope = [lab for lab in s.truth if lab != "intercept"][0]
        h, g = s.estimators["HMM2"][slope], s.estimators["GLM"][slope]
        rows.append([f"{truth} / {cov}", h["ssd"], h["se_white"], g["ssd"], g["se_ddw"], g["se_white"]])
    header = ["true model / covariate", "HMM ssd", "HMM se_white", "GLM ssd", "GLM se_ddw", "GLM se_white"]
    text = _table(rows, header)
    (out / "table2.txt").write_text(text)
    with open(out / "table2.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[r[0]] + [repr(float(v)) for v in r[1:]] for r in rows])
    sys.stdout.write(text)
    return ["table2.txt", "table2.csv"] + [r[0] for r in TABLE2_ROWS]


def _reproduce_figure(which, args, out):
    lines = []
    for name in FIGURES[which]:
        _run_preset(name, args, out)
        body = (out / name / "ratios.csv").read_text().splitlines()
        lines += body if not lines else body[1:]
    (out / "ratios.csv").write_text("\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")
    return ["ratios.csv"] + list(FIGURES[which])


def _reproduce_polio(args, out):
    data = polio_series(args.data or "data/polio.csv")
    fits, ses = _fit_and_se(data, ("GLM",), ("white", "ddw"), args.ell, args.seed)
    outputs = _write_fit(out, data, fits, ses)
    rec = _diagnose(data, args.seed)
    (out / "diagnose.json").write_text(rec.to_json())
    return outputs + ["diagnose.json"], all(f.converged for f in fits.values())


def _reproduce_seizure(args, out):
    converged = True
    outputs, rows = [], []
    for scale in ("n", "1000"):
        data = seizure_series(args.data or "data/seizure.csv", scale)
        fits, ses = _fit_and_se(data, ("GLM", "FMM2", "HMM2"), ("white", "ddw"), args.ell, args.seed)
        fits.pop("FMM2")
        ses.pop("FMM2")
        sub = out / f"trend_t_over_{scale}"
        sub.mkdir(exist_ok=True)
        outputs += [f"{sub.name}/{o}" for o in _write_fit(sub, data, fits, ses)]
        converged &= all(f.converged for f in fits.values())
        h = fits["HMM2"]
        rows.append({"trend_coding": f"t/{scale}", "hmm_day": float(h.beta[1]),
                     "distance_to_target": abs(float(h.beta[1]) - SEIZURE_TARGET_DAY)})
    best = min(rows, key=lambda r: r["distance_to_target"])
    (out / "coding.json").write_text(json.dumps({"codings": rows, "closest": best["trend_coding"]}, indent=2))
    return outputs + ["coding.json"], converged


def cmd_reproduce(args) -> int:
    out = _out(args)
    converged = True
    if args.target == "table2":
        outputs = _reproduce_table2(args, out)
    elif args.target in FIGURES:
        outputs = _reproduce_figure(args.target, args, out)
    elif args.target == "polio":
        outputs, converged = _reproduce_polio(args, out)
    else:
        outputs, converged = _reproduce_seizure(args, out)
    _manifest(out, args, outputs)
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdcount", description="Count time-series regression under latent processes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, default=20240901)

    sp = sub.add_parser("fit", help="fit models to a CSV and compute standard errors")
    sp.add_argument("input")
    sp.add_argument("--model", choices=sorted(MODEL_FLAGS), default="glm")
    sp.add_argument("--se", choices=sorted(SE_FLAGS), default="white")
    sp.add_argument("--ell", type=int, default=1)
    sp.add_argument("--starts", type=int, default=10)
    common(sp, "fit-out")
    sp.set_defaults(func=cmd_fit)

    def design_args(sp):
        sp.add_argument("--preset")
        sp.add_argument("--config", help="JSON study design or simulation config")
        sp.add_argument("--reps", type=int, default=500)
        sp.add_argument("--n", type=int, default=1000)

    sp = sub.add_parser("simulate", help="simulate one series from a preset or config")
    design_args(sp)
    sp.add_argument("--replicate", type=int, default=0)
    common(sp, "sim-out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("study", help="run a Monte Carlo study")
    design_args(sp)
    sp.add_argument("--jobs", type=int, default=1)
    common(sp, "study-out")
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("diagnose", help="estimate OD/AC1/SP and recommend an estimator")
    sp.add_argument("input")
    common(sp, "diagnose-out")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("reproduce", help="regenerate a table, figure or application")
    sp.add_argument("target", choices=["table2", "fig2", "fig3", "fig4", "polio", "seizure"])
    sp.add_argument("--data", help="dataset CSV for polio/seizure")
    sp.add_argument("--reps", type=int, default=500)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--ell", type=int, default=1)
    sp.add_argument("--jobs", type=int, default=1)
    common(sp, "reproduce-out")
    sp.set_defaults(func=cmd_reproduce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PdcountError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
