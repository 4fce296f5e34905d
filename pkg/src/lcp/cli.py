"""Command line front end: ``lcp simulate | predict | tune``.

Settings come from, in decreasing precedence: command line flags, the
``--config`` file, the ``LCP_SEED`` environment variable (seed only), and
built-in defaults.

Exit codes: 0 success, 2 usage error, 3 data or I/O error, 4 infeasible
(no eligible bandwidth, or no feasible level for any test row).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import math
import os
import sys
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .calibration import CalibrationModel, LocalizedProblem, NoFeasibleLevel, default_alpha_grid, search_alpha
from .intervals import AbsResidual, invert_abs_residual
from .learners import get_learner
from .localizers import KINDS, LocalizerSpec, select_projection_axis
from .simbench import DEFAULT_H_GRIDS, GENERATORS, ExperimentConfig, cv_scores, run_coverage_experiment
from .tuning import TuningError, fmt, tune_bandwidth

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 2, 3, 4
SEED_ENV = "LCP_SEED"


class DataError(Exception):
    """Bad input data; the message names the file, line and column."""


class UsageError(Exception):
    pass


# -- option tables ------------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def _names(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


@dataclass(frozen=True)
class Opt:
    name: str
    type: Callable = str
    default: object = None
    help: str = ""
    choices: tuple | None = None


COMMON = [
    Opt("seed", int, 0, f"random seed (default from ${SEED_ENV}, else 0)"),
]

SIMULATE = COMMON + [
    Opt("gen", str, None, "generator id", GENERATORS),
    Opt("n", int, 500, "calibration size"),
    Opt("reps", int, 1000, "Monte Carlo repetitions"),
    Opt("alpha", _floats, [0.95], "comma-separated target levels"),
    Opt("method", _names, ["cb"], "comma-separated methods, e.g. cb,lcb-box:1,lcb-knn:auto"),
    Opt("grid-size", int, 200, "alpha_tilde grid size"),
    Opt("gen-alpha", float, 0.8, "alpha parameter of counterexample2"),
    Opt("p", int, 3, "dimension for the highdim generators"),
    Opt("jobs", int, 1, "parallel workers"),
    Opt("out", str, "-", "output CSV ('-' for stdout)"),
]

PREDICT = COMMON + [
    Opt("calib", str, None, "calibration CSV"),
    Opt("test", str, None, "test CSV"),
    Opt("alpha", float, 0.9, "target level"),
    Opt("localizer", str, "constant", "kind[:h][@axis], or auto[:kind] (needs --tune-data)"),
    Opt("features", _names, None, "feature columns (default: every other column)"),
    Opt("score-col", str, None, "precomputed score column"),
    Opt("y-col", str, None, "response column (scores are |y - predictor(x)|)"),
    Opt("predictor", str, None, "constant:<c>, feature:<name> or linear:<b0>,<b1>,..."),
    Opt("weight-col", str, None, "importance weight column (covariate shift)"),
    Opt("tune-data", str, None, "independent tuning CSV for --localizer auto"),
    Opt("grid-size", int, 200, "alpha_tilde grid size"),
    Opt("out", str, "-", "output CSV ('-' for stdout)"),
]

TUNE = COMMON + [
    Opt("data", str, None, "tuning CSV"),
    Opt("alpha", float, 0.9, "target level"),
    Opt("kind", str, "distance_box", "localizer kind"),
    Opt("h-grid", _floats, None, "comma-separated ascending bandwidths"),
    Opt("axis", str, None, "feature column index, or 'mi' to pick by mutual information"),
    Opt("omega", float, 0.9, "screening level"),
    Opt("B", int, 20, "bootstrap replicates"),
    Opt("features", _names, None, "feature columns (default: every other column)"),
    Opt("score-col", str, None, "precomputed score column"),
    Opt("y-col", str, None, "response column"),
    Opt("predictor", str, None, "fixed predictor for scores from --y-col"),
    Opt("learner", str, None, "learner for cross-validated scores (zero, mean, ls, ridge[:lam])"),
    Opt("folds", int, 5, "cross-validation folds"),
    Opt("out", str, "-", "report CSV ('-' for stdout)"),
]

COMMANDS = {"simulate": SIMULATE, "predict": PREDICT, "tune": TUNE}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcp", description="Localized conformal prediction intervals.",
        epilog="Precedence: flags > --config file > $LCP_SEED (seed) > defaults.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI-style key = value file; keys mirror the flags")
        for o in opts:
            p.add_argument(f"--{o.name}", dest=o.name.replace("-", "_"), type=o.type,
                           default=None, choices=o.choices,
                           help=o.help + ("" if o.default is None else f" (default {o.default})"))
    return parser


def read_config(path: str, command: str) -> dict[str, str]:
    """Flat key/value pairs. A section header is optional; ``[<command>]`` overrides others."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = lambda s: s.strip().replace("_", "-")
    try:
        cp.read_string("[__top__]\n" + text, source=path)
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    out: dict[str, str] = {}
    sections = [s for s in cp.sections() if s != command] + ([command] if cp.has_section(command) else [])
    for s in sections:
        if s in COMMANDS and s != command:
            continue
        out.update(cp[s])
    return out


def resolve(command: str, args: argparse.Namespace, environ=None) -> dict:
    """Merge flags, config file, environment and defaults into one settings dict."""
    environ = os.environ if environ is None else environ
    opts = COMMANDS[command]
    cfg = read_config(args.config, command) if args.config else {}
    known = {o.name for o in opts}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    out = {}
    for o in opts:
        key = o.name.replace("-", "_")
        val = getattr(args, key)
        if val is None and o.name in cfg:
            try:
                val = o.type(cfg[o.name])
            except ValueError:
                raise UsageError(f"config key {o.name}: invalid value {cfg[o.name]!r}") from None
            if o.choices and val not in o.choices:
                raise UsageError(f"config key {o.name}: {val!r} not one of {o.choices}")
        if val is None and o.name == "seed" and environ.get(SEED_ENV):
            try:
                val = int(environ[SEED_ENV])
            except ValueError:
                raise UsageError(f"${SEED_ENV} must be an integer") from None
        out[key] = o.default if val is None else val
    return out


# -- CSV input/output ---------------------------------------------------------------

@dataclass
class Table:
    path: str
    header: list[str]
    rows: list[list[str]]

    def column(self, name: str) -> np.ndarray:
        if name not in self.header:
            raise DataError(f"{self.path}: missing column {name!r} (have {', '.join(self.header)})")
        j = self.header.index(name)
        out = np.empty(len(self.rows))
        for i, row in enumerate(self.rows):
            try:
                out[i] = float(row[j])
            except ValueError:
                raise DataError(f"{self.path}: line {i + 2}, column {name!r}: "
                                f"non-numeric value {row[j]!r}") from None
        return out

    def matrix(self, names: list[str]) -> np.ndarray:
        M = np.column_stack([self.column(c) for c in names]) if names else np.empty((len(self.rows), 0))
        bad = ~np.isfinite(M)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise DataError(f"{self.path}: line {i + 2}, column {names[j]!r}: feature must be finite")
        return M


def read_table(path: str) -> Table:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if not rows or not any(c.strip() for c in rows[0]):
        raise DataError(f"{path}: empty file or missing header row")
    header = [c.strip() for c in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    body = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: line {i}: expected {len(header)} fields, got {len(row)}")
        body.append([c.strip() for c in row])
    if not body:
        raise DataError(f"{path}: no data rows")
    return Table(path, header, body)


def write_output(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def parse_predictor(spec: str, features: list[str]) -> Callable[[np.ndarray], np.ndarray]:
    """``constant:<c>``, ``feature:<name>`` or ``linear:<b0>,<b1>,...`` over `features`."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "constant":
            c = float(arg)
            return lambda X: np.full(X.shape[0], c)
        if kind == "feature":
            if arg not in features:
                raise UsageError(f"predictor feature {arg!r} is not a feature column")
            j = features.index(arg)
            return lambda X: X[:, j]
        if kind == "linear":
            b = _floats(arg)
            if len(b) != len(features) + 1:
                raise UsageError(f"linear predictor needs {len(features) + 1} coefficients "
                                 f"(intercept, then {', '.join(features)}), got {len(b)}")
            return lambda X: b[0] + X @ np.asarray(b[1:])
    except ValueError:
        raise UsageError(f"invalid predictor {spec!r}") from None
    raise UsageError(f"unknown predictor {spec!r}; use constant:<c>, feature:<name> or linear:...")


def _feature_names(table: Table, s: dict) -> list[str]:
    if s["features"]:
        return s["features"]
    skip = {s.get("score_col"), s.get("y_col"), s.get("weight_col")}
    names = [c for c in table.header if c not in skip]
    if not names:
        raise DataError(f"{table.path}: no feature columns")
    return names


def _scores(table: Table, features: list[str], X: np.ndarray, s: dict, mu) -> np.ndarray:
    if s["score_col"]:
        V = table.column(s["score_col"])
    elif s["y_col"]:
        if mu is None:
            raise UsageError("--y-col needs --predictor")
        V = np.abs(table.column(s["y_col"]) - mu(X))
    else:
        raise UsageError("give --score-col, or --y-col with --predictor")
    bad = np.flatnonzero(np.isnan(V) | (V < 0))
    if bad.size:
        raise DataError(f"{table.path}: line {bad[0] + 2}: score must be nonnegative, got {V[bad[0]]!r}")
    return V


def _weights(table: Table, col: str) -> np.ndarray:
    w = table.column(col)
    bad = np.flatnonzero(~np.isfinite(w) | (w <= 0))
    if bad.size:
        raise DataError(f"{table.path}: line {bad[0] + 2}, column {col!r}: "
                        f"weight must be positive and finite, got {w[bad[0]]!r}")
    return w


# -- subcommands --------------------------------------------------------------

def cmd_simulate(s: dict) -> int:
    if s["gen"] is None:
        raise UsageError("simulate needs --gen")
    try:
        cfg = ExperimentConfig(s["gen"], s["n"], s["reps"], tuple(s["alpha"]), tuple(s["method"]),
                               s["seed"], {"alpha": s["gen_alpha"], "p": s["p"]},
                               s["grid_size"], s["jobs"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    table = run_coverage_experiment(cfg)
    write_output(s["out"], table.to_csv())
    return EXIT_OK


PREDICT_COLUMNS = ("row", "alpha_tilde", "q", "lo", "hi", "is_infinite", "feasible")


def _auto_localizer(text: str, s: dict, features: list[str]) -> LocalizerSpec:
    kind = text.partition(":")[2] or "distance_box"
    if not s["tune_data"]:
        raise UsageError("--localizer auto needs an independent --tune-data file")
    t = read_table(s["tune_data"])
    X0 = t.matrix(features)
    mu = parse_predictor(s["predictor"], features) if s["predictor"] else None
    V0 = _scores(t, features, X0, s, mu)
    kind = LocalizerSpec(kind, 1.0).kind
    grid = [h for h in DEFAULT_H_GRIDS.get(kind, ()) if kind != "knn" or h <= len(V0)]
    if not grid:
        raise UsageError(f"no default bandwidth grid for {kind}")
    rep = tune_bandwidth(X0, V0, grid, s["alpha"], kind, rng=s["seed"])
    return LocalizerSpec(kind, rep.selected_h)


def cmd_predict(s: dict) -> int:
    if not s["calib"] or not s["test"]:
        raise UsageError("predict needs --calib and --test")
    cal = read_table(s["calib"])
    test = read_table(s["test"])
    features = _feature_names(cal, s)
    X = cal.matrix(features)
    Xt = test.matrix(features)
    mu = parse_predictor(s["predictor"], features) if s["predictor"] else None
    V = _scores(cal, features, X, s, mu)
    w_cal = w_test = None
    if s["weight_col"]:
        w_cal, w_test = _weights(cal, s["weight_col"]), _weights(test, s["weight_col"])
    loc_text = s["localizer"]
    try:
        if loc_text.split(":")[0] == "auto":
            loc = _auto_localizer(loc_text, s, features)
        else:
            loc = LocalizerSpec.parse(loc_text)
    except ValueError as exc:
        raise UsageError(f"--localizer: {exc}") from None
    if loc.kind == "shift_knn" and w_cal is None:
        raise UsageError("shift_knn localizer needs --weight-col")
    try:
        model = CalibrationModel(X, V, loc, s["alpha"], default_alpha_grid(s["alpha"], s["grid_size"]),
                                 w_cal)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    score = AbsResidual(mu) if mu is not None else None
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(PREDICT_COLUMNS)
    feasible_rows = 0
    for i, x in enumerate(Xt):
        w_new = None if w_test is None else w_test[i]
        try:
            at, q = search_alpha(LocalizedProblem(model, x, w_new))
        except NoFeasibleLevel:
            out.writerow([i + 1, "nan", "nan", "nan", "nan", "false", "false"])
            continue
        except ValueError as exc:
            raise DataError(f"{test.path}: line {i + 2}: {exc}") from None
        feasible_rows += 1
        if score is not None:
            iv = invert_abs_residual(score, x, q, at)
            lo, hi = iv.lo, iv.hi
        else:
            lo = hi = math.nan
        out.writerow([i + 1, fmt(at), fmt(q), fmt(lo), fmt(hi),
                      str(math.isinf(q)).lower(), "true"])
    write_output(s["out"], buf.getvalue())
    if feasible_rows == 0:
        print("no feasible level for any test row", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_tune(s: dict) -> int:
    if not s["data"]:
        raise UsageError("tune needs --data")
    t = read_table(s["data"])
    features = _feature_names(t, s)
    X0 = t.matrix(features)
    try:
        kind = LocalizerSpec(s["kind"], 1.0).kind
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if kind in ("constant", "shift_knn"):
        raise UsageError(f"cannot tune the {kind} localizer; choose one of "
                         f"{', '.join(k for k in KINDS if k not in ('constant', 'shift_knn'))}")
    rng = np.random.default_rng(s["seed"])
    if s["learner"]:
        if not s["y_col"]:
            raise UsageError("--learner needs --y-col")
        try:
            learner = get_learner(s["learner"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        try:
            V0 = cv_scores(X0, t.column(s["y_col"]), s["folds"], learner, rng)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        except RuntimeError as exc:
            raise DataError(str(exc)) from None
    else:
        mu = parse_predictor(s["predictor"], features) if s["predictor"] else None
        V0 = _scores(t, features, X0, s, mu)
    axis = s["axis"]
    if axis == "mi":
        try:
            axis = select_projection_axis(X0, V0)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    elif axis is not None:
        try:
            axis = int(axis)
        except ValueError:
            raise UsageError(f"--axis must be an integer or 'mi', got {axis!r}") from None
    grid = s["h_grid"]
    if grid is None:
        grid = [h for h in DEFAULT_H_GRIDS[kind] if kind != "knn" or h <= len(V0)]
    try:
        report = tune_bandwidth(X0, V0, grid, s["alpha"], kind, s["omega"], s["B"], rng, axis)
    except TuningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_output(s["out"], report.to_csv())
    axis_txt = "" if axis is None else f" axis={axis}"
    print(f"kind={report.kind} alpha={fmt(report.alpha)} omega={fmt(report.omega)} "
          f"B={report.B} core_size={report.core_size}{axis_txt}")
    print(f"h*={fmt(report.selected_h)}")
    return EXIT_OK


HANDLERS = {"simulate": cmd_simulate, "predict": cmd_predict, "tune": cmd_tune}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve(args.command, args)
        return HANDLERS[args.command](settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lcp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"lcp {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
