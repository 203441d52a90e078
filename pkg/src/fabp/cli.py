"""Command-line front end: ``fabp <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 rank-deficient design, 4 fatal
model-fit failure.  Numbers are written with 17 significant digits so the
CSV output round-trips exactly.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import warnings

import numpy as np

from .exceptions import FabDomainError, FabError, FitError, RankError
from .fabcore import alt_cdf, alt_pdf, fab_p_normal, fab_p_symmetric
from .glm import fit_logistic
from .pipelines import FallbackWarning, Mode, fab_asymptotic, fab_lm_partial, fab_means_t
from .simulate import HMM_METHODS, run_glm_study, run_hmm_study, summarize_hmm

EXIT_INPUT = 2
EXIT_RANK = 3
EXIT_FIT = 4


class InputError(Exception):
    """Bad command-line input or malformed data file."""


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _float(text, where):
    try:
        return float(text)
    except ValueError:
        raise InputError(f"{where}: {text!r} is not a number") from None


def read_table(path):
    """Header plus rows of a CSV file; blank lines are skipped."""
    if not os.path.isfile(path):
        raise InputError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: file is empty") from None
        rows = [(reader.line_num, [c.strip() for c in row]) for row in reader if any(c.strip() for c in row)]
    if not rows:
        raise InputError(f"{path}: no data rows")
    for line, row in rows:
        if len(row) != len(header):
            raise InputError(f"{path} line {line}: expected {len(header)} fields, got {len(row)}")
    return header, rows


def read_matrix(path):
    header, rows = read_table(path)
    M = np.array([[_float(c, f"{path} line {line}") for c in row] for line, row in rows])
    return header, M


def read_null(args, count):
    if args.null_file:
        _, M = read_matrix(args.null_file)
        vals = M[:, -1]
        if vals.shape[0] != count:
            raise InputError(f"{args.null_file}: expected {count} null values, got {vals.shape[0]}")
        return vals
    return np.full(count, args.null)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    if path in (None, "-"):
        sys.stdout.write(buf.getvalue())
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(buf.getvalue())


def _check_output(path):
    if path not in (None, "-"):
        d = os.path.dirname(os.path.abspath(path))
        if not os.path.isdir(d):
            raise InputError(f"output directory {d} does not exist")


def _mode(text):
    try:
        return Mode.parse(text)
    except (FabDomainError, ValueError) as exc:
        raise InputError(f"bad --mode {text!r}: {exc}") from None


# subcommands -------------------------------------------------------------

def cmd_means(args):
    header, rows = read_table(args.input)
    need = ["group_id", "ybar", "sd", "n"]
    if [h.lower() for h in header[:4]] != need:
        raise InputError(f"{args.input}: header must start with {','.join(need)}")
    ids, ybar, sd, n, covs = [], [], [], [], []
    for line, row in rows:
        where = f"{args.input} line {line}"
        ids.append(row[0])
        ybar.append(_float(row[1], where))
        s = _float(row[2], where)
        if not s > 0:
            raise InputError(f"{where}: sd must be positive")
        sd.append(s)
        k = _float(row[3], where)
        if k != int(k) or k < 1:
            raise InputError(f"{where}: n must be a positive integer")
        n.append(k)
        covs.append([_float(c, where) for c in row[4:]])
    ybar, sd, n = np.array(ybar), np.array(sd), np.array(n)
    p = len(ids)
    linking = args.linking or ("regression" if header[4:] else "exchangeable")
    if linking not in ("exchangeable", "regression"):
        raise InputError(f"means supports exchangeable or regression linking, not {linking}")
    X = None
    if linking == "regression":
        if not header[4:]:
            raise InputError("regression linking needs covariate columns")
        X = np.column_stack([np.ones(p), np.array(covs)])
    null = read_null(args, p)
    results = fab_means_t(ybar, sd ** 2, n, X, null, _mode(args.mode))
    write_csv(args.output, ["group_id", "t", "df", "b_shift", "p_fab", "p_umpu", "flag"],
              [[ids[r.j], r.stat, r.df, r.shift, r.p_fab, r.p_umpu, r.flag] for r in results])


def _design(args):
    names, X = read_matrix(args.input)
    if not args.response:
        raise InputError("--response is required")
    _, Y = read_matrix(args.response)
    if Y.shape[1] != 1:
        raise InputError(f"{args.response}: expected a single response column")
    if Y.shape[0] != X.shape[0]:
        raise InputError("design and response have different numbers of rows")
    nuis = [c.strip() for c in args.nuisance_cols.split(",")] if args.nuisance_cols else []
    missing = [c for c in nuis if c not in names]
    if missing:
        raise InputError(f"unknown nuisance columns: {', '.join(missing)}")
    widx = [names.index(c) for c in nuis]
    tidx = [k for k in range(len(names)) if k not in widx]
    if len(tidx) < 2:
        raise InputError("need at least two target columns")
    return names, X, Y[:, 0], widx, tidx


def _rank_names(exc, names, order):
    cols = [names[order[c]] for c in exc.columns if c < len(order)]
    return f"{exc} (dependent columns: {', '.join(cols)})" if cols else str(exc)


def cmd_lm(args):
    names, X, y, widx, tidx = _design(args)
    family = args.family or "gaussian"
    if family == "binomial":
        return _glm(args, names, X, y, widx, tidx)
    linking = args.linking or "exchangeable"
    if linking not in ("exchangeable", "car"):
        raise InputError(f"lm supports exchangeable or car linking, not {linking}")
    order = widx + tidx
    try:
        W = X[:, widx] if widx else None
        if args.null_file or args.null:
            null = read_null(args, len(tidx))
            y = y - X[:, tidx] @ null
        else:
            null = np.zeros(len(tidx))
        res = fab_lm_partial(W, X[:, tidx], y, linking, _mode(args.mode), names=[names[k] for k in tidx])
    except RankError as exc:
        raise RankError(_rank_names(exc, names, order), exc.columns) from None
    write_csv(args.output, ["name", "estimate", "stat", "df_or_inf", "b_shift", "p_fab", "p_wald_or_umpu", "flag"],
              [[r.name, r.estimate + null[r.j], r.stat, r.df, r.shift, r.p_fab, r.p_umpu, r.flag] for r in res])


def _glm(args, names, X, y, widx, tidx):
    linking = args.linking or "spikeslab"
    if linking not in ("spikeslab", "exchangeable"):
        raise InputError(f"glm supports spikeslab or exchangeable linking, not {linking}")
    order = widx + tidx
    try:
        fit = fit_logistic(X[:, order], y)
    except RankError as exc:
        raise RankError(_rank_names(exc, names, order), exc.columns) from None
    t = slice(len(widx), None)
    null = read_null(args, len(tidx)) if (args.null_file or args.null) else np.zeros(len(tidx))
    res = fab_asymptotic(fit.theta_hat[t] - null, fit.Sigma_hat[t, t], fit.n, linking, _mode(args.mode),
                         names=[names[k] for k in tidx])
    write_csv(args.output, ["name", "estimate", "stat", "df_or_inf", "b_shift", "p_fab", "p_wald_or_umpu", "flag"],
              [[r.name, r.estimate + null[r.j], r.stat, math.inf, r.shift, r.p_fab, r.p_umpu, r.flag] for r in res])


def cmd_glm(args):
    args.family = "binomial"
    names, X, y, widx, tidx = _design(args)
    _glm(args, names, X, y, widx, tidx)


def cmd_simulate_hmm(args):
    methods = tuple(m.strip() for m in args.methods.split(","))
    bad = [m for m in methods if m not in HMM_METHODS]
    if bad:
        raise InputError(f"unknown methods: {', '.join(bad)}")
    if not 0 < args.q < 1:
        raise InputError("--q must lie in (0, 1)")
    rows = run_hmm_study(datasets=args.datasets, p=args.p, q=args.q, seed=args.seed, methods=methods,
                         threads=args.threads)
    out = [[r.dataset, r.method, r.n_null, r.discoveries, r.fdp, r.tpp] for r in rows]
    for m, s in summarize_hmm(rows).items():
        out.append(["mean", m, s["n_null"], s["discoveries"], s["fdp"], s["tpp"]])
    write_csv(args.output, ["dataset", "method", "n_null", "discoveries", "fdp", "tpp"], out)


def cmd_simulate_glm(args):
    try:
        ns = tuple(int(x) for x in args.ns.split(","))
    except ValueError:
        raise InputError(f"bad --ns {args.ns!r}") from None
    if not 0 < args.alpha < 1:
        raise InputError("--alpha must lie in (0, 1)")
    rows = run_glm_study(ns=ns, reps=args.reps, p=args.p, n_signal=args.signals, alpha=args.alpha,
                         seed=args.seed, mode=str(_mode(args.mode)), threads=args.threads)
    write_csv(args.output, ["n", "method", "null_frac", "nonnull_frac", "reps", "skipped"],
              [[r.n, r.method, r.null_frac, r.nonnull_frac, r.reps, r.skipped] for r in rows])


def cmd_pvalue(args):
    if (args.z is None) == (args.t is None):
        raise InputError("give exactly one of --z or --t")
    if args.z is not None:
        val = fab_p_normal(args.z, args.b)
    else:
        if args.df is None:
            raise InputError("--t needs --df")
        val = fab_p_symmetric(args.t, args.b, df=args.df)
    print(format(float(val), ".15g"))


def cmd_dist(args):
    fn = alt_pdf if args.density else alt_cdf
    print(format(float(fn(args.u, args.theta, args.b)), ".15g"))


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fabp", description="Adaptive FAB p-values.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--output", "-o", default=None, help="output CSV (default: stdout)")
        if data:
            sp.add_argument("--input", "-i", required=True, help="input CSV")
            sp.add_argument("--linking", choices=["exchangeable", "regression", "car", "spikeslab"])
            sp.add_argument("--mode", default="exact", help="exact, blocked:K or shared")
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--null", type=float, default=0.0, help="common null value")
            g.add_argument("--null-file", help="CSV whose last column holds one null value per hypothesis")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--q", type=float, default=0.2, help="FDR target")
        sp.add_argument("--alpha", type=float, default=0.05)

    sp = sub.add_parser("means", help="group means with estimated variances (t statistics)")
    common(sp)
    sp.set_defaults(func=cmd_means)

    for name, func in (("lm", cmd_lm), ("glm", cmd_glm)):
        sp = sub.add_parser(name, help="regression coefficients" if name == "lm" else "logistic coefficients")
        common(sp)
        sp.add_argument("--response", required=True, help="CSV with one response column")
        sp.add_argument("--nuisance-cols", default="", help="comma-separated design columns not tested")
        if name == "lm":
            sp.add_argument("--family", choices=["gaussian", "binomial"], default="gaussian")
        sp.set_defaults(func=func)

    sp = sub.add_parser("simulate-hmm", help="hidden Markov mean sequence study")
    common(sp, data=False)
    sp.add_argument("--datasets", type=int, default=100)
    sp.add_argument("--p", type=int, default=1000)
    sp.add_argument("--methods", default=",".join(HMM_METHODS))
    sp.set_defaults(func=cmd_simulate_hmm)

    sp = sub.add_parser("simulate-glm", help="logistic regression study")
    common(sp, data=False)
    sp.add_argument("--ns", default="200,400,800,1600")
    sp.add_argument("--reps", type=int, default=5000)
    sp.add_argument("--p", type=int, default=30)
    sp.add_argument("--signals", type=int, default=15)
    sp.add_argument("--mode", default="exact")
    sp.set_defaults(func=cmd_simulate_glm)

    sp = sub.add_parser("pvalue", help="FAB p-value for one statistic")
    sp.add_argument("--z", type=float)
    sp.add_argument("--t", type=float)
    sp.add_argument("--b", type=float, default=0.0)
    sp.add_argument("--df", type=float)
    sp.set_defaults(func=cmd_pvalue)

    sp = sub.add_parser("dist", help="CDF (or density) of the FAB p-value under an alternative")
    sp.add_argument("--u", type=float, required=True)
    sp.add_argument("--theta", type=float, required=True)
    sp.add_argument("--b", type=float, required=True)
    sp.add_argument("--density", action="store_true")
    sp.set_defaults(func=cmd_dist)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        _check_output(getattr(args, "output", None))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FallbackWarning)
            args.func(args)
    except InputError as exc:
        print(f"fabp: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RankError as exc:
        print(f"fabp: rank error: {exc}", file=sys.stderr)
        return EXIT_RANK
    except FitError as exc:
        print(f"fabp: model fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (FabDomainError, FabError) as exc:
        print(f"fabp: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
