"""Command-line surface: fit, test, simulate, and smooth-m subcommands.

Exit codes: 0 success, 2 data or usage errors, 3 numerical errors. All file
outputs are machine-readable (JSON for single fits/tests, CSV for tables)
with floats serialized at full round-trip precision.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from smoothmd.errors import DataValidationError, NumericalError
from smoothmd.estimator import EstimatorConfig, LambdaGrid, prepare, _fit_prepared
from smoothmd.inference import (
    dm_beta_test,
    dm_joint_test,
    dm_lambda_test,
    estimate_vcov,
    make_context,
)
from smoothmd.kernels import BandwidthRule, Dataset, default_m_bandwidth, nw_regress
from smoothmd.simulation import DgpSpec, EstimatorSpec, TestSpec, run_monte_carlo
from smoothmd.weights import WeightConfig

EXIT_OK = 0
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _split_cols(arg: str | None) -> list[str]:
    return [c for c in (arg.split(",") if arg else []) if c]


def load_dataset(path: str, y_col: str, x_cols, x_disc_cols, z_cols) -> Dataset:
    """Strict CSV ingestion: header required, declared columns must exist."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as exc:
        raise DataValidationError(f"input file not found: {path}") from exc
    except Exception as exc:
        raise DataValidationError(f"could not parse CSV {path}: {exc}") from exc
    declared = [y_col, *x_cols, *x_disc_cols, *z_cols]
    seen = set()
    for col in declared:
        if col in seen:
            raise DataValidationError(f"column {col!r} declared in more than one role")
        seen.add(col)
        if col not in frame.columns:
            raise DataValidationError(f"column {col!r} not present in {path}")
    if not x_cols and not x_disc_cols:
        raise DataValidationError("at least one regressor column is required")
    if not z_cols:
        raise DataValidationError("at least one smoothing column (--z) is required")

    def numeric(cols):
        if not cols:
            return np.empty((len(frame), 0))
        block = np.empty((len(frame), len(cols)))
        for j, col in enumerate(cols):
            try:
                block[:, j] = np.asarray(frame[col], dtype=float)
            except ValueError as exc:
                raise DataValidationError(f"column {col!r} is not numeric: {exc}") from exc
        return block

    y = numeric([y_col])[:, 0]
    x_cont = numeric(x_cols)
    z = numeric(z_cols)
    # discrete columns compared as exact strings, coded by sorted first-appearance
    disc = np.empty((len(frame), len(x_disc_cols)))
    for j, col in enumerate(x_disc_cols):
        levels = sorted(set(frame[col]))
        mapping = {v: i for i, v in enumerate(levels)}
        disc[:, j] = [mapping[v] for v in frame[col]]
    return Dataset(y=y, x_cont=x_cont, x_disc=disc, z=z)


def _parse_grid(arg: str) -> LambdaGrid:
    parts = arg.split(":")
    if len(parts) != 3:
        raise DataValidationError("--grid must look like lo:hi:step")
    try:
        lo, hi, step = (float(v) for v in parts)
    except ValueError as exc:
        raise DataValidationError(f"bad --grid value: {exc}") from exc
    return LambdaGrid(lo, hi, step)


def _parse_scale(arg: str):
    if arg in ("gmean", "none"):
        return arg
    try:
        return float(arg)
    except ValueError as exc:
        raise DataValidationError("--scale must be gmean, none, or a number") from exc


_TERM_RE = re.compile(
    r"^([+-])?((?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)?\*?b(\d+)$"
)


def parse_restriction(text: str, p: int):
    """Parse the restriction mini-language into (R, c, lambda_r).

    Statements separated by ';'. Each is either "lambda=<v>" or a linear
    combination of slope symbols b1..bp equal to a number, e.g.
    "b1=1", "b1+0.5*b2=2", "2*b1-b3=0".
    """
    r_rows, c_vals, lambda_r = [], [], None
    for stmt in [s.strip() for s in text.split(";") if s.strip()]:
        if "=" not in stmt:
            raise DataValidationError(f"restriction {stmt!r} lacks '='")
        lhs, _, rhs = stmt.partition("=")
        lhs, rhs = lhs.strip(), rhs.strip()
        try:
            value = float(rhs)
        except ValueError as exc:
            raise DataValidationError(f"bad restriction value in {stmt!r}") from exc
        if lhs == "lambda":
            if lambda_r is not None:
                raise DataValidationError("lambda restricted twice")
            lambda_r = value
            continue
        row = np.zeros(p)
        pieces = re.findall(r"[+-]?[^+-]+", lhs.replace(" ", ""))
        if not pieces:
            raise DataValidationError(f"empty restriction left side in {stmt!r}")
        for piece in pieces:
            match = _TERM_RE.match(piece)
            if not match:
                raise DataValidationError(f"cannot parse term {piece!r} in {stmt!r}")
            sign_txt, num_txt, idx_txt = match.groups()
            idx = int(idx_txt)
            if not 1 <= idx <= p:
                raise DataValidationError(f"slope index b{idx} out of range 1..{p}")
            coef = float(num_txt) if num_txt else 1.0
            if sign_txt == "-":
                coef = -coef
            row[idx - 1] += coef
        r_rows.append(row)
        c_vals.append(value)
    r_mat = np.array(r_rows) if r_rows else np.zeros((0, p))
    c_vec = np.array(c_vals)
    return r_mat, c_vec, lambda_r


class _Formatter(json.JSONEncoder):
    def default(self, o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if isinstance(o, np.bool_):
            return bool(o)
        return super().default(o)


def _write_json(payload: dict, out: str | None):
    text = json.dumps(payload, indent=2, cls=_Formatter)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _estimator_options(args) -> EstimatorConfig:
    weights = WeightConfig(rule=args.d_rule)
    bandwidth = BandwidthRule(exponent=args.bandwidth_exp, constant=args.bandwidth_const)
    return EstimatorConfig(
        lambda_grid=_parse_grid(args.grid),
        scale=_parse_scale(args.scale),
        use_gamma=not args.no_gamma,
        bandwidth=bandwidth,
        weights=weights,
    )


def _add_data_options(sub):
    sub.add_argument("--input", required=True, help="input CSV path (header required)")
    sub.add_argument("--y", required=True, help="response column (strictly positive)")
    sub.add_argument("--x", default="", help="comma-separated continuous regressors")
    sub.add_argument("--x-disc", default="", help="comma-separated discrete regressors")
    sub.add_argument("--z", default="", help="comma-separated smoothing covariates")


def _add_estimator_options(sub):
    sub.add_argument("--bandwidth-exp", type=float, default=3.5,
                     help="bandwidth exponent e in h = c * n^(-1/e)")
    sub.add_argument("--bandwidth-const", type=float, default=1.0,
                     help="bandwidth constant c on the standardized z scale")
    sub.add_argument("--grid", default="-1:1:0.001",
                     help="lambda grid lo:hi:step (write --grid=-1:1:0.001 for negative lo)")
    sub.add_argument("--scale", default="gmean", help="gmean, none, or a number")
    sub.add_argument("--no-gamma", action="store_true",
                     help="drop the intercept nuisance from the criterion")
    sub.add_argument("--variance", choices=["smoothmd", "star"], default="smoothmd",
                     help="variance estimator (star skips the nuisance correction)")
    sub.add_argument("--d-rule", choices=["half_inv_var", "sd"], default="half_inv_var",
                     help="rule for the discrepancy parameters d")


def _fit_payload(args):
    data = load_dataset(
        args.input, args.y, _split_cols(args.x), _split_cols(args.x_disc), _split_cols(args.z)
    )
    config = _estimator_options(args)
    parts = prepare(data, config)
    fit = _fit_prepared(parts, config)
    mode = "smoothmd" if args.variance == "smoothmd" else "smoothmd_star"
    ctx = make_context(fit, parts.plan, parts.op, data)
    estimate_vcov(fit, parts.plan, parts.op, data, mode=mode, context=ctx)
    return data, parts, fit, ctx


def cmd_fit(args) -> int:
    data, parts, fit, _ = _fit_payload(args)
    trace_path = None
    if args.out:
        trace_path = str(Path(args.out).with_suffix("")) + "_trace.csv"
        pd.DataFrame(
            {"lambda": fit.grid, "objective": fit.objective_trace}
        ).to_csv(trace_path, index=False)
    warnings = []
    if fit.boundary_hit:
        warnings.append("grid boundary hit")
    payload = {
        "lambda_hat": fit.lambda_hat,
        "beta_hat": fit.beta_hat,
        "gamma_hat": fit.gamma_hat if fit.use_gamma else 0.0,
        "se": fit.se,
        "s_used": fit.s_used,
        "objective_trace": trace_path,
        "config": {
            "grid": args.grid,
            "scale": args.scale,
            "use_gamma": not args.no_gamma,
            "bandwidth_exp": args.bandwidth_exp,
            "bandwidth_const": args.bandwidth_const,
            "variance": args.variance,
            "d_rule": args.d_rule,
            "columns": {
                "y": args.y,
                "x": _split_cols(args.x),
                "x_disc": _split_cols(args.x_disc),
                "z": _split_cols(args.z),
            },
        },
        "n": data.n,
        "warnings": warnings,
    }
    _write_json(payload, args.out)
    return EXIT_OK


def cmd_test(args) -> int:
    data, parts, fit, ctx = _fit_payload(args)
    r_mat, c_vec, lambda_r = parse_restriction(args.restrict, data.p)
    mode = "smoothmd" if args.variance == "smoothmd" else "smoothmd_star"
    kwargs = dict(mode=mode, context=ctx)
    if lambda_r is not None and r_mat.shape[0] == 0:
        runner = lambda level: dm_lambda_test(
            fit, parts.plan, parts.op, data, lambda_r, level=level, **kwargs
        )
    elif lambda_r is None and r_mat.shape[0] > 0:
        runner = lambda level: dm_beta_test(
            fit, parts.plan, parts.op, data, r_mat, c_vec, level=level, **kwargs
        )
    elif lambda_r is not None:
        runner = lambda level: dm_joint_test(
            fit, parts.plan, parts.op, data, r_mat, c_vec, lambda_r, level=level, **kwargs
        )
    else:
        raise DataValidationError("empty restriction")
    res05 = runner(0.05)
    res10 = runner(0.10)
    payload = {
        "restriction": args.restrict,
        "statistic": res10.statistic,
        "eigen_weights": res10.eigen_weights,
        "critical_value_5pct": res05.critical_value,
        "critical_value_10pct": res10.critical_value,
        "p_value": res10.p_value,
        "reject_5pct": res05.reject,
        "reject_10pct": res10.reject,
        "lambda_hat": fit.lambda_hat,
        "beta_hat": fit.beta_hat,
    }
    _write_json(payload, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = DgpSpec(model_id=args.model, n=args.n, dummy_count=args.dummies)
    estimators = []
    for name in _split_cols(args.estimators) or ["smoothmd"]:
        if name == "smoothmd":
            estimators.append(EstimatorSpec(name="smoothmd", use_gamma=True))
        elif name == "smoothmd_nogamma":
            estimators.append(EstimatorSpec(name="smoothmd_nogamma", use_gamma=False))
        elif name == "nl2sls":
            estimators.append(EstimatorSpec(name="nl2sls", kind="nl2sls"))
        else:
            raise DataValidationError(f"unknown estimator {name!r}")
    tests = []
    smoothmd_names = [e.name for e in estimators if e.kind == "smoothmd"]
    if _split_cols(args.tests) and not smoothmd_names:
        raise DataValidationError("tests require a smoothmd estimator in --estimators")
    for name in _split_cols(args.tests):
        base = smoothmd_names[0]
        if name == "dm_lambda":
            tests.append(TestSpec(name="dm_lambda", kind="dm_lambda", estimator=base))
        elif name == "dm_beta":
            tests.append(TestSpec(name="dm_beta", kind="dm_beta", estimator=base))
        elif name == "z_lambda":
            tests.append(TestSpec(name="z_lambda", kind="z", estimator=base, param_index=0))
        elif name == "z_beta":
            tests.append(TestSpec(name="z_beta", kind="z", estimator=base, param_index=1))
        else:
            raise DataValidationError(f"unknown test {name!r}")
    report = run_monte_carlo(
        spec, estimators, tests, reps=args.reps, seed=args.seed, n_jobs=args.threads
    )
    out = Path(args.out) if args.out else Path("mc_report")
    out.parent.mkdir(parents=True, exist_ok=True)
    bias_path = str(out) + "_bias.csv"
    pd.DataFrame(report.bias_rows()).to_csv(bias_path, index=False)
    written = {"bias": bias_path}
    if tests:
        level_path = str(out) + "_level.csv"
        pd.DataFrame(report.level_rows()).to_csv(level_path, index=False)
        written["level"] = level_path
    summary = {
        "model": report.model_id,
        "n": report.n,
        "reps": report.reps,
        "seed": report.seed,
        "failures": report.failures,
        "warning": report.warning,
        "runtime_seconds": report.runtime_seconds,
        "outputs": written,
    }
    print(json.dumps(summary, indent=2, cls=_Formatter))
    return EXIT_OK


def cmd_smooth_m(args) -> int:
    data, parts, fit, _ = _fit_payload(args)
    if args.eval_grid:
        lo, hi, num = args.eval_grid.split(":")
        pts = np.linspace(float(lo), float(hi), int(num))
        eval_points = np.column_stack([pts] * data.q) if data.q > 1 else pts[:, None]
    else:
        eval_points = data.z
    bw = args.bandwidth_m or default_m_bandwidth(data.n, data.q)
    m_hat, supported = nw_regress(fit.residuals, parts.plan, eval_points, bw)
    frame = pd.DataFrame(eval_points, columns=[f"z{j + 1}" for j in range(data.q)])
    frame["m_hat"] = m_hat
    frame["supported"] = supported
    out = args.out or "m_hat.csv"
    frame.to_csv(out, index=False)
    print(json.dumps({"output": out, "bandwidth_m": bw, "lambda_hat": fit.lambda_hat}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothmd",
        description="Minimum-distance estimation for partially linear Box-Cox regressions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="estimate (lambda, beta, gamma) from a CSV")
    _add_data_options(p_fit)
    _add_estimator_options(p_fit)
    p_fit.add_argument("--out", default=None, help="output JSON path (stdout if omitted)")
    p_fit.set_defaults(func=cmd_fit)

    p_test = sub.add_parser("test", help="distance-metric test of a restriction")
    _add_data_options(p_test)
    _add_estimator_options(p_test)
    p_test.add_argument("--restrict", required=True,
                        help="e.g. \"lambda=0\", \"b1=1\", \"b1+0*b2=1;lambda=0.5\"")
    p_test.add_argument("--out", default=None)
    p_test.set_defaults(func=cmd_test)

    p_sim = sub.add_parser("simulate", help="Monte Carlo study of a simulated design")
    p_sim.add_argument("--model", type=int, required=True, choices=[1, 2, 3, 4])
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.add_argument("--dummies", type=int, default=10, help="Model 4 dummy count")
    p_sim.add_argument("--estimators", default="smoothmd",
                       help="comma list: smoothmd, smoothmd_nogamma, nl2sls")
    p_sim.add_argument("--tests", default="", help="comma list: dm_lambda, dm_beta, z_lambda, z_beta")
    p_sim.add_argument("--out", default=None, help="output path stem for CSVs")
    p_sim.set_defaults(func=cmd_simulate)

    p_sm = sub.add_parser("smooth-m", help="smooth fit residuals to recover m(.)")
    _add_data_options(p_sm)
    _add_estimator_options(p_sm)
    p_sm.add_argument("--eval-grid", default=None, help="lo:hi:num per z coordinate")
    p_sm.add_argument("--bandwidth-m", type=float, default=None)
    p_sm.add_argument("--out", default=None)
    p_sm.set_defaults(func=cmd_smooth_m)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_DATA if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except DataValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
