"""Data-generating processes for the four study designs and the Monte Carlo
harness aggregating bias, dispersion, empirical levels, and power curves.

Replication seeds derive from a master seed through SeedSequence spawning,
so reports are bitwise identical for a given master seed regardless of the
parallelism used to compute them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from smoothmd.errors import DataValidationError, NumericalError
from smoothmd.estimator import (
    EstimatorConfig,
    LambdaGrid,
    ModelParts,
    _fit_prepared,
    prepare,
)
from smoothmd.inference import (
    context_from_parts,
    dm_beta_test,
    dm_joint_test,
    dm_lambda_test,
    estimate_vcov,
    z_test_rejections,
)
from smoothmd.kernels import BandwidthRule, Dataset
from smoothmd.nl2sls import Nl2slsConfig, nl2sls_fit
from smoothmd.transform import inverse_box_cox
from smoothmd.weights import WeightConfig

MAX_POSITIVITY_ROUNDS = 100
MAX_DUMMY_ROUNDS = 5000
MIN_DUMMY_CELL = 4


@dataclass(frozen=True)
class DgpSpec:
    """One simulated design: which model, how many observations, which seed."""

    model_id: int
    n: int
    seed: object = 0
    lambda0: float | None = None
    beta0: float | None = None
    dummy_count: int = 10  # Model 4 only; the full-scale design uses 30

    def __post_init__(self):
        if self.model_id not in (1, 2, 3, 4):
            raise DataValidationError("model_id must be 1, 2, 3 or 4")
        if self.n < 5:
            raise DataValidationError("n too small")


@dataclass(frozen=True)
class DgpTruth:
    """True parameter values and the true nonparametric part."""

    lambda0: float
    beta: np.ndarray
    m: Callable[[np.ndarray], np.ndarray]


def model1_m(z: np.ndarray) -> np.ndarray:
    z1 = np.asarray(z)[..., 0] if np.asarray(z).ndim > 1 else np.asarray(z)
    return expit(z1) + 1.0 / 3.0


def model2_m(z: np.ndarray) -> np.ndarray:
    z1 = np.asarray(z)[..., 0] if np.asarray(z).ndim > 1 else np.asarray(z)
    return expit(z1) + 3.0


def model3_m(z: np.ndarray) -> np.ndarray:
    z1 = np.asarray(z)[..., 0] if np.asarray(z).ndim > 1 else np.asarray(z)
    return expit(z1) - 1.0


def model4_m(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z))
    return 1.0 / 3.0 + z[:, 0] + z[:, 1] + z[:, 0] * z[:, 1]


def _enforce_dummy_cells(rng: np.random.Generator, dummies: np.ndarray) -> np.ndarray:
    """Redraw rows whose dummy combination is shared by fewer than 4 rows.

    Rows in sufficiently populated combinations are never touched, so the set
    of valid rows grows monotonically and the loop terminates almost surely.
    """
    n, k = dummies.shape
    for _ in range(MAX_DUMMY_ROUNDS):
        _, inverse, counts = np.unique(
            dummies, axis=0, return_inverse=True, return_counts=True
        )
        bad = counts[inverse] < MIN_DUMMY_CELL
        if not bad.any():
            return dummies
        dummies[bad] = (rng.random((int(bad.sum()), k)) < 0.2).astype(float)
    raise NumericalError(
        "could not satisfy the minimum dummy-combination count; "
        "reduce dummy_count or increase n"
    )


def _draw_model(rng: np.random.Generator, spec: DgpSpec, rows: int):
    """One draw of (z, x_cont, x_disc, eps) for the requested model."""
    if spec.model_id == 1:
        z = rng.normal(1.0, 1.0, size=(rows, 1))
        x = -2.0 / 3.0 * z[:, 0] + rng.normal(0.0, 1.0, size=rows)
        eps = np.sqrt((1.0 + x**2) / 2.0) * rng.normal(0.0, np.sqrt(1.0 / 13.0), size=rows)
        return z, x[:, None], np.empty((rows, 0)), eps
    if spec.model_id == 2:
        z = rng.normal(1.0, 1.0, size=(rows, 1))
        x = -2.0 / 3.0 * z[:, 0] + rng.normal(0.0, 1.0, size=rows)
        eps = rng.normal(0.0, np.sqrt(1.0 / 9.0), size=rows)
        return z, x[:, None], np.empty((rows, 0)), eps
    if spec.model_id == 3:
        z = rng.uniform(-3.0, -1.0, size=(rows, 1))
        x = 2.0 / 3.0 * z[:, 0] + rng.uniform(-1.0, 1.0, size=rows)
        # written as U(-sqrt(1/9), sqrt(1/9)) in the study design; its variance
        # is 1/27, not 1/9, and it is implemented exactly as written
        bound = np.sqrt(1.0 / 9.0)
        eps = rng.uniform(-bound, bound, size=rows)
        return z, x[:, None], np.empty((rows, 0)), eps
    z = rng.normal(0.0, 1.0, size=(rows, 2))
    x1 = -1.0 / 3.0 * (z[:, 0] + z[:, 1]) + rng.normal(0.0, 1.0, size=rows)
    dummies = (rng.random((rows, spec.dummy_count)) < 0.2).astype(float)
    eps = rng.normal(0.0, np.sqrt(1.0 / 9.0), size=rows)
    return z, x1[:, None], dummies, eps


_MODEL_DEFAULTS = {
    1: (0.0, model1_m),
    2: (0.5, model2_m),
    3: (-1.0, model3_m),
    4: (0.0, model4_m),
}


def generate(spec: DgpSpec) -> tuple[Dataset, DgpTruth]:
    """Simulate one dataset; returns the sample and the generating truth.

    Y is obtained by inverting the transform at the model's lambda0; rows
    whose linear index would leave the transform's domain are redrawn (the
    default designs essentially never trigger this guard).
    """
    rng = np.random.default_rng(spec.seed)
    lam0, m_fun = _MODEL_DEFAULTS[spec.model_id]
    if spec.lambda0 is not None:
        lam0 = float(spec.lambda0)
    beta_cont = 1.0 if spec.beta0 is None else float(spec.beta0)

    z, x_cont, x_disc, eps = _draw_model(rng, spec, spec.n)
    if spec.model_id == 4:
        x_disc = _enforce_dummy_cells(rng, x_disc)
        beta_disc = rng.uniform(-1.0, 1.0, size=spec.dummy_count)
    else:
        beta_disc = np.empty(0)
    beta = np.concatenate([[beta_cont], beta_disc])

    for _ in range(MAX_POSITIVITY_ROUNDS):
        xb = x_cont[:, 0] * beta_cont + (x_disc @ beta_disc if beta_disc.size else 0.0)
        u = xb + m_fun(z) + eps
        if lam0 == 0.0:
            bad = np.zeros(spec.n, dtype=bool)
        else:
            bad = lam0 * u + 1.0 <= 0.0
        if not bad.any():
            y = inverse_box_cox(u, lam0)
            data = Dataset(y=y, x_cont=x_cont, x_disc=x_disc, z=z)
            return data, DgpTruth(lambda0=lam0, beta=beta, m=m_fun)
        rows = int(bad.sum())
        z_new, xc_new, xd_new, eps_new = _draw_model(rng, spec, rows)
        z[bad], x_cont[bad], eps[bad] = z_new, xc_new, eps_new
        if xd_new.size:
            x_disc[bad] = xd_new
            x_disc = _enforce_dummy_cells(rng, x_disc)
    raise NumericalError(
        f"positivity violated after {MAX_POSITIVITY_ROUNDS} resampling rounds "
        f"(model {spec.model_id}, lambda0={lam0})"
    )


# ---------------------------------------------------------------------------
# Monte Carlo harness


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator column of the report."""

    name: str
    kind: str = "smoothmd"  # "smoothmd" | "nl2sls"
    use_gamma: bool = True
    scale: object = "gmean"
    grid_halfwidth: float = 0.8
    grid_step: float = 0.001
    weights: WeightConfig = WeightConfig()
    bandwidth: BandwidthRule | None = None

    def grid(self, lambda0: float) -> LambdaGrid:
        return LambdaGrid(
            lambda0 - self.grid_halfwidth, lambda0 + self.grid_halfwidth, self.grid_step
        )


@dataclass(frozen=True)
class TestSpec:
    """One hypothesis-test column of the report, attached to an estimator.

    kind "dm_lambda" tests lambda = value (truth when None);
    kind "dm_beta" tests the first slope = value (truth when None) unless an
    explicit (r_mat, c_vec) pair is given;
    kind "dm_joint" combines both; kind "z" is the Wald test for param_index.
    """

    __test__ = False  # keep pytest from collecting this dataclass

    name: str
    kind: str
    estimator: str
    value: float | None = None
    r_rows: tuple = ()
    c_vals: tuple = ()
    lambda_r: float | None = None
    param_index: int = 0
    variance_mode: str = "smoothmd"
    levels: tuple = (0.05, 0.10)


@dataclass
class McReport:
    """Aggregated Monte Carlo results with per-cell Monte Carlo errors."""

    model_id: int
    n: int
    reps: int
    seed: int
    estimates: dict
    rejections: dict
    failures: int
    failure_messages: list
    warning: str | None
    runtime_seconds: float

    def bias_rows(self) -> list[dict]:
        rows = []
        for est, params in self.estimates.items():
            for param, cell in params.items():
                rows.append(
                    {
                        "model": self.model_id,
                        "n": self.n,
                        "estimator": est,
                        "param": param,
                        "bias": cell["bias"],
                        "sd": cell["sd"],
                        "mc_se": cell["mc_se"],
                        "reps": self.reps,
                        "seed": self.seed,
                    }
                )
        return rows

    def level_rows(self) -> list[dict]:
        rows = []
        for test, levels in self.rejections.items():
            for level, cell in levels.items():
                rows.append(
                    {
                        "model": self.model_id,
                        "n": self.n,
                        "test": test,
                        "level": level,
                        "rejection_rate": cell["rate"],
                        "mc_se": cell["mc_se"],
                        "reps": self.reps,
                        "seed": self.seed,
                    }
                )
        return rows


def _restriction_for(test: TestSpec, truth: DgpTruth, p: int):
    if test.r_rows:
        r_mat = np.array(test.r_rows, dtype=float).reshape(-1, p)
        c_vec = np.array(test.c_vals, dtype=float)
    else:
        r_mat = np.zeros((1, p))
        r_mat[0, 0] = 1.0
        c_vec = np.array([truth.beta[0] if test.value is None else test.value])
    return r_mat, c_vec


def _smoothmd_estimates(parts: ModelParts, config, truth):
    fit = _fit_prepared(parts, config)
    est = {"lambda": fit.lambda_hat - truth.lambda0}
    for j, b in enumerate(fit.beta_hat, start=1):
        est[f"beta{j}"] = b - truth.beta[j - 1]
    return fit, est


def _worker(template: DgpSpec, child_seed, estimators, tests) -> dict:
    """One replication: simulate, fit every estimator, run every test."""
    spec = replace(template, seed=child_seed)
    try:
        data, truth = generate(spec)
        record = {"estimates": {}, "rejections": {}, "failed": False, "message": ""}
        parts_by_gamma: dict[bool, ModelParts] = {}
        fits = {}
        for est in estimators:
            if est.kind == "nl2sls":
                cfg = Nl2slsConfig(lambda_grid=est.grid(truth.lambda0), scale=est.scale)
                res = nl2sls_fit(data, truth.m, cfg)
                cell = {"lambda": res.lambda_hat - truth.lambda0}
                for j, b in enumerate(res.beta_hat, start=1):
                    cell[f"beta{j}"] = b - truth.beta[j - 1]
                record["estimates"][est.name] = cell
                fits[est.name] = ("nl2sls", res, None)
                continue
            config = EstimatorConfig(
                lambda_grid=est.grid(truth.lambda0),
                scale=est.scale,
                use_gamma=est.use_gamma,
                bandwidth=est.bandwidth,
                weights=est.weights,
            )
            if est.use_gamma not in parts_by_gamma:
                parts_by_gamma[est.use_gamma] = prepare(data, config)
            parts = parts_by_gamma[est.use_gamma]
            fit, cell = _smoothmd_estimates(parts, config, truth)
            record["estimates"][est.name] = cell
            fits[est.name] = ("smoothmd", fit, parts)

        contexts = {}
        for test in tests:
            kind, fit, parts = fits[test.estimator]
            if kind == "nl2sls":
                from smoothmd.nl2sls import z_rejection

                rejs = {}
                # theta ordering: (lambda, alpha, beta..., delta); alpha0 = 0
                # and the known-m coefficient delta0 = 1 under the designs here
                truth_vec = np.concatenate([[truth.lambda0], [0.0], truth.beta, [1.0]])
                for level in test.levels:
                    rejs[level] = z_rejection(
                        fit, test.param_index, truth_vec[test.param_index], level
                    )
                record["rejections"][test.name] = rejs
                continue
            key = test.estimator
            if key not in contexts:
                contexts[key] = context_from_parts(parts, fit)
            ctx = contexts[key]
            rejs = {}
            if test.kind == "z":
                est_v = estimate_vcov(
                    fit, parts.plan, parts.op, parts.data,
                    mode=test.variance_mode, context=ctx,
                )
                truth_vec = np.concatenate([[truth.lambda0], truth.beta])
                for level in test.levels:
                    flags = z_test_rejections(fit, est_v, truth_vec, level)
                    rejs[level] = bool(flags[test.param_index])
            elif test.kind == "dm_lambda":
                lam_r = truth.lambda0 if test.value is None else test.value
                for level in test.levels:
                    res = dm_lambda_test(
                        fit, parts.plan, parts.op, parts.data, lam_r,
                        level=level, mode=test.variance_mode, context=ctx,
                    )
                    rejs[level] = res.reject
            elif test.kind == "dm_beta":
                r_mat, c_vec = _restriction_for(test, truth, data.p)
                for level in test.levels:
                    res = dm_beta_test(
                        fit, parts.plan, parts.op, parts.data, r_mat, c_vec,
                        level=level, mode=test.variance_mode, context=ctx,
                    )
                    rejs[level] = res.reject
            elif test.kind == "dm_joint":
                r_mat, c_vec = _restriction_for(test, truth, data.p)
                lam_r = truth.lambda0 if test.lambda_r is None else test.lambda_r
                for level in test.levels:
                    res = dm_joint_test(
                        fit, parts.plan, parts.op, parts.data, r_mat, c_vec, lam_r,
                        level=level, mode=test.variance_mode, context=ctx,
                    )
                    rejs[level] = res.reject
            else:
                raise DataValidationError(f"unknown test kind {test.kind!r}")
            record["rejections"][test.name] = rejs
        return record
    except (NumericalError, np.linalg.LinAlgError, DataValidationError) as exc:
        return {"estimates": {}, "rejections": {}, "failed": True, "message": str(exc)}


def _spawn_seeds(seed: int, reps: int):
    return np.random.SeedSequence(seed).spawn(reps)


def run_monte_carlo(
    spec: DgpSpec,
    estimators: list[EstimatorSpec],
    tests: list[TestSpec] | None = None,
    reps: int = 100,
    seed: int = 0,
    n_jobs: int = 1,
) -> McReport:
    """Replicate the design, aggregate bias/sd and rejection frequencies."""
    if reps < 1:
        raise DataValidationError("reps must be at least 1")
    tests = tests or []
    t0 = time.perf_counter()
    children = _spawn_seeds(seed, reps)
    if n_jobs == 1:
        records = [_worker(spec, child, estimators, tests) for child in children]
    else:
        import os

        os.environ.setdefault("OMP_NUM_THREADS", "1")
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        records = Parallel(n_jobs=n_jobs)(
            delayed(_worker)(spec, child, estimators, tests) for child in children
        )
    ok = [r for r in records if not r["failed"]]
    failures = len(records) - len(ok)
    messages = [r["message"] for r in records if r["failed"]][:20]
    warning = None
    if failures > 0.01 * reps:
        warning = f"{failures} of {reps} replications failed"
    if not ok:
        raise NumericalError("every replication failed: " + "; ".join(messages[:3]))

    estimates = {}
    for est in estimators:
        params = {}
        names = ok[0]["estimates"][est.name].keys()
        for param in names:
            diffs = np.array([r["estimates"][est.name][param] for r in ok])
            nrep = len(diffs)
            sd = float(np.std(diffs, ddof=1)) if nrep > 1 else 0.0
            params[param] = {
                "bias": float(np.mean(diffs)),
                "sd": sd,
                "mc_se": sd / np.sqrt(nrep) if nrep > 1 else float("nan"),
            }
        estimates[est.name] = params
    rejections = {}
    for test in tests:
        cells = {}
        for level in test.levels:
            flags = np.array([r["rejections"][test.name][level] for r in ok], dtype=float)
            rate = float(np.mean(flags))
            cells[level] = {
                "rate": rate,
                "mc_se": float(np.sqrt(rate * (1.0 - rate) / len(flags))),
            }
        rejections[test.name] = cells
    return McReport(
        model_id=spec.model_id,
        n=spec.n,
        reps=reps,
        seed=seed,
        estimates=estimates,
        rejections=rejections,
        failures=failures,
        failure_messages=messages,
        warning=warning,
        runtime_seconds=time.perf_counter() - t0,
    )


def run_power_curve(
    spec: DgpSpec,
    axis: str,
    values,
    estimator: EstimatorSpec | None = None,
    reps: int = 100,
    level: float = 0.10,
    seed: int = 0,
    n_jobs: int = 1,
) -> list[dict]:
    """Empirical rejection rate of the matching DM test along one axis.

    axis "lambda" varies the hypothesized transform parameter; axis "beta"
    varies the hypothesized first slope. Each replication is fitted once and
    evaluated at every hypothesized value.
    """
    if axis not in ("lambda", "beta"):
        raise DataValidationError("axis must be 'lambda' or 'beta'")
    estimator = estimator or EstimatorSpec(name="smoothmd")
    values = [float(v) for v in values]
    kind = "dm_lambda" if axis == "lambda" else "dm_beta"
    tests = [
        TestSpec(
            name=f"{axis}={v:g}",
            kind=kind,
            estimator=estimator.name,
            value=v,
            levels=(level,),
        )
        for v in values
    ]
    report = run_monte_carlo(
        spec, [estimator], tests, reps=reps, seed=seed, n_jobs=n_jobs
    )
    curve = []
    for v, test in zip(values, tests):
        cell = report.rejections[test.name][level]
        curve.append(
            {
                "model": spec.model_id,
                "n": spec.n,
                "axis": axis,
                "hypothesis": v,
                "power": cell["rate"],
                "mc_se": cell["mc_se"],
                "level": level,
                "reps": report.reps - report.failures,
                "seed": seed,
            }
        )
    return curve
