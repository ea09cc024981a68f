"""Nonlinear two-stage least squares benchmark for the parametric model.

Simulation-only competitor: the nonparametric part m(.) is treated as known
and enters as a regressor, so at each lambda the criterion minimizes in
closed form over the linear coefficients. The lambda search reuses the same
grid and geometric-mean tilt as the main estimator for comparability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from smoothmd.errors import DataValidationError, NumericalError
from smoothmd.estimator import LambdaGrid, resolve_scale
from smoothmd.kernels import Dataset
from smoothmd.transform import box_cox, box_cox_d1
from smoothmd.weights import CONDITION_LIMIT


def default_instruments(data: Dataset, m_values: np.ndarray) -> np.ndarray:
    """Instrument matrix (1, X, X^2, m(Z), m(Z)^2)."""
    x = data.x_all
    return np.column_stack([np.ones(data.n), x, x**2, m_values, m_values**2])


@dataclass(frozen=True)
class Nl2slsConfig:
    lambda_grid: LambdaGrid = LambdaGrid()
    scale: str | float = "gmean"
    instrument_builder: object = field(default=None)

    def build_instruments(self, data: Dataset, m_values: np.ndarray) -> np.ndarray:
        if self.instrument_builder is None:
            return default_instruments(data, m_values)
        return np.asarray(self.instrument_builder(data, m_values), dtype=float)


@dataclass
class Nl2slsResult:
    """Grid-minimized 2SLS estimates for (lambda, alpha, beta, delta)."""

    lambda_hat: float
    alpha_hat: float
    beta_hat: np.ndarray
    delta_hat: float
    criterion_trace: np.ndarray
    grid: np.ndarray
    vcov: np.ndarray | None = None
    se: np.ndarray | None = None
    boundary_hit: bool = False

    @property
    def theta(self) -> np.ndarray:
        """(lambda, alpha, beta..., delta)."""
        return np.concatenate([[self.lambda_hat, self.alpha_hat], self.beta_hat, [self.delta_hat]])


def nl2sls_fit(
    data: Dataset,
    true_m,
    config: Nl2slsConfig | None = None,
    compute_vcov: bool = True,
) -> Nl2slsResult:
    """Minimize g' V (V'V)^-1 V' g over the lambda grid, slopes in closed form.

    true_m is either a callable evaluated on data.z or a precomputed vector.
    The projection is never materialized; everything runs through k x k solves.
    """
    if config is None:
        config = Nl2slsConfig()
    m_values = np.asarray(true_m(data.z) if callable(true_m) else true_m, dtype=float)
    if m_values.shape != (data.n,):
        raise DataValidationError("m values must be a length-n vector")
    v_mat = config.build_instruments(data, m_values)
    k = v_mat.shape[1]
    w_mat = np.column_stack([np.ones(data.n), data.x_all, m_values])
    if k < w_mat.shape[1] + 1:
        raise DataValidationError("order condition fails: need k >= p + 2 instruments")
    gram_v = v_mat.T @ v_mat
    eigs = np.linalg.eigvalsh(0.5 * (gram_v + gram_v.T))
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
        raise NumericalError("instrument matrix V'V is rank deficient")
    vt_w = v_mat.T @ w_mat
    gram_w = vt_w.T @ np.linalg.solve(gram_v, vt_w)  # W' P_V W
    eigs = np.linalg.eigvalsh(0.5 * (gram_w + gram_w.T))
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
        raise NumericalError("projected design is rank deficient")

    grid = config.lambda_grid.points()
    s = resolve_scale(config.scale, data.y)
    tmat = box_cox(data.y[:, None], grid[None, :])
    vt_t = v_mat.T @ tmat
    coefs = np.linalg.solve(gram_w, vt_w.T @ np.linalg.solve(gram_v, vt_t))
    vt_resid = vt_t - vt_w @ coefs  # V' (T - W c)
    crit = np.einsum(
        "ij,ij->j", vt_resid, np.linalg.solve(gram_v, vt_resid)
    ) * np.power(s, -2.0 * grid)
    kmin = int(np.argmin(crit))
    lam = float(grid[kmin])
    coef = coefs[:, kmin]
    result = Nl2slsResult(
        lambda_hat=lam,
        alpha_hat=float(coef[0]),
        beta_hat=np.array(coef[1:-1]),
        delta_hat=float(coef[-1]),
        criterion_trace=crit,
        grid=grid,
        boundary_hit=kmin in (0, len(grid) - 1),
    )
    if compute_vcov:
        _attach_vcov(result, data, m_values, v_mat, w_mat)
    return result


def _attach_vcov(result: Nl2slsResult, data: Dataset, m_values, v_mat, w_mat):
    """Heteroskedasticity-robust sandwich for the 2SLS moment conditions."""
    n = data.n
    lam = result.lambda_hat
    coef = np.concatenate([[result.alpha_hat], result.beta_hat, [result.delta_hat]])
    g = box_cox(data.y, lam) - w_mat @ coef
    jac = np.column_stack([box_cox_d1(data.y, lam), -w_mat])  # dg/d(lambda, coef)
    gbar = v_mat.T @ jac / n
    w_inv = np.linalg.solve(v_mat.T @ v_mat / n, np.eye(v_mat.shape[1]))
    meat = (v_mat * (g**2)[:, None]).T @ v_mat / n
    bread = gbar.T @ w_inv @ gbar
    eigs = np.linalg.eigvalsh(0.5 * (bread + bread.T))
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
        raise NumericalError("NL2SLS bread matrix is singular")
    inner = gbar.T @ w_inv @ meat @ w_inv @ gbar
    binv = np.linalg.solve(bread, np.eye(bread.shape[0]))
    vcov = binv @ inner @ binv / n
    result.vcov = 0.5 * (vcov + vcov.T)
    result.se = np.sqrt(np.clip(np.diag(result.vcov), 0.0, None))


def z_rejection(result: Nl2slsResult, index: int, truth: float, level: float) -> bool:
    """Two-sided Wald test for one component of (lambda, alpha, beta..., delta)."""
    if result.se is None:
        raise DataValidationError("fit was run without a covariance estimate")
    zcrit = norm.ppf(1.0 - level / 2.0)
    return bool(abs(result.theta[index] - truth) / result.se[index] > zcrit)
