"""Product-kernel Nadaraya-Watson machinery for the nuisance functions.

The smoother works on the density-premultiplied scale throughout: every
output is a kernel-average numerator, never a ratio, so no division by an
estimated density occurs anywhere in the estimation path. The classic ratio
estimator is only used by :func:`nw_regress` for plotting the nonparametric
regression part from residuals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from smoothmd.errors import DataValidationError
from smoothmd.transform import box_cox_derivative

# Above this sample size kernel weights are regenerated in row blocks instead
# of being materialized as an n x n array.
BLOCKED_MODE_THRESHOLD = 4000
BLOCK_SIZE = 512

_GAUSS_NORM = 1.0 / np.sqrt(2.0 * np.pi)


def gaussian_product_kernel(u: np.ndarray) -> np.ndarray:
    """Product of q standard normal densities, rows = points, columns = coords."""
    return np.exp(-0.5 * np.sum(u * u, axis=-1)) * _GAUSS_NORM ** u.shape[-1]


@dataclass(frozen=True)
class Dataset:
    """Observed sample: positive response, split covariates, smoothing covariates.

    x_disc holds finite-alphabet codes; its columns enter regression designs
    numerically and enter discrepancy weights through exact-match indicators.
    """

    y: np.ndarray
    x_cont: np.ndarray
    x_disc: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        xc = np.atleast_2d(np.asarray(self.x_cont, dtype=float))
        xd = np.atleast_2d(np.asarray(self.x_disc, dtype=float))
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        n = y.shape[0]
        if xc.size == 0:
            xc = xc.reshape(n, 0)
        if xd.size == 0:
            xd = xd.reshape(n, 0)
        if xc.shape[0] != n or xd.shape[0] != n or z.shape[0] != n:
            raise DataValidationError("y, x_cont, x_disc and z must share length n")
        for name, arr in (("y", y), ("x_cont", xc), ("x_disc", xd), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise DataValidationError(f"{name} contains missing or non-finite values")
        if np.any(y <= 0.0):
            raise DataValidationError("response must be strictly positive")
        p = xc.shape[1] + xd.shape[1]
        if p < 1:
            raise DataValidationError("at least one regressor column is required")
        if z.shape[1] < 1:
            raise DataValidationError("at least one smoothing covariate is required")
        # n >= p + 2 is required for estimation and enforced by fit(); smaller
        # samples are allowed here so smoothing primitives stay testable.
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x_cont", xc)
        object.__setattr__(self, "x_disc", xd)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_cont(self) -> int:
        return self.x_cont.shape[1]

    @property
    def p_disc(self) -> int:
        return self.x_disc.shape[1]

    @property
    def p(self) -> int:
        return self.p_cont + self.p_disc

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def x_all(self) -> np.ndarray:
        """Regressor matrix: continuous columns first, then discrete codes."""
        return np.hstack([self.x_cont, self.x_disc])


@dataclass(frozen=True)
class BandwidthRule:
    """h = constant * n**(-1/exponent), applied on the standardized z scale."""

    exponent: float = 3.5
    constant: float = 1.0

    def resolve(self, n: int) -> float:
        if self.exponent <= 0 or self.constant <= 0:
            raise DataValidationError("bandwidth rule needs positive constant and exponent")
        return self.constant * float(n) ** (-1.0 / self.exponent)


@dataclass
class KernelPlan:
    """Precomputed smoothing state shared by every lambda evaluation.

    kmat holds (1/n) K_{h,ij} when materialized and None in blocked mode;
    fz_hat are the density numerators, xfz_hat the E[X|Z] f_z numerators.
    The plan is immutable after construction and safe to share across threads.
    """

    bandwidth: float
    z_standardized: np.ndarray
    z_scale: np.ndarray
    fz_hat: np.ndarray
    xfz_hat: np.ndarray
    kmat: np.ndarray | None = None
    block_size: int = BLOCK_SIZE
    _xhat: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.z_standardized.shape[0]

    @property
    def q(self) -> int:
        return self.z_standardized.shape[1]

    def smooth(self, values: np.ndarray) -> np.ndarray:
        """Kernel-average numerators (1/n) sum_j K_{h,ij} values_j.

        values may be a length-n vector or an n x m matrix (column-wise).
        """
        values = np.asarray(values, dtype=float)
        if values.shape[0] != self.n:
            raise DataValidationError("values must have n rows")
        if self.kmat is not None:
            return self.kmat @ values
        out = np.empty_like(values, dtype=float)
        for start, krows in self._iter_kernel_blocks():
            out[start : start + krows.shape[0]] = krows @ values
        return out

    def _iter_kernel_blocks(self):
        zs = self.z_standardized
        h = self.bandwidth
        inv_nhq = 1.0 / (self.n * h**self.q)
        for start in range(0, self.n, self.block_size):
            stop = min(start + self.block_size, self.n)
            diff = (zs[start:stop, None, :] - zs[None, :, :]) / h
            yield start, gaussian_product_kernel(diff) * inv_nhq

    def kernel_row(self, i: int) -> np.ndarray:
        """Row i of (1/n) K_{h,ij}, regenerated when in blocked mode."""
        if self.kmat is not None:
            return self.kmat[i]
        diff = (self.z_standardized[i] - self.z_standardized) / self.bandwidth
        return gaussian_product_kernel(diff) / (self.n * self.bandwidth**self.q)


def build_kernel_plan(
    data: Dataset,
    bandwidth: BandwidthRule | float | None = None,
    standardize: bool = True,
    blocked_threshold: int = BLOCKED_MODE_THRESHOLD,
    block_size: int = BLOCK_SIZE,
) -> KernelPlan:
    """Standardize z, resolve the bandwidth, and cache the nuisance smooths.

    Inference-grade theory wants the bandwidth exponent inside (1/4, 1/q);
    a rule outside that range triggers a warning, not an error.
    """
    n, q = data.n, data.q
    if bandwidth is None:
        bandwidth = BandwidthRule()
    if isinstance(bandwidth, BandwidthRule):
        h = bandwidth.resolve(n)
        alpha = 1.0 / bandwidth.exponent
        if q >= 4 or not (0.25 < alpha < 1.0 / q):
            warnings.warn(
                "bandwidth exponent outside the inference-grade range (1/4, 1/q)",
                stacklevel=2,
            )
    else:
        h = float(bandwidth)
    if h <= 0.0:
        raise DataValidationError("bandwidth must be positive")

    if standardize and n > 1:
        scale = np.std(data.z, axis=0)
        if np.any(scale <= 0.0):
            raise DataValidationError("degenerate smoothing covariate: zero variance column")
        zs = data.z / scale
    else:
        scale = np.ones(q)
        zs = np.array(data.z, dtype=float)

    kmat = None
    if n <= blocked_threshold:
        diff = (zs[:, None, :] - zs[None, :, :]) / h
        kmat = gaussian_product_kernel(diff) / (n * h**q)
    plan = KernelPlan(
        bandwidth=h,
        z_standardized=zs,
        z_scale=np.asarray(scale, dtype=float),
        fz_hat=np.empty(0),
        xfz_hat=np.empty(0),
        kmat=kmat,
        block_size=block_size,
    )
    plan.fz_hat = plan.smooth(np.ones(n))
    plan.xfz_hat = plan.smooth(data.x_all)
    return plan


def smooth_transform(plan: KernelPlan, data: Dataset, lam: float, order: int = 0) -> np.ndarray:
    """Numerators (1/n) sum_j D^(order) T(Y_j, lambda) K_{h,ij}."""
    t = box_cox_derivative(data.y, lam, order)
    return plan.smooth(t)


def yhat_vector(plan: KernelPlan, data: Dataset, lam: float, order: int = 0) -> np.ndarray:
    """Density-weighted residual-from-smooth of the transformed response.

    Component i is D^(order) T(Y_i, lambda) fz_hat_i minus the corresponding
    kernel numerator; no division by the density estimate takes place.
    """
    t = box_cox_derivative(data.y, lam, order)
    return t * plan.fz_hat - plan.smooth(t)


def yhat_columns(plan: KernelPlan, tmat: np.ndarray) -> np.ndarray:
    """Vectorized yhat over many columns of already-transformed responses."""
    return tmat * plan.fz_hat[:, None] - plan.smooth(tmat)


def xhat_matrix(plan: KernelPlan, data: Dataset) -> np.ndarray:
    """Density-weighted residual-from-smooth of the regressors, cached."""
    if plan._xhat is None:
        plan._xhat = data.x_all * plan.fz_hat[:, None] - plan.xfz_hat
    return plan._xhat


def default_m_bandwidth(n: int, q: int) -> float:
    """Residual-smoothing default: n**(-1/3.5) for q = 1, n**(-1/6) otherwise."""
    return float(n) ** (-1.0 / 3.5) if q == 1 else float(n) ** (-1.0 / 6.0)


def nw_regress(
    residuals: np.ndarray,
    plan: KernelPlan,
    eval_points: np.ndarray,
    bandwidth_m: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Classic Nadaraya-Watson ratio smoother of residuals at new points.

    eval_points are on the original z scale and are standardized with the
    plan's scale. Returns (m_hat, supported); points whose denominator falls
    below 1e-12 lie outside the data support and are flagged unsupported with
    a NaN estimate.
    """
    residuals = np.asarray(residuals, dtype=float)
    pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
    if pts.shape[1] != plan.q:
        raise DataValidationError("eval_points must have q columns")
    h = default_m_bandwidth(plan.n, plan.q) if bandwidth_m is None else float(bandwidth_m)
    if h <= 0.0:
        raise DataValidationError("bandwidth must be positive")
    pts_std = pts / plan.z_scale
    m_hat = np.empty(pts.shape[0])
    supported = np.ones(pts.shape[0], dtype=bool)
    block = max(1, int(2**22 // max(plan.n, 1)))
    for start in range(0, pts.shape[0], block):
        stop = min(start + block, pts.shape[0])
        diff = (pts_std[start:stop, None, :] - plan.z_standardized[None, :, :]) / h
        w = gaussian_product_kernel(diff)
        denom = w.sum(axis=1)
        ok = denom > 1e-12
        numer = w @ residuals
        m_hat[start:stop] = np.where(ok, numer / np.where(ok, denom, 1.0), np.nan)
        supported[start:stop] = ok
    return m_hat, supported
