"""Box-Cox power transform and its first three derivatives in lambda.

All functions are elementwise, accept scalars or arrays, and are numerically
stable across lambda = 0: the closed forms suffer catastrophic cancellation
of order lambda**-(k+1) near zero, so a truncated series in lambda takes over
on a region where the closed form loses digits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smoothmd.errors import DataValidationError

# Closed forms cancel at order (lambda*log y)**(k+1); below this product the
# series branch is more accurate than the closed form by many digits.
_SERIES_U_THRESHOLD = 1e-2
# |lambda| at or below this always uses the series, whatever the response.
_SERIES_LAMBDA_THRESHOLD = 1e-5
# Series in lambda truncated after this many terms beyond the leading one;
# at |lambda*log y| <= 1e-2 the truncation error is far below 1e-10.
_SERIES_TERMS = 8


@dataclass(frozen=True)
class LambdaInterval:
    """Admissible transform-parameter interval with lambda_min < 0 < lambda_max."""

    lambda_min: float
    lambda_max: float

    def __post_init__(self):
        if not (np.isfinite(self.lambda_min) and np.isfinite(self.lambda_max)):
            raise DataValidationError("lambda interval endpoints must be finite")
        if not (self.lambda_min < 0.0 < self.lambda_max):
            raise DataValidationError(
                "lambda interval must satisfy lambda_min < 0 < lambda_max"
            )

    @property
    def c_lambda(self) -> float:
        return max(abs(self.lambda_min), self.lambda_max)

    def contains(self, lam: float) -> bool:
        return self.lambda_min <= lam <= self.lambda_max


def _validate_y(y):
    y = np.asarray(y, dtype=float)
    if y.size:
        if not np.all(np.isfinite(y)) or np.min(y) <= 0.0:
            raise DataValidationError("response must be strictly positive")
    return y


def _series_sum(lam, logy, order: int):
    """Truncated expansion of d^order/dlam^order [(y**lam - 1)/lam] around 0.

    The transform equals sum_{j>=0} lam**j * L**(j+1) / (j+1)! with L = log y,
    so order-k differentiation gives sum_{j>=k} j!/(j-k)! lam**(j-k) L**(j+1)/(j+1)!.
    """
    out = np.zeros(np.broadcast(lam, logy).shape, dtype=float)
    for j in range(order, order + _SERIES_TERMS + 1):
        coeff = 1.0
        for i in range(j - order + 1, j + 1):
            coeff *= i
        for i in range(2, j + 2):
            coeff /= i
        out += coeff * lam ** (j - order) * logy ** (j + 1)
    return out


def _closed_forms(y, lam, order: int):
    logy = np.log(y)
    ylam = np.power(y, lam)
    core = ylam * (lam * logy - 1.0) + 1.0
    if order == 0:
        return (ylam - 1.0) / lam
    if order == 1:
        return core / lam**2
    if order == 2:
        return (ylam * lam**2 * logy**2 - 2.0 * core) / lam**3
    if order == 3:
        return (ylam * lam**2 * logy**2 * (lam * logy - 3.0) + 6.0 * core) / lam**4
    raise ValueError(f"unsupported derivative order {order}")


def _transform(y, lam, order: int):
    y = _validate_y(y)
    lam_arr = np.asarray(lam, dtype=float)
    logy = np.log(y)
    u = lam_arr * logy
    use_series = (np.abs(u) <= _SERIES_U_THRESHOLD) | (
        np.abs(lam_arr) <= _SERIES_LAMBDA_THRESHOLD
    )
    scalar = np.isscalar(lam) and y.ndim == 0
    if np.all(use_series):
        res = _series_sum(lam_arr, logy, order)
    elif not np.any(use_series):
        res = _closed_forms(y, lam_arr, order)
    else:
        safe_lam = np.where(use_series, 1.0, lam_arr)
        res = np.where(
            use_series,
            _series_sum(lam_arr, logy, order),
            _closed_forms(y, safe_lam, order),
        )
    return float(res) if scalar else res


def box_cox(y, lam):
    """T(y, lambda) = (y**lambda - 1)/lambda, log(y) at lambda = 0."""
    return _transform(y, lam, 0)


def box_cox_d1(y, lam):
    """First lambda-derivative of the transform; nonnegative for all inputs."""
    return _transform(y, lam, 1)


def box_cox_d2(y, lam):
    """Second lambda-derivative; its sign equals the sign of log(y)."""
    return _transform(y, lam, 2)


def box_cox_d3(y, lam):
    """Third lambda-derivative; nonnegative for all inputs."""
    return _transform(y, lam, 3)


def box_cox_derivative(y, lam, order: int):
    """Derivative of the transform of the requested order (0 through 3)."""
    if order not in (0, 1, 2, 3):
        raise ValueError("order must be 0, 1, 2 or 3")
    return _transform(y, lam, order)


def inverse_box_cox(u, lam):
    """Map a transformed value back to the response scale.

    Requires lam*u + 1 > 0 when lam != 0; exp(u) at lam = 0.
    """
    u = np.asarray(u, dtype=float)
    if lam == 0.0:
        return np.exp(u)
    base = lam * u + 1.0
    if np.any(base <= 0.0):
        raise DataValidationError("inverse transform undefined: lambda*u + 1 <= 0")
    return base ** (1.0 / lam)
