"""Discrepancy weight matrix and derived operators, exposed matrix-free.

The pairwise weight between observations i and j is
exp(-sum_k d_k (w_ik - w_jk)^2) over continuous coordinates (regressors and
smoothing covariates) times an exact-match indicator over the discrete
regressor columns. The centering operator and the regressor annihilator are
never formed; only their action on vectors is exposed, since products of the
form (matrix)' (operator) suffice for every downstream quantity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from smoothmd.errors import DataValidationError, NumericalError
from smoothmd.kernels import BLOCK_SIZE, BLOCKED_MODE_THRESHOLD, Dataset

D_LOWER_BOUND = 1e-4
D_UPPER_BOUND = 1e4
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class WeightConfig:
    """Choice of the diagonal discrepancy parameters d.

    rule:
      "half_inv_var" (default) -- d_k = 1/(2 sd_k^2), i.e. the exponent is
        half the squared standardized distance; invariant to units.
      "sd" -- d_k = sd_k, the literal componentwise standard deviation.
    d_cont overrides the rule with explicit per-column values.
    Discrete regressor columns always contribute exact-match indicators.
    Resolved entries are clamped to [d_lower, d_upper].
    """

    rule: str = "half_inv_var"
    d_cont: np.ndarray | None = None
    d_lower: float = D_LOWER_BOUND
    d_upper: float = D_UPPER_BOUND

    def resolve(self, w_cont: np.ndarray) -> np.ndarray:
        if self.d_lower <= 0 or self.d_lower >= self.d_upper:
            raise DataValidationError("d bounds must satisfy 0 < d_lower < d_upper")
        if self.d_cont is not None:
            d = np.asarray(self.d_cont, dtype=float)
            if d.shape != (w_cont.shape[1],):
                raise DataValidationError("explicit d vector has wrong length")
            if np.any(d < self.d_lower) or np.any(d > self.d_upper):
                raise DataValidationError("explicit d entries outside allowed bounds")
            return d
        sd = np.std(w_cont, axis=0)
        if np.any(sd <= 0.0):
            raise DataValidationError(
                "constant continuous covariate column; provide explicit d"
            )
        if self.rule == "half_inv_var":
            d = 1.0 / (2.0 * sd**2)
        elif self.rule == "sd":
            d = sd
        else:
            raise DataValidationError(f"unknown weight rule {self.rule!r}")
        return np.clip(d, self.d_lower, self.d_upper)


@dataclass
class WeightOperator:
    """Matrix-free access to the discrepancy weights and the centering operator.

    omega / omega_x / omega_z are materialized for samples up to the blocked
    threshold and regenerated in row blocks above it. omega_x carries the
    discrete indicators, so omega = omega_x * omega_z elementwise.
    """

    w_cont: np.ndarray
    w_disc: np.ndarray
    d: np.ndarray
    n_x_cont: int
    blocked: bool
    block_size: int = BLOCK_SIZE
    omega: np.ndarray | None = field(default=None, repr=False)
    omega_one: np.ndarray = field(default=None, repr=False)
    one_omega_one: float = 0.0

    @property
    def n(self) -> int:
        return self.w_cont.shape[0]

    def _block(self, start: int, stop: int, which: str = "full") -> np.ndarray:
        """Rows [start, stop) of omega ("full"), omega_x or omega_z."""
        if which == "x":
            cols = slice(0, self.n_x_cont)
            disc = True
        elif which == "z":
            cols = slice(self.n_x_cont, self.w_cont.shape[1])
            disc = False
        else:
            cols = slice(0, self.w_cont.shape[1])
            disc = True
        wc = self.w_cont[:, cols]
        d = self.d[cols]
        diff = wc[start:stop, None, :] - wc[None, :, :]
        expo = np.einsum("ijk,k->ij", diff * diff, d)
        out = np.exp(-expo)
        if disc and self.w_disc.shape[1]:
            eq = np.all(
                self.w_disc[start:stop, None, :] == self.w_disc[None, :, :], axis=-1
            )
            out *= eq
        return out

    def _matrix(self, which: str = "full") -> np.ndarray:
        """Dense n x n weights; only valid when not in blocked mode."""
        if self.blocked:
            raise NumericalError("dense weight matrix not available in blocked mode")
        if which == "full" and self.omega is not None:
            return self.omega
        return self._block(0, self.n, which)

    def apply_omega(self, v: np.ndarray) -> np.ndarray:
        """Omega @ v for a vector or column-stacked matrix v."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DataValidationError("length mismatch in weight operator apply")
        if self.omega is not None:
            return self.omega @ v
        out = np.empty_like(v, dtype=float)
        for start in range(0, self.n, self.block_size):
            stop = min(start + self.block_size, self.n)
            out[start:stop] = self._block(start, stop) @ v
        return out

    def apply_dn(self, v: np.ndarray) -> np.ndarray:
        """Centering operator: Omega v - Omega 1 (1' Omega v) / (1' Omega 1)."""
        ov = self.apply_omega(v)
        # 1' Omega v = (Omega 1)' v by symmetry
        coef = self.omega_one @ np.asarray(v, dtype=float) / self.one_omega_one
        if ov.ndim == 2:
            return ov - np.outer(self.omega_one, coef)
        return ov - coef * self.omega_one

    def phi_t_apply(self, mat: np.ndarray, star: bool = False) -> np.ndarray:
        """Phi' @ mat (or Omega @ mat when star), without forming Phi.

        Phi_ij = (OmegaX_ij - rowmean_i(OmegaX)) OmegaZ_ij, so
        (Phi' mat)_j = (Omega mat)_j - (OmegaZ (rowmean * mat))_j.
        """
        mat = np.asarray(mat, dtype=float)
        if star:
            return self.apply_omega(mat)
        if not self.blocked:
            omega_x = self._matrix("x")
            omega_z = self._matrix("z")
            rowmean = omega_x.mean(axis=1)
            return self.apply_omega(mat) - omega_z.T @ (rowmean[:, None] * mat)
        rowmean = np.empty(self.n)
        for start in range(0, self.n, self.block_size):
            stop = min(start + self.block_size, self.n)
            rowmean[start:stop] = self._block(start, stop, "x").mean(axis=1)
        out = self.apply_omega(mat)
        scaled = rowmean[:, None] * mat
        for start in range(0, self.n, self.block_size):
            stop = min(start + self.block_size, self.n)
            # symmetric OmegaZ: row block transposed acts as column block
            out -= self._block(start, stop, "z").T @ scaled[start:stop]
        return out


def build_weight_operator(
    data: Dataset,
    config: WeightConfig | None = None,
    blocked_threshold: int = BLOCKED_MODE_THRESHOLD,
    block_size: int = BLOCK_SIZE,
) -> WeightOperator:
    """Resolve d, assemble (or defer) the weights, and cache Omega 1."""
    if config is None:
        config = WeightConfig()
    w_cont = np.hstack([data.x_cont, data.z])
    if w_cont.shape[1] == 0 and data.x_disc.shape[1] == 0:
        raise DataValidationError("no covariates available for discrepancy weights")
    d = config.resolve(w_cont) if w_cont.shape[1] else np.empty(0)
    op = WeightOperator(
        w_cont=w_cont,
        w_disc=np.asarray(data.x_disc),
        d=d,
        n_x_cont=data.p_cont,
        blocked=data.n > blocked_threshold,
        block_size=block_size,
    )
    if not op.blocked:
        op.omega = op._block(0, data.n)
    ones = np.ones(data.n)
    op.omega_one = op.apply_omega(ones)
    op.one_omega_one = float(ones @ op.omega_one)
    return op


@dataclass
class DesignCache:
    """Projections of the partialled design through the centering operator.

    Caches M Xhat and the Cholesky factor of Xhat' M Xhat, where M is the
    centering operator when an intercept is profiled out and Omega otherwise.
    Shared by the grid search, the variance estimator and the tests.
    """

    op: WeightOperator
    xhat: np.ndarray
    use_gamma: bool
    mx: np.ndarray = field(init=False)
    gram: np.ndarray = field(init=False)
    _cho: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.xhat = np.asarray(self.xhat, dtype=float)
        self.mx = self.apply_m(self.xhat)
        self.gram = self.xhat.T @ self.mx
        self.gram = 0.5 * (self.gram + self.gram.T)
        eigs = np.linalg.eigvalsh(self.gram)
        if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
            raise NumericalError("collinear partialled covariates")
        self._cho = cho_factor(self.gram, lower=True)

    def apply_m(self, v: np.ndarray) -> np.ndarray:
        return self.op.apply_dn(v) if self.use_gamma else self.op.apply_omega(v)

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self._cho, rhs)

    def quad_bn(self, u: np.ndarray, v: np.ndarray, mv: np.ndarray | None = None) -> float:
        """u' Bhat v with Bhat = M - M X (X'MX)^{-1} X'M."""
        if mv is None:
            mv = self.apply_m(v)
        xu = self.mx.T @ u
        xv = self.mx.T @ v
        return float(u @ mv - xu @ self.solve_gram(xv))


def apply_dn(op: WeightOperator, v: np.ndarray) -> np.ndarray:
    """Centering-operator action; annihilates constant vectors exactly."""
    return op.apply_dn(v)


def quad_form_bn(op: WeightOperator, xhat: np.ndarray, u: np.ndarray, v: np.ndarray) -> float:
    """u' Bhat v for the intercept-profiled annihilator of xhat."""
    cache = DesignCache(op, xhat, use_gamma=True)
    return cache.quad_bn(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
