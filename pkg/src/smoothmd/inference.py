"""Sandwich covariance estimation and distance-metric tests.

The covariance of the profiled estimates is Vhat^{-1} Delta_hat Vhat^{-1}
where Vhat collects the curvature blocks and Delta_hat the influence
covariance with the nuisance-estimation correction. Distance-metric
statistics compare restricted and unrestricted minimized criteria; their
reference laws are weighted sums of independent chi-squares whose weights
are plug-in eigenvalue estimates, with quantiles and p-values obtained from
a seeded Monte Carlo mixture sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from smoothmd.errors import DataValidationError, NumericalError
from smoothmd.estimator import FitResult, ModelParts
from smoothmd.kernels import Dataset, KernelPlan, xhat_matrix, yhat_vector
from smoothmd.weights import CONDITION_LIMIT, DesignCache, WeightOperator

MIXTURE_DRAWS = 200_000
MIXTURE_SEED = 202406
_EIGEN_REL_FLOOR = 1e-12


@dataclass
class VarianceEstimate:
    """Sandwich pieces for (lambda, beta): vcov = v_hat^{-1} delta_hat v_hat^{-1}.

    vcov is the asymptotic covariance of sqrt(n) (theta_hat - theta_0);
    divide by n (see the se field) for standard errors of the estimates.
    """

    v_hat: np.ndarray
    delta_hat: np.ndarray
    vcov: np.ndarray
    mode: str
    gamma_mode: str
    n: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None) / self.n)


@dataclass
class TestResult:
    """Distance-metric test outcome at one nominal level."""

    statistic: float
    eigen_weights: np.ndarray
    critical_value: float
    p_value: float
    reject: bool
    restriction: str
    level: float


@dataclass
class InferenceContext:
    """Per-fit state shared by the variance estimator and all tests."""

    data: Dataset
    plan: KernelPlan
    op: WeightOperator
    fit: FitResult
    xhat: np.ndarray = field(init=False)
    cache: DesignCache = field(init=False)
    dy: np.ndarray = field(init=False)
    sigma2: np.ndarray = field(init=False)
    v_hat: np.ndarray = field(init=False)
    c_schur: float = field(init=False)
    _delta_cache: dict = field(init=False, default_factory=dict, repr=False)

    def __post_init__(self):
        n = self.data.n
        self.xhat = xhat_matrix(self.plan, self.data)
        self.cache = DesignCache(self.op, self.xhat, use_gamma=self.fit.use_gamma)
        self.dy = yhat_vector(self.plan, self.data, self.fit.lambda_hat, order=1)
        yh = yhat_vector(self.plan, self.data, self.fit.lambda_hat, order=0)
        dwr = yh - self.xhat @ self.fit.beta_hat  # density-weighted residual
        self.sigma2 = dwr**2
        mdy = self.cache.apply_m(self.dy)
        v11 = float(self.dy @ mdy) / n**2
        v12 = -(self.xhat.T @ mdy) / n**2
        v22 = self.cache.gram / n**2
        vh = np.empty((self.data.p + 1, self.data.p + 1))
        vh[0, 0] = v11
        vh[0, 1:] = v12
        vh[1:, 0] = v12
        vh[1:, 1:] = v22
        self.v_hat = 0.5 * (vh + vh.T)
        bbar = -self.v_hat[1:, 0]
        self.c_schur = float(v11 - bbar @ np.linalg.solve(v22, bbar))

    @property
    def gbar(self) -> np.ndarray:
        return self.v_hat[1:, 1:]

    @property
    def bbar(self) -> np.ndarray:
        """n^-2 Xhat' M dYhat."""
        return -self.v_hat[1:, 0]

    def v_inv(self, rhs: np.ndarray) -> np.ndarray:
        eigs = np.linalg.eigvalsh(self.v_hat)
        if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
            raise NumericalError("singular curvature matrix V")
        return np.linalg.solve(self.v_hat, rhs)

    def delta_hat(self, mode: str = "smoothmd") -> np.ndarray:
        if mode not in ("smoothmd", "smoothmd_star"):
            raise DataValidationError(f"unknown variance mode {mode!r}")
        if mode in self._delta_cache:
            return self._delta_cache[mode]
        n = self.data.n
        c_mat = np.column_stack([self.dy, -self.xhat])
        if self.fit.use_gamma:
            coef = (self.op.omega_one @ c_mat) / self.op.one_omega_one
            c_mat = c_mat - coef[None, :]
        w = self.op.phi_t_apply(c_mat, star=(mode == "smoothmd_star"))
        delta = (w.T @ (self.sigma2[:, None] * w)) / n**3
        delta = 0.5 * (delta + delta.T)
        self._delta_cache[mode] = delta
        return delta

    def set_sigma2(self, sigma2: np.ndarray) -> None:
        """Swap the conditional-variance plug-in; invalidates cached deltas."""
        self.sigma2 = np.asarray(sigma2, dtype=float)
        self._delta_cache.clear()

    def unrestricted_raw_min(self) -> float:
        """Yhat(lambda_hat)' Bhat Yhat(lambda_hat) from the fit's grid pass."""
        k = int(np.argmin(self.fit.objective_trace))
        return float(self.fit.raw_quad_trace[k])

    def raw_quad_at(self, lam: float) -> float:
        """Yhat(lam)' Bhat Yhat(lam), reusing the grid trace when possible."""
        hits = np.flatnonzero(np.abs(self.fit.grid - lam) < 1e-12)
        if hits.size:
            return float(self.fit.raw_quad_trace[hits[0]])
        yh = yhat_vector(self.plan, self.data, lam)
        return self.cache.quad_bn(yh, yh)

    def beta_and_pieces_at(self, lam: float):
        """(d0, a, beta) at a single lambda, from the grid trace when possible."""
        hits = np.flatnonzero(np.abs(self.fit.grid - lam) < 1e-12)
        if hits.size:
            k = hits[0]
            a = self.fit._a[:, k]
            return float(self.fit._d0[k]), a, self.cache.solve_gram(a)
        yh = yhat_vector(self.plan, self.data, lam)
        my = self.cache.apply_m(yh)
        a = self.xhat.T @ my
        return float(yh @ my), a, self.cache.solve_gram(a)


def make_context(
    fit: FitResult, plan: KernelPlan, weights: WeightOperator, data: Dataset
) -> InferenceContext:
    return InferenceContext(data=data, plan=plan, op=weights, fit=fit)


def context_from_parts(parts: ModelParts, fit: FitResult) -> InferenceContext:
    return InferenceContext(data=parts.data, plan=parts.plan, op=parts.op, fit=fit)


def eiker_white_sigma(fit: FitResult, plan: KernelPlan, data: Dataset) -> np.ndarray:
    """Squared density-weighted residuals (eps_i fz_i)^2 at the fitted values."""
    xhat = xhat_matrix(plan, data)
    yh = yhat_vector(plan, data, fit.lambda_hat)
    dwr = yh - xhat @ fit.beta_hat
    return dwr**2


def nw_conditional_sigma(fit: FitResult, plan: KernelPlan, data: Dataset) -> np.ndarray:
    """Leave-one-out kernel smooth of the squared density-weighted residuals.

    Alternative to the default plug-in; smooths (eps fz)^2 over z.
    """
    sq = eiker_white_sigma(fit, plan, data)
    n = plan.n
    smoothed = np.empty(n)
    for i in range(n):
        row = plan.kernel_row(i).copy()
        row[i] = 0.0
        tot = row.sum()
        smoothed[i] = row @ sq / tot if tot > 1e-300 else sq[i]
    return smoothed


def estimate_vcov(
    fit: FitResult,
    plan: KernelPlan,
    weights: WeightOperator,
    data: Dataset,
    mode: str = "smoothmd",
    sigma_estimator: str = "eiker_white",
    context: InferenceContext | None = None,
) -> VarianceEstimate:
    """Assemble the sandwich and attach covariance and standard errors to fit."""
    ctx = context or make_context(fit, plan, weights, data)
    if sigma_estimator == "nw":
        ctx.set_sigma2(nw_conditional_sigma(fit, plan, data))
    elif sigma_estimator != "eiker_white":
        raise DataValidationError(f"unknown sigma estimator {sigma_estimator!r}")
    delta = ctx.delta_hat(mode)
    vcov = ctx.v_inv(ctx.v_inv(delta).T)
    vcov = 0.5 * (vcov + vcov.T)
    est = VarianceEstimate(
        v_hat=ctx.v_hat,
        delta_hat=delta,
        vcov=vcov,
        mode=mode,
        gamma_mode="with" if fit.use_gamma else "without",
        n=data.n,
    )
    fit.vcov = vcov / data.n
    fit.se = est.se
    return est


def weighted_chisq_quantile(
    weights,
    dfs=None,
    level: float = 0.95,
    draws: int = MIXTURE_DRAWS,
    seed: int = MIXTURE_SEED,
):
    """Monte Carlo quantile of sum_k w_k chi2(df_k) plus a p-value closure.

    Deterministic for fixed seed. Returns (quantile, pvalue_fn).
    """
    if not (0.0 < level < 1.0):
        raise DataValidationError("level must be inside (0, 1)")
    if draws < 1:
        raise DataValidationError("draws must be positive")
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    if dfs is None:
        dfs = np.ones_like(w, dtype=int)
    dfs = np.atleast_1d(np.asarray(dfs, dtype=int))
    if w.shape != dfs.shape:
        raise DataValidationError("weights and dfs must have equal length")
    if np.any(w < 0.0) or np.any(dfs < 1):
        raise DataValidationError("weights must be nonnegative and dfs positive")
    keep = w > 0.0
    if not np.any(keep):
        def pvalue_zero(x: float) -> float:
            return 1.0 if x <= 0.0 else 0.0

        return 0.0, pvalue_zero
    rng = np.random.default_rng(seed)
    total = np.zeros(draws)
    for wk, dk in zip(w[keep], dfs[keep]):
        total += wk * rng.chisquare(dk, size=draws)
    total.sort()
    quantile = float(np.quantile(total, level))

    def pvalue(x: float) -> float:
        # fraction of mixture draws at or above x on the sorted sample
        idx = np.searchsorted(total, x, side="left")
        return float((draws - idx) / draws)

    return quantile, pvalue


def _positive_eigen_weights(m_mat: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Positive eigenvalues of m_mat @ delta via the symmetric square-root form."""
    vals, vecs = np.linalg.eigh(0.5 * (delta + delta.T))
    root = vecs @ (np.sqrt(np.clip(vals, 0.0, None))[:, None] * vecs.T)
    sym = root @ (0.5 * (m_mat + m_mat.T)) @ root
    eigs = np.linalg.eigvalsh(0.5 * (sym + sym.T))
    top = float(np.max(np.abs(eigs))) if eigs.size else 0.0
    eigs = eigs[eigs > _EIGEN_REL_FLOOR * max(top, 1e-300)]
    return np.sort(eigs)[::-1]


def _restriction_pieces(ctx: InferenceContext, r_mat: np.ndarray):
    """Shared restricted-test algebra on the normalized curvature blocks."""
    gbar = ctx.gbar
    ginv_rt = np.linalg.solve(gbar, r_mat.T)  # p x r
    core = r_mat @ ginv_rt  # R Gbar^-1 R'
    eigs = np.linalg.eigvalsh(0.5 * (core + core.T))
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
        raise DataValidationError("restriction matrix R is rank deficient")
    core_inv = np.linalg.inv(core)
    proj = ginv_rt @ core_inv @ ginv_rt.T  # Gbar^-1 R'(R Gbar^-1 R')^-1 R Gbar^-1
    return ginv_rt, core_inv, proj


def _validate_restriction(r_mat, c_vec, p: int):
    r_mat = np.atleast_2d(np.asarray(r_mat, dtype=float))
    c_vec = np.atleast_1d(np.asarray(c_vec, dtype=float))
    if r_mat.shape[0] == 0:
        return r_mat.reshape(0, p), c_vec.reshape(0)
    if r_mat.shape[1] != p:
        raise DataValidationError("restriction matrix must have p columns")
    if r_mat.shape[0] > p or c_vec.shape[0] != r_mat.shape[0]:
        raise DataValidationError("restriction dimensions are inconsistent")
    return r_mat, c_vec


def restricted_beta(
    ctx: InferenceContext, r_mat: np.ndarray, c_vec: np.ndarray, lam: float
) -> np.ndarray:
    """Slope estimate at lam satisfying R beta = c exactly."""
    r_mat, c_vec = _validate_restriction(r_mat, c_vec, ctx.data.p)
    _, _, beta = ctx.beta_and_pieces_at(lam)
    if r_mat.shape[0] == 0:
        return beta
    gram = ctx.cache.gram
    ginv_rt = np.linalg.solve(gram, r_mat.T)
    core = r_mat @ ginv_rt
    eigs = np.linalg.eigvalsh(0.5 * (core + core.T))
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
        raise DataValidationError("restriction matrix R is rank deficient")
    return beta - ginv_rt @ np.linalg.solve(core, r_mat @ beta - c_vec)


def _dm_result(
    ctx: InferenceContext,
    statistic: float,
    eigen_weights: np.ndarray,
    level: float,
    restriction: str,
    draws: int,
    seed: int,
) -> TestResult:
    statistic = max(float(statistic), 0.0)
    crit, pval = weighted_chisq_quantile(
        eigen_weights,
        np.ones(len(eigen_weights), dtype=int),
        1.0 - level,
        draws=draws,
        seed=seed,
    )
    p = pval(statistic) if statistic > 0.0 else 1.0
    return TestResult(
        statistic=statistic,
        eigen_weights=np.asarray(eigen_weights, dtype=float),
        critical_value=crit,
        p_value=p,
        reject=statistic > crit,
        restriction=restriction,
        level=level,
    )


def dm_lambda_test(
    fit: FitResult,
    plan: KernelPlan,
    weights: WeightOperator,
    data: Dataset,
    lambda_r: float,
    level: float = 0.10,
    mode: str = "smoothmd",
    context: InferenceContext | None = None,
    draws: int = MIXTURE_DRAWS,
    seed: int = MIXTURE_SEED,
) -> TestResult:
    """Distance-metric test of lambda = lambda_r.

    The statistic compares the raw (not s-standardized) minimized quadratic
    forms; its reference law is a single scaled chi-square(1).
    """
    if not (fit.grid[0] <= lambda_r <= fit.grid[-1]):
        raise DataValidationError("lambda_r lies outside the fitted grid interval")
    ctx = context or make_context(fit, plan, weights, data)
    n = data.n
    stat = (ctx.raw_quad_at(lambda_r) - ctx.unrestricted_raw_min()) / n
    delta = ctx.delta_hat(mode)
    vinv_delta_vinv = ctx.v_inv(ctx.v_inv(delta).T)
    w1 = float(vinv_delta_vinv[0, 0]) * ctx.c_schur
    return _dm_result(
        ctx, stat, np.array([max(w1, 0.0)]), level, f"lambda={lambda_r:g}", draws, seed
    )


def dm_beta_test(
    fit: FitResult,
    plan: KernelPlan,
    weights: WeightOperator,
    data: Dataset,
    r_mat: np.ndarray,
    c_vec: np.ndarray,
    level: float = 0.10,
    mode: str = "smoothmd",
    context: InferenceContext | None = None,
    draws: int = MIXTURE_DRAWS,
    seed: int = MIXTURE_SEED,
) -> TestResult:
    """Distance-metric test of R beta = c with lambda re-profiled under H0."""
    ctx = context or make_context(fit, plan, weights, data)
    r_mat, c_vec = _validate_restriction(r_mat, c_vec, data.p)
    n = data.n
    if r_mat.shape[0] == 0:
        return _dm_result(ctx, 0.0, np.empty(0), level, "R empty", draws, seed)

    # restricted criterion over the stored grid via the cached pieces
    gram = ctx.cache.gram
    a = fit._a
    beta_grid = ctx.cache.solve_gram(a)
    ginv_rt_raw = np.linalg.solve(gram, r_mat.T)
    core_raw = r_mat @ ginv_rt_raw
    eigs = np.linalg.eigvalsh(0.5 * (core_raw + core_raw.T))
    if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
        raise DataValidationError("restriction matrix R is rank deficient")
    gap = r_mat @ beta_grid - c_vec[:, None]
    beta_r = beta_grid - ginv_rt_raw @ np.linalg.solve(core_raw, gap)
    raw_restricted = (
        fit._d0
        - 2.0 * np.einsum("ij,ij->j", beta_r, a)
        + np.einsum("ij,ij->j", beta_r, gram @ beta_r)
    )
    tilted = raw_restricted * np.power(fit.s_used, -2.0 * fit.grid)
    k_r = int(np.argmin(tilted))
    stat = (raw_restricted[k_r] - ctx.unrestricted_raw_min()) / n

    delta = ctx.delta_hat(mode)
    _, _, proj = _restriction_pieces(ctx, r_mat)
    p = data.p
    t1 = np.zeros((p + 1, p + 1))
    t1[1:, 1:] = proj
    bbar = ctx.bbar
    gbar_inv_b = np.linalg.solve(ctx.gbar, bbar)
    c_r = ctx.c_schur + float(
        (r_mat @ gbar_inv_b) @ np.linalg.solve(r_mat @ np.linalg.solve(ctx.gbar, r_mat.T), r_mat @ gbar_inv_b)
    )
    bplus = np.linalg.inv(ctx.gbar) - proj
    v_r = np.concatenate([[1.0], bplus @ bbar]) / c_r
    e1 = np.zeros(p + 1)
    e1[0] = 1.0
    vinv_e1 = ctx.v_inv(e1)
    m_mat = t1 - c_r * np.outer(v_r, v_r) + ctx.c_schur * np.outer(vinv_e1, vinv_e1)
    eigen_weights = _positive_eigen_weights(m_mat, delta)
    label = f"Rbeta=c (r={r_mat.shape[0]})"
    return _dm_result(ctx, stat, eigen_weights, level, label, draws, seed)


def dm_joint_test(
    fit: FitResult,
    plan: KernelPlan,
    weights: WeightOperator,
    data: Dataset,
    r_mat: np.ndarray,
    c_vec: np.ndarray,
    lambda_r: float,
    level: float = 0.10,
    mode: str = "smoothmd",
    context: InferenceContext | None = None,
    draws: int = MIXTURE_DRAWS,
    seed: int = MIXTURE_SEED,
) -> TestResult:
    """Joint distance-metric test of R beta = c and lambda = lambda_r."""
    if not (fit.grid[0] <= lambda_r <= fit.grid[-1]):
        raise DataValidationError("lambda_r lies outside the fitted grid interval")
    ctx = context or make_context(fit, plan, weights, data)
    r_mat, c_vec = _validate_restriction(r_mat, c_vec, data.p)
    n = data.n
    d0, a, beta = ctx.beta_and_pieces_at(lambda_r)
    gram = ctx.cache.gram
    if r_mat.shape[0]:
        ginv_rt_raw = np.linalg.solve(gram, r_mat.T)
        core_raw = r_mat @ ginv_rt_raw
        eigs = np.linalg.eigvalsh(0.5 * (core_raw + core_raw.T))
        if eigs[0] <= 0.0 or eigs[-1] / eigs[0] > CONDITION_LIMIT:
            raise DataValidationError("restriction matrix R is rank deficient")
        beta_r = beta - ginv_rt_raw @ np.linalg.solve(core_raw, r_mat @ beta - c_vec)
    else:
        beta_r = beta
    raw_restricted = d0 - 2.0 * float(beta_r @ a) + float(beta_r @ (gram @ beta_r))
    stat = (raw_restricted - ctx.unrestricted_raw_min()) / n

    delta = ctx.delta_hat(mode)
    p = data.p
    t1 = np.zeros((p + 1, p + 1))
    if r_mat.shape[0]:
        _, _, proj = _restriction_pieces(ctx, r_mat)
        t1[1:, 1:] = proj
    e1 = np.zeros(p + 1)
    e1[0] = 1.0
    vinv_e1 = ctx.v_inv(e1)
    m_mat = t1 + ctx.c_schur * np.outer(vinv_e1, vinv_e1)
    eigen_weights = _positive_eigen_weights(m_mat, delta)
    label = f"Rbeta=c (r={r_mat.shape[0]}); lambda={lambda_r:g}"
    return _dm_result(ctx, stat, eigen_weights, level, label, draws, seed)


def z_test_rejections(
    fit: FitResult, est: VarianceEstimate, truth: np.ndarray, level: float
) -> np.ndarray:
    """Two-sided Wald rejections per parameter at the given level."""
    from scipy.stats import norm

    se = est.se
    theta = np.concatenate([[fit.lambda_hat], fit.beta_hat])
    zcrit = norm.ppf(1.0 - level / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(theta - truth) / se
    return z > zcrit
