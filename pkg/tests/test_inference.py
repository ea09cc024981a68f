import numpy as np
import pytest
from scipy.stats import chi2

from smoothmd.errors import DataValidationError
from smoothmd.estimator import EstimatorConfig, LambdaGrid, prepare, _fit_prepared
from smoothmd.inference import (
    dm_beta_test,
    dm_joint_test,
    dm_lambda_test,
    eiker_white_sigma,
    estimate_vcov,
    make_context,
    nw_conditional_sigma,
    restricted_beta,
    weighted_chisq_quantile,
)
from smoothmd.kernels import build_kernel_plan, xhat_matrix, yhat_vector
from smoothmd.simulation import DgpSpec, generate
from smoothmd.weights import build_weight_operator
from tests.conftest import dense_dn, dense_omega, make_dataset


def fitted(model_id=2, n=120, seed=0, step=0.05, use_gamma=True, dummy_count=4):
    data, truth = generate(
        DgpSpec(model_id=model_id, n=n, seed=seed, dummy_count=dummy_count)
    )
    config = EstimatorConfig(
        lambda_grid=LambdaGrid(truth.lambda0 - 0.8, truth.lambda0 + 0.8, step),
        use_gamma=use_gamma,
    )
    parts = prepare(data, config)
    fit = _fit_prepared(parts, config)
    return data, truth, parts, fit


def dense_delta(data, op, fit, plan, use_gamma, star=False):
    """Reference assembly of the influence covariance, all matrices explicit."""
    n = data.n
    omega_x = op._block(0, n, "x")
    omega_z = op._block(0, n, "z")
    omega = omega_x * omega_z
    ones = np.ones(n)
    if use_gamma:
        d_inf = np.eye(n) - np.outer(omega @ ones, ones) / (ones @ omega @ ones)
    else:
        d_inf = np.eye(n)
    if star:
        phi = omega
    else:
        phi_x = omega_x - omega_x.mean(axis=1)[:, None]
        phi = phi_x * omega_z
    xh = xhat_matrix(plan, data)
    dy = yhat_vector(plan, data, fit.lambda_hat, order=1)
    c = np.column_stack([dy, -xh])
    yh = yhat_vector(plan, data, fit.lambda_hat)
    sigma = np.diag((yh - xh @ fit.beta_hat) ** 2)
    return c.T @ d_inf @ phi @ sigma @ phi.T @ d_inf.T @ c / n**3


def dense_vhat(data, op, fit, plan, use_gamma):
    n = data.n
    omega = op._block(0, n, "full")
    mat = dense_dn(omega) if use_gamma else omega
    xh = xhat_matrix(plan, data)
    dy = yhat_vector(plan, data, fit.lambda_hat, order=1)
    v = np.empty((data.p + 1, data.p + 1))
    v[0, 0] = dy @ mat @ dy
    v[0, 1:] = -(dy @ mat @ xh)
    v[1:, 0] = v[0, 1:]
    v[1:, 1:] = xh.T @ mat @ xh
    return v / n**2


def test_eiker_white_zero_for_perfect_fit():
    from tests.test_estimator import noiseless_dataset

    data, beta0, lam0 = noiseless_dataset(n=50, seed=1)
    plan = build_kernel_plan(data)
    op = build_weight_operator(data)
    config = EstimatorConfig(lambda_grid=LambdaGrid(lam0 - 0.2, lam0 + 0.2, 0.05))
    parts = prepare(data, config)
    fit = _fit_prepared(parts, config)
    sig = eiker_white_sigma(fit, parts.plan, data)
    assert np.max(sig) <= 1e-12


def test_eiker_white_hand_computation():
    data = make_dataset(n=3, p_cont=1, q=1, seed=2)
    plan = build_kernel_plan(data)
    op = build_weight_operator(data)
    config = EstimatorConfig(lambda_grid=LambdaGrid(-0.2, 0.4, 0.2))
    parts = prepare(data, config)
    fit = _fit_prepared(parts, config)
    yh = yhat_vector(plan, data, fit.lambda_hat)
    xh = xhat_matrix(plan, data)
    by_hand = np.array(
        [(yh[i] - xh[i] @ fit.beta_hat) ** 2 for i in range(3)]
    )
    np.testing.assert_allclose(eiker_white_sigma(fit, parts.plan, data), by_hand, atol=1e-12)


def test_eiker_white_matches_error_variance():
    # Model 2 is homoskedastic with Var(eps) = 1/9; the mean of
    # sigma2 / fz^2 should recover it up to smoothing bias
    vals = []
    for s in range(50):
        data, truth, parts, fit = fitted(n=1000, seed=400 + s, step=0.01)
        sig = eiker_white_sigma(fit, parts.plan, data)
        vals.append(np.mean(sig / parts.plan.fz_hat**2))
    assert 0.08 <= np.mean(vals) <= 0.15


@pytest.mark.parametrize("use_gamma", [True, False])
@pytest.mark.parametrize("mode", ["smoothmd", "smoothmd_star"])
def test_delta_matches_dense_assembly(use_gamma, mode):
    data, truth, parts, fit = fitted(n=8, seed=3, step=0.2, use_gamma=use_gamma)
    ctx = make_context(fit, parts.plan, parts.op, data)
    delta = ctx.delta_hat(mode)
    ref = dense_delta(data, parts.op, fit, parts.plan, use_gamma, star=(mode == "smoothmd_star"))
    np.testing.assert_allclose(delta, 0.5 * (ref + ref.T), rtol=1e-10, atol=1e-18)


@pytest.mark.parametrize("use_gamma", [True, False])
def test_vhat_matches_dense_assembly(use_gamma):
    data, truth, parts, fit = fitted(n=8, seed=4, step=0.2, use_gamma=use_gamma)
    ctx = make_context(fit, parts.plan, parts.op, data)
    ref = dense_vhat(data, parts.op, fit, parts.plan, use_gamma)
    np.testing.assert_allclose(ctx.v_hat, 0.5 * (ref + ref.T), rtol=1e-10)


def test_vcov_sandwich_properties():
    data, truth, parts, fit = fitted(n=200, seed=5, step=0.02)
    est = estimate_vcov(fit, parts.plan, parts.op, data)
    assert np.max(np.abs(est.vcov - est.vcov.T)) <= 1e-10
    assert np.all(np.diag(est.vcov) >= 0.0)
    eigs = np.linalg.eigvalsh(est.vcov)
    assert eigs[0] >= -1e-8 * max(eigs[-1], 1.0)
    assert fit.vcov is not None and fit.se is not None
    np.testing.assert_allclose(fit.se, est.se)


def test_star_variant_close_to_full():
    data, truth, parts, fit = fitted(n=500, seed=6, step=0.01)
    ctx = make_context(fit, parts.plan, parts.op, data)
    full = estimate_vcov(fit, parts.plan, parts.op, data, context=ctx)
    star = estimate_vcov(fit, parts.plan, parts.op, data, mode="smoothmd_star", context=ctx)
    rel = np.abs(star.se - full.se) / full.se
    assert np.max(rel) <= 0.15


def test_nw_sigma_estimator_runs():
    data, truth, parts, fit = fitted(n=80, seed=7, step=0.1)
    sig = nw_conditional_sigma(fit, parts.plan, data)
    assert sig.shape == (80,) and np.all(sig >= 0.0)
    est = estimate_vcov(fit, parts.plan, parts.op, data, sigma_estimator="nw")
    assert np.all(np.diag(est.vcov) >= 0.0)


def test_dm_lambda_zero_at_estimate():
    data, truth, parts, fit = fitted(n=100, seed=8, step=0.05)
    res = dm_lambda_test(fit, parts.plan, parts.op, data, fit.lambda_hat, level=0.10)
    assert res.statistic == 0.0
    assert res.p_value >= 0.5
    assert not res.reject


def test_dm_lambda_outside_grid_rejected():
    data, truth, parts, fit = fitted(n=60, seed=9, step=0.1)
    with pytest.raises(DataValidationError, match="grid"):
        dm_lambda_test(fit, parts.plan, parts.op, data, fit.grid[-1] + 1.0)


def test_restricted_beta_identities():
    data, truth, parts, fit = fitted(model_id=4, n=150, seed=10, step=0.1)
    ctx = make_context(fit, parts.plan, parts.op, data)
    p = data.p
    lam = fit.lambda_hat
    _, _, beta = ctx.beta_and_pieces_at(lam)
    # no binding restriction
    r1 = np.zeros((1, p))
    r1[0, 0] = 1.0
    out = restricted_beta(ctx, r1, r1 @ beta, lam)
    np.testing.assert_allclose(out, beta, atol=1e-12)
    # fully pinned to zero
    out0 = restricted_beta(ctx, np.eye(p), np.zeros(p), lam)
    np.testing.assert_allclose(out0, 0.0, atol=1e-10)
    # R beta_R = c holds for a generic restriction
    rng = np.random.default_rng(11)
    r2 = rng.normal(size=(2, p))
    c2 = rng.normal(size=2)
    br = restricted_beta(ctx, r2, c2, lam)
    scale = max(1.0, float(np.max(np.abs(br))))
    np.testing.assert_allclose(r2 @ br, c2, atol=1e-9 * scale)


def test_restricted_beta_matches_elimination():
    # constrained GLS solved by eliminating one coordinate
    data, truth, parts, fit = fitted(model_id=4, n=60, seed=12, step=0.2)
    data8 = data
    ctx = make_context(fit, parts.plan, parts.op, data8)
    p = data8.p
    lam = fit.lambda_hat
    r = np.zeros((1, p))
    r[0, 0] = 1.0
    c = np.array([0.25])  # pin beta_1 = 0.25 and solve for the rest
    d0, a, _ = ctx.beta_and_pieces_at(lam)
    gram = ctx.cache.gram
    free = slice(1, p)
    rhs = a[free] - gram[free, 0] * 0.25
    beta_free = np.linalg.solve(gram[free, free], rhs)
    expected = np.concatenate([[0.25], beta_free])
    np.testing.assert_allclose(
        restricted_beta(ctx, r, c, lam), expected, atol=1e-10
    )


def test_restriction_rank_validation():
    data, truth, parts, fit = fitted(model_id=4, n=80, seed=13, step=0.2)
    ctx = make_context(fit, parts.plan, parts.op, data)
    p = data.p
    r = np.zeros((2, p))
    r[0, 0] = 1.0
    r[1, 0] = 2.0  # linearly dependent rows
    with pytest.raises(DataValidationError, match="rank"):
        restricted_beta(ctx, r, np.array([1.0, 2.0]), fit.lambda_hat)


def test_dm_beta_noiseless_full_restriction():
    from tests.test_estimator import noiseless_dataset

    data, beta0, lam0 = noiseless_dataset(n=40, seed=14)
    config = EstimatorConfig(lambda_grid=LambdaGrid(lam0 - 0.3, lam0 + 0.3, 0.1))
    parts = prepare(data, config)
    fit = _fit_prepared(parts, config)
    ctx = make_context(fit, parts.plan, parts.op, data)
    res = dm_beta_test(
        fit, parts.plan, parts.op, data, np.eye(1), np.array([beta0]),
        level=0.10, context=ctx,
    )
    assert res.statistic >= 0.0
    # dense evaluation of both criterion values at the restricted optimum
    omega = dense_omega(data, parts.op.d)
    dn = dense_dn(omega)
    xh = parts.xhat
    raws = []
    for lam in fit.grid:
        yh = yhat_vector(parts.plan, data, lam)
        resid = yh - xh[:, 0] * beta0
        raws.append(resid @ dn @ resid)
    raws = np.array(raws)
    tilt = fit.s_used ** (-2.0 * fit.grid)
    k = int(np.argmin(raws * tilt))
    dense_stat = (raws[k] - ctx.unrestricted_raw_min()) / data.n
    assert res.statistic == pytest.approx(max(dense_stat, 0.0), abs=1e-9)


def test_dm_beta_empty_restriction_degenerates():
    data, truth, parts, fit = fitted(n=80, seed=15, step=0.1)
    res = dm_beta_test(fit, parts.plan, parts.op, data, np.zeros((0, 1)), np.zeros(0))
    assert res.statistic == 0.0
    assert not res.reject


def test_dm_joint_reduces_to_dm_lambda_without_beta_restriction():
    data, truth, parts, fit = fitted(n=90, seed=16, step=0.05)
    ctx = make_context(fit, parts.plan, parts.op, data)
    lam_r = fit.grid[10]
    joint = dm_joint_test(
        fit, parts.plan, parts.op, data, np.zeros((0, 1)), np.zeros(0), lam_r, context=ctx
    )
    lam_only = dm_lambda_test(fit, parts.plan, parts.op, data, lam_r, context=ctx)
    assert joint.statistic == pytest.approx(lam_only.statistic, abs=1e-10)
    np.testing.assert_allclose(joint.eigen_weights, lam_only.eigen_weights, rtol=1e-8)


def test_dm_joint_at_fitted_point_bounded_by_parts():
    data, truth, parts, fit = fitted(n=60, seed=17, step=0.1)
    ctx = make_context(fit, parts.plan, parts.op, data)
    r = np.eye(1)
    c = r @ fit.beta_hat
    joint = dm_joint_test(
        fit, parts.plan, parts.op, data, r, c, fit.lambda_hat, context=ctx
    )
    beta_part = dm_beta_test(fit, parts.plan, parts.op, data, r, c, context=ctx)
    lam_part = dm_lambda_test(fit, parts.plan, parts.op, data, fit.lambda_hat, context=ctx)
    assert joint.statistic >= 0.0
    assert joint.statistic <= beta_part.statistic + lam_part.statistic + 1e-8


def test_dm_statistics_nonnegative_across_draws():
    for seed in range(5):
        data, truth, parts, fit = fitted(n=80, seed=40 + seed, step=0.05)
        ctx = make_context(fit, parts.plan, parts.op, data)
        res_l = dm_lambda_test(
            fit, parts.plan, parts.op, data, truth.lambda0, context=ctx
        )
        res_b = dm_beta_test(
            fit, parts.plan, parts.op, data, np.eye(1), np.array([truth.beta[0]]),
            context=ctx,
        )
        assert res_l.statistic >= 0.0 and res_b.statistic >= 0.0
        assert np.all(res_l.eigen_weights >= 0.0)
        assert np.all(res_b.eigen_weights >= 0.0)
        assert 0.0 <= res_l.p_value <= 1.0
        assert res_l.reject == (res_l.statistic > res_l.critical_value)


def test_weighted_chisq_known_quantile():
    q, pvalue = weighted_chisq_quantile([1.0], [1], 0.95, draws=1_000_000)
    assert q == pytest.approx(chi2.ppf(0.95, 1), abs=0.03)
    assert pvalue(q) == pytest.approx(0.05, abs=0.002)
    assert pvalue(0.0) == 1.0


def test_weighted_chisq_zero_and_scaling():
    q0, p0 = weighted_chisq_quantile([0.0], [1], 0.9)
    assert q0 == 0.0 and p0(0.0) == 1.0 and p0(0.1) == 0.0
    q1, _ = weighted_chisq_quantile([1.0], [1], 0.9, draws=200_000, seed=42)
    q2, _ = weighted_chisq_quantile([2.0], [1], 0.9, draws=200_000, seed=42)
    assert q2 == pytest.approx(2.0 * q1, rel=1e-12)


def test_weighted_chisq_validation():
    with pytest.raises(DataValidationError):
        weighted_chisq_quantile([1.0], [1], 1.5)
    with pytest.raises(DataValidationError):
        weighted_chisq_quantile([-1.0], [1], 0.9)
    with pytest.raises(DataValidationError):
        weighted_chisq_quantile([1.0], [0], 0.9)
