import numpy as np
import pytest

from smoothmd.errors import DataValidationError, NumericalError
from smoothmd.estimator import LambdaGrid
from smoothmd.kernels import Dataset
from smoothmd.nl2sls import Nl2slsConfig, default_instruments, nl2sls_fit
from smoothmd.simulation import DgpSpec, generate
from smoothmd.transform import box_cox, inverse_box_cox


def parametric_dataset(n=200, lam0=0.5, beta0=1.0, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, size=(n, 1))
    x = 0.4 * z[:, 0] + rng.uniform(-1.0, 1.0, size=n)
    m = 1.0 / (1.0 + np.exp(-z[:, 0])) + 2.0
    u = 0.3 + beta0 * x + m + noise * rng.normal(size=n)
    y = inverse_box_cox(u, lam0)
    data = Dataset(y=y, x_cont=x[:, None], x_disc=np.empty((n, 0)), z=z)
    return data, m


def test_noiseless_recovery_to_grid_resolution():
    data, m = parametric_dataset(lam0=0.5, beta0=1.0)
    config = Nl2slsConfig(lambda_grid=LambdaGrid(-0.3, 1.3, 0.01))
    res = nl2sls_fit(data, m, config)
    assert res.lambda_hat == pytest.approx(0.5, abs=1e-12)
    assert res.beta_hat[0] == pytest.approx(1.0, abs=1e-8)
    assert res.alpha_hat == pytest.approx(0.3, abs=1e-8)
    assert res.delta_hat == pytest.approx(1.0, abs=1e-8)
    assert np.min(res.criterion_trace) >= -1e-10


def test_inner_coefficients_match_dense_2sls():
    data, m = parametric_dataset(n=6, noise=0.3, seed=1)
    lam = 0.2
    config = Nl2slsConfig(lambda_grid=LambdaGrid(lam, lam + 0.1, 0.1))
    res = nl2sls_fit(data, m, config, compute_vcov=False)
    v = default_instruments(data, m)
    w = np.column_stack([np.ones(6), data.x_all, m])
    proj = v @ np.linalg.solve(v.T @ v, v.T)
    t = box_cox(data.y, lam)
    coef_dense = np.linalg.solve(w.T @ proj @ w, w.T @ proj @ t)
    got = np.concatenate([[res.alpha_hat], res.beta_hat, [res.delta_hat]])
    if res.lambda_hat == pytest.approx(lam):
        np.testing.assert_allclose(got, coef_dense, atol=1e-10)


def test_instrument_orthogonality_at_inner_step():
    data, m = parametric_dataset(n=100, noise=0.2, seed=2)
    config = Nl2slsConfig(lambda_grid=LambdaGrid(0.0, 1.0, 0.05))
    res = nl2sls_fit(data, m, config)
    v = default_instruments(data, m)
    w = np.column_stack([np.ones(100), data.x_all, m])
    coef = np.concatenate([[res.alpha_hat], res.beta_hat, [res.delta_hat]])
    resid = box_cox(data.y, res.lambda_hat) - w @ coef
    # normal equations of the projected regression
    score = w.T @ (v @ np.linalg.solve(v.T @ v, v.T @ resid))
    scale = float(np.abs(resid) @ np.abs(resid))
    assert np.max(np.abs(score)) <= 1e-8 * max(scale, 1.0)


def test_vcov_is_symmetric_psd():
    data, m = parametric_dataset(n=150, noise=0.2, seed=3)
    res = nl2sls_fit(data, m, Nl2slsConfig(lambda_grid=LambdaGrid(0.0, 1.0, 0.02)))
    assert res.vcov is not None
    np.testing.assert_allclose(res.vcov, res.vcov.T, atol=1e-12)
    assert np.all(np.diag(res.vcov) >= 0.0)
    assert res.se.shape == (4,)


def test_rank_deficient_instruments_raise():
    # binary x makes x^2 identical to x, collapsing the instrument rank
    rng = np.random.default_rng(4)
    n = 40
    x = rng.integers(0, 2, size=n).astype(float)
    z = rng.normal(size=(n, 1))
    data = Dataset(y=np.exp(rng.normal(size=n)), x_cont=x[:, None],
                   x_disc=np.empty((n, 0)), z=z)
    with pytest.raises(NumericalError):
        nl2sls_fit(data, np.zeros(n) + z[:, 0], Nl2slsConfig())


def test_m_vector_shape_validation():
    data, m = parametric_dataset(n=30)
    with pytest.raises(DataValidationError):
        nl2sls_fit(data, m[:-1])


def test_model1_monte_carlo_bands():
    # competitor accuracy on the heteroskedastic design: bias within 0.01,
    # dispersion inside [0.013, 0.03] at n = 1000 over 500 replications
    lams = []
    seeds = np.random.SeedSequence(77).spawn(500)
    config = Nl2slsConfig(lambda_grid=LambdaGrid(-0.8, 0.8, 0.001))
    for child in seeds:
        data, truth = generate(DgpSpec(model_id=1, n=1000, seed=child))
        res = nl2sls_fit(data, truth.m(data.z), config, compute_vcov=False)
        lams.append(res.lambda_hat)
    lams = np.array(lams)
    assert abs(np.mean(lams)) <= 0.01
    assert 0.013 <= np.std(lams, ddof=1) <= 0.03
