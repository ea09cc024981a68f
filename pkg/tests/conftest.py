"""Shared fixtures and independent dense-matrix oracles.

The oracles here are deliberately written as plain loops / explicit matrix
assemblies so they share no code with the package's matrix-free paths.
"""

from __future__ import annotations

import numpy as np
import pytest

from smoothmd.kernels import Dataset


def make_dataset(n, p_cont=1, p_disc=0, q=1, seed=0, y_scale=1.0):
    """Small generic dataset with positive response for oracle tests."""
    rng = np.random.default_rng(seed)
    x_cont = rng.normal(size=(n, p_cont))
    x_disc = rng.integers(0, 2, size=(n, p_disc)).astype(float)
    z = rng.normal(size=(n, q))
    y = y_scale * np.exp(0.5 * rng.normal(size=n))
    return Dataset(y=y, x_cont=x_cont, x_disc=x_disc, z=z)


@pytest.fixture
def tiny_dataset():
    return make_dataset(n=8, p_cont=2, q=1, seed=3)


def dense_omega(data: Dataset, d: np.ndarray) -> np.ndarray:
    """Double-loop discrepancy weights with exact-match discrete indicators."""
    w = np.hstack([data.x_cont, data.z])
    n = data.n
    omega = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            expo = float(np.sum(d * (w[i] - w[j]) ** 2))
            same = np.all(data.x_disc[i] == data.x_disc[j])
            omega[i, j] = np.exp(-expo) * (1.0 if same else 0.0)
    return omega


def dense_dn(omega: np.ndarray) -> np.ndarray:
    ones = np.ones(omega.shape[0])
    s = ones @ omega @ ones
    o1 = omega @ ones
    return omega - np.outer(o1, o1) / s


def dense_bn(omega: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    dn = dense_dn(omega)
    core = xhat.T @ dn @ xhat
    return dn - dn @ xhat @ np.linalg.solve(core, xhat.T @ dn)


def dense_kernel_matrix(z_std: np.ndarray, h: float) -> np.ndarray:
    """(1/n) K_{h,ij} with the Gaussian product kernel, triple-loop style."""
    n, q = z_std.shape
    k = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            u = (z_std[i] - z_std[j]) / h
            k[i, j] = np.exp(-0.5 * np.sum(u * u)) / (2.0 * np.pi) ** (q / 2.0)
    return k / (n * h**q)


def central_diff(fun, x, step):
    return (fun(x + step) - fun(x - step)) / (2.0 * step)
