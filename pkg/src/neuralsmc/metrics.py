"""Evaluation metrics and the exact Kalman oracle for linear-Gaussian models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import LinearGaussianSsm

__all__ = [
    "KalmanResult",
    "kalman_filter",
    "lgssm_optimal_proposal",
    "rmse",
    "MetricSummary",
    "summarize",
]


@dataclass
class KalmanResult:
    filtered_means: np.ndarray  # (T, D_z)
    filtered_covs: np.ndarray  # (T, D_z, D_z)
    predictive_logdens: np.ndarray  # (T,)

    @property
    def log_marginal_likelihood(self) -> float:
        return float(np.sum(self.predictive_logdens))


def _mvn_logpdf(x, mean, cov):
    d = x.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise np.linalg.LinAlgError("innovation covariance not positive definite")
    r = x - mean
    return float(-0.5 * (d * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(cov, r)))


def kalman_filter(model: LinearGaussianSsm, x: np.ndarray) -> KalmanResult:
    """Exact filtering for a linear-Gaussian SSM; x has shape (T, D_x)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    T = x.shape[0]
    A, C = model.A, model.C
    Q = np.diag(model.q_std**2)
    R = np.diag(model.r_std**2)
    m = model.m0.copy()
    P = np.diag(model.p0_std**2)
    means = np.zeros((T, model.dim_z))
    covs = np.zeros((T, model.dim_z, model.dim_z))
    pred_ld = np.zeros(T)
    for t in range(T):
        if t > 0:
            m = A @ m
            P = A @ P @ A.T + Q
        S = C @ P @ C.T + R
        pred_ld[t] = _mvn_logpdf(x[t], C @ m, S)
        K = np.linalg.solve(S.T, (P @ C.T).T).T
        m = m + K @ (x[t] - C @ m)
        P = P - K @ C @ P
        means[t] = m
        covs[t] = P
    return KalmanResult(filtered_means=means, filtered_covs=covs, predictive_logdens=pred_ld)


def lgssm_optimal_proposal(model: LinearGaussianSsm, z_prev, x_t, t: int):
    """Closed-form p(z_t | z_{t-1}, x_t): the optimal one-step proposal.

    Returns (mean, cov).  At t == 1 the conditioning prior is the initial
    distribution instead of the transition.
    """
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
    if t == 1:
        prior_mean = model.m0
        Qinv = np.diag(1.0 / model.p0_std**2)
    else:
        z_prev = np.atleast_1d(np.asarray(z_prev, dtype=float))
        prior_mean = model.A @ z_prev
        Qinv = np.diag(1.0 / model.q_std**2)
    Rinv = np.diag(1.0 / model.r_std**2)
    prec = Qinv + model.C.T @ Rinv @ model.C
    cov = np.linalg.inv(prec)
    mean = cov @ (Qinv @ prior_mean + model.C.T @ Rinv @ x_t)
    return mean, cov


def rmse(z_true: np.ndarray, z_est: np.ndarray) -> float:
    """Root mean squared error over time; squared error summed across dims."""
    z_true = np.asarray(z_true, dtype=float)
    z_est = np.asarray(z_est, dtype=float)
    if z_true.ndim == 1:
        z_true = z_true[:, None]
    if z_est.ndim == 1:
        z_est = z_est[:, None]
    if z_true.shape != z_est.shape:
        raise ValueError(f"shape mismatch: {z_true.shape} vs {z_est.shape}")
    return float(np.sqrt(np.mean(np.sum((z_true - z_est) ** 2, axis=1))))


@dataclass
class MetricSummary:
    name: str
    mean: float
    std: float  # population std
    count: int


def summarize(name: str, values) -> MetricSummary:
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise ValueError("summarize() needs at least one value")
    return MetricSummary(
        name=name,
        mean=float(np.mean(values)),
        std=float(np.std(values)),
        count=values.size,
    )
