"""Unscented Kalman filtering with a learned transition distribution.

The predict step propagates sigma points through the transition mean and
adds the transition's input-dependent process noise, evaluated at the
pre-prediction belief mean.  The update step is the exact linear-Gaussian
Kalman update for the selector observation y = C z with per-step diagonal
noise supplied by the perception system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class UTParams:
    alpha: float = 0.5
    kappa: float = 0.0
    beta: float = 2.0


@dataclass
class Belief:
    """Gaussian over the proxy-model state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)

    def copy(self):
        return Belief(self.mean.copy(), self.cov.copy())


def _chol_with_jitter(mat, jitter=1e-10, max_tries=8):
    """Cholesky with escalating diagonal jitter; raises after max_tries."""
    n = mat.shape[0]
    for i in range(max_tries):
        try:
            return np.linalg.cholesky(mat + (jitter * 10 ** i) * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("covariance is not positive definite")


def symmetrize(mat):
    return 0.5 * (mat + mat.T)


def sigma_points(belief: Belief, params: UTParams):
    """Scaled sigma points and (mean, covariance) weights.

    Returns (points, w_mean, w_cov) with points of shape (2n+1, n).
    """
    n = belief.mean.size
    lam = params.alpha ** 2 * (n + params.kappa) - n
    if n + lam <= 0:
        raise ValueError("unscented-transform weights undefined: n + lambda <= 0")
    scale = np.sqrt(n + lam)
    root = _chol_with_jitter(symmetrize(belief.cov))
    pts = np.empty((2 * n + 1, n))
    pts[0] = belief.mean
    pts[1:n + 1] = belief.mean + scale * root.T
    pts[n + 1:] = belief.mean - scale * root.T
    w_mean = np.full(2 * n + 1, 0.5 / (n + lam))
    w_cov = w_mean.copy()
    w_mean[0] = lam / (n + lam)
    w_cov[0] = w_mean[0] + (1 - params.alpha ** 2 + params.beta)
    return pts, w_mean, w_cov


def init_belief(y, sigma_y, obs_map, unobserved_var: float = 1.0) -> Belief:
    """Belief from the first perception output: pseudo-inverse lift of y."""
    mean = obs_map.lift(np.asarray(y, dtype=float))
    var = np.full(obs_map.n, unobserved_var)
    var[: obs_map.m] = np.asarray(sigma_y, dtype=float) ** 2
    return Belief(mean, np.diag(var))


def gpukf_predict(belief: Belief, u, transition, params: UTParams | None = None) -> Belief:
    """Unscented prediction through transition.mean plus process noise Q.

    Q is evaluated once at the pre-prediction mean, then added to the
    unscented covariance of the propagated points.
    """
    params = params or UTParams()
    pts, w_mean, w_cov = sigma_points(belief, params)
    prop = transition.mean_batch(pts, np.broadcast_to(u, (pts.shape[0], np.size(u))))
    mean = w_mean @ prop
    centered = prop - mean
    cov = (w_cov[:, None] * centered).T @ centered
    cov = cov + np.diag(transition.q_diag(belief.mean, u))
    return Belief(mean, symmetrize(cov))


def gpukf_update(belief: Belief, y, sigma_y, obs_map) -> Belief:
    """Exact Kalman update with H = C and R = diag(sigma_y^2), Joseph form."""
    y = np.asarray(y, dtype=float)
    sigma_y = np.asarray(sigma_y, dtype=float)
    if np.any(sigma_y <= 0):
        raise ValueError("observation noise must be strictly positive")
    C = obs_map.C
    R = np.diag(sigma_y ** 2)
    S = C @ belief.cov @ C.T + R
    for i in range(8):
        try:
            gain = np.linalg.solve(S, C @ belief.cov).T
            break
        except np.linalg.LinAlgError:
            S = S + (1e-10 * 10 ** i) * np.eye(S.shape[0])
    else:
        raise np.linalg.LinAlgError("innovation covariance is singular")
    mean = belief.mean + gain @ (y - C @ belief.mean)
    ikc = np.eye(belief.mean.size) - gain @ C
    cov = ikc @ belief.cov @ ikc.T + gain @ R @ gain.T
    return Belief(mean, symmetrize(cov))
