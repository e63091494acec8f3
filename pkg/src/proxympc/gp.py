"""Sparse GP over proxy-model transitions, one independent GP per output dim.

Each GP is parameterized by pseudo-inputs, a pseudo-output Gaussian
N(m, S) with S kept positive-definite through its Cholesky factor, and an
RBF kernel with per-input-dimension lengthscales.  With the pseudo-output
mean constrained to zero the GP contributes only an input-dependent
variance on top of the proxy dynamics; the unconstrained variant adds a
learned mean correction as well.

Training (see :func:`train_gp`) fits the parameters by stochastic gradient
descent on a filtering-based trajectory objective; the differentiable parts
live in :mod:`proxympc.diffkit` and are imported lazily.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KernelParams:
    """RBF kernel with automatic-relevance-determination lengthscales."""

    lengthscales: np.ndarray
    signal_variance: float
    jitter: float = 1e-6

    def __post_init__(self):
        self.lengthscales = np.asarray(self.lengthscales, dtype=float)
        if np.any(self.lengthscales <= 0) or self.signal_variance <= 0 or self.jitter <= 0:
            raise ValueError("kernel parameters must be strictly positive")


def kernel(x, x2, params: KernelParams) -> float:
    """k(x, x') = s^2 exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)."""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.shape != x2.shape or x.shape != params.lengthscales.shape:
        raise ValueError("kernel input dimensions do not match")
    d = (x - x2) / params.lengthscales
    return params.signal_variance * np.exp(-0.5 * np.dot(d, d))


def kernel_matrix(X, X2, params: KernelParams):
    X = np.asarray(X, dtype=float) / params.lengthscales
    X2 = np.asarray(X2, dtype=float) / params.lengthscales
    sq = (np.sum(X ** 2, axis=1)[:, None] + np.sum(X2 ** 2, axis=1)[None, :]
          - 2.0 * X @ X2.T)
    return params.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


class GPModel:
    """Per-output-dimension sparse GPs sharing one input space (z, u).

    Arrays are stacked over the ``n_out`` output dimensions:
        inducing   (n_out, P, D)
        chol_s     (n_out, P, P) lower-triangular, diag > 0
        pseudo_mean(n_out, P)    identically zero when mean_constrained
    """

    def __init__(self, inducing, chol_s, pseudo_mean, kernels, mean_constrained=True):
        self.inducing = np.asarray(inducing, dtype=float)
        self.chol_s = np.asarray(chol_s, dtype=float)
        self.pseudo_mean = np.asarray(pseudo_mean, dtype=float)
        self.kernels = list(kernels)
        self.mean_constrained = bool(mean_constrained)
        if self.mean_constrained and np.any(self.pseudo_mean != 0.0):
            raise ValueError("mean-constrained GP requires pseudo_mean == 0")
        self.n_out, self.P, self.D = self.inducing.shape
        self._refresh_cache()

    def _refresh_cache(self):
        """Precompute K^-1 - K^-1 S K^-1 and K^-1 m for fast variance queries."""
        self._w = np.empty((self.n_out, self.P, self.P))
        self._a = np.empty((self.n_out, self.P))
        for d in range(self.n_out):
            kp = self.kernels[d]
            K = kernel_matrix(self.inducing[d], self.inducing[d], kp)
            K[np.diag_indices_from(K)] += kp.jitter
            Kinv = np.linalg.inv(K)
            S = self.chol_s[d] @ self.chol_s[d].T
            self._w[d] = Kinv - Kinv @ S @ Kinv
            self._a[d] = Kinv @ self.pseudo_mean[d]

    def posterior_batch(self, X):
        """Mean correction and variance per output dim for inputs X (B, D)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        B = X.shape[0]
        mu_f = np.zeros((B, self.n_out))
        q = np.empty((B, self.n_out))
        for d in range(self.n_out):
            kp = self.kernels[d]
            ks = kernel_matrix(X, self.inducing[d], kp)
            q[:, d] = kp.signal_variance - np.einsum("bp,pq,bq->b", ks, self._w[d], ks)
            q[:, d] = np.maximum(q[:, d], kp.jitter)
            if not self.mean_constrained:
                mu_f[:, d] = ks @ self._a[d]
        return mu_f, q

    def save(self, path):
        np.savez(path,
                 format_version=np.array([1]),
                 inducing=self.inducing,
                 chol_s=self.chol_s,
                 pseudo_mean=self.pseudo_mean,
                 lengthscales=np.stack([k.lengthscales for k in self.kernels]),
                 signal_variance=np.array([k.signal_variance for k in self.kernels]),
                 jitter=np.array([k.jitter for k in self.kernels]),
                 mean_constrained=np.array([int(self.mean_constrained)]))

    @classmethod
    def load(cls, path):
        with np.load(path) as f:
            if int(f["format_version"][0]) != 1:
                raise ValueError(f"unsupported GP checkpoint version in {path}")
            kernels = [KernelParams(ls, float(sv), float(jt))
                       for ls, sv, jt in zip(f["lengthscales"], f["signal_variance"],
                                             f["jitter"])]
            return cls(f["inducing"], f["chol_s"], f["pseudo_mean"], kernels,
                       bool(int(f["mean_constrained"][0])))


def gp_posterior(gp: GPModel, z, u):
    """Posterior mean correction and clamped variance at one (z, u) input."""
    x = np.concatenate([np.asarray(z, float).ravel(), np.asarray(u, float).ravel()])
    mu_f, q = gp.posterior_batch(x[None, :])
    return mu_f[0], q[0]


class TransitionDistribution:
    """Proxy dynamics mean plus input-dependent process noise.

    Before any GP has been trained (gp=None) the process noise is the
    constant diagonal ``q_init``.  With a mean-constrained GP the mean path
    never touches GP weights; the unconstrained variant adds the GP mean
    correction on top of the proxy step.
    """

    def __init__(self, mean_fn, state_dim, control_dim, gp: GPModel | None = None,
                 q_init: float = 1e-2):
        self._mean_fn = mean_fn
        self.state_dim = state_dim
        self.control_dim = control_dim
        self.gp = gp
        self.q_init = float(q_init)

    def mean_batch(self, Z, U):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        out = self._mean_fn(Z, U)
        if self.gp is not None and not self.gp.mean_constrained:
            mu_f, _ = self.gp.posterior_batch(np.concatenate([Z, U], axis=1))
            out = out + mu_f
        return out

    def mean(self, z, u):
        return self.mean_batch(z[None, :], np.atleast_1d(u)[None, :])[0]

    def q_diag(self, z, u):
        return self.q_diag_batch(np.asarray(z)[None, :], np.atleast_1d(u)[None, :])[0]

    def q_diag_batch(self, Z, U):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if self.gp is None:
            return np.full((Z.shape[0], self.state_dim), self.q_init)
        _, q = self.gp.posterior_batch(np.concatenate([Z, U], axis=1))
        return q


def predict_Q(td: TransitionDistribution, z, u):
    """Diagonal process-noise covariance at (z, u)."""
    return np.diag(td.q_diag(z, u))


def init_gp(inputs, n_out, n_inducing, seed, signal_variance=0.25, jitter=1e-6,
            mean_constrained=True) -> GPModel:
    """GP initialization from visited (z, u) inputs.

    Inducing points are sampled from ``inputs`` (with replacement if there
    are fewer rows than requested); lengthscales start at twice the
    per-dimension spread of the data; S = K keeps the initial variance at
    the prior signal variance everywhere.
    """
    rng = np.random.default_rng(seed)
    inputs = np.asarray(inputs, dtype=float)
    N, D = inputs.shape
    replace = N < n_inducing
    idx = rng.choice(N, size=n_inducing, replace=replace)
    ls = np.maximum(2.0 * np.std(inputs, axis=0), 0.05)
    inducing = np.empty((n_out, n_inducing, D))
    chol_s = np.empty((n_out, n_inducing, n_inducing))
    kernels = []
    for d in range(n_out):
        kp = KernelParams(ls.copy(), signal_variance, jitter)
        kernels.append(kp)
        pts = inputs[idx] + 1e-6 * rng.standard_normal((n_inducing, D))
        inducing[d] = pts
        K = kernel_matrix(pts, pts, kp)
        K[np.diag_indices_from(K)] += jitter
        chol_s[d] = np.linalg.cholesky(K)
    pseudo_mean = np.zeros((n_out, n_inducing))
    return GPModel(inducing, chol_s, pseudo_mean, kernels, mean_constrained)


@dataclass
class GpTrainConfig:
    epochs: int = 200
    lr: float = 1e-2
    minibatch_episodes: int = 0   # 0 = every episode each epoch
    seed: int = 0
    max_rejects: int = 12


def train_gp(episodes, step_t, gp_init: GPModel, obs_dim: int,
             cfg: GpTrainConfig | None = None) -> GPModel:
    """Fit GP parameters on recorded episodes by minimizing the trajectory loss.

    ``episodes`` is a list of (mu_y, sigma_y, u) arrays as recorded online;
    ``step_t`` is the torch proxy-dynamics step (see diffkit.make_step_t).
    The perception outputs are treated as fixed; one reparameterized
    observation sample is drawn per episode per epoch.  Non-finite losses
    reject the step and halve the learning rate; training aborts after
    ``max_rejects`` consecutive rejections.
    """
    from . import diffkit

    cfg = cfg or GpTrainConfig()
    if cfg.epochs <= 0 or not episodes:
        return gp_init
    return diffkit.run_gp_training(episodes, step_t, gp_init, obs_dim, cfg)
