"""Differentiable (torch) mirrors of the dynamics, kernel, and filter.

Everything here runs in float64 and exists so that the trajectory training
objectives (GP fitting, proxy-parameter fitting) can be differentiated by
reverse mode.  The numpy implementations in the sibling modules stay the
source of truth for the control path; agreement between the two is covered
by tests.

For speed the filtering recursion is evaluated for a whole batch of
episodes at once (padded and masked to a common length) and the per-output
GPs are stacked into batched tensors.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .simple_models import GRAVITY

torch.set_default_dtype(torch.float64)

LOG_2PI = math.log(2.0 * math.pi)


def to_t(x):
    return torch.as_tensor(np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# proxy dynamics


def cartpole_step_t(Z, U, mass_cart, mass_pole, damping, dt, pivot_height=0.0):
    """Batched torch RK4 cart-pole step; Z is (B, 5), U is (B,) or (B, 1)."""
    force = U.reshape(Z.shape[0])
    dx = Z[:, 1] - Z[:, 0]
    dy = Z[:, 2] - pivot_height
    length = torch.sqrt(dx * dx + dy * dy)
    theta = torch.atan2(dx, -dy)
    x, th, xd, thd = _cartpole_rk4(Z[:, 0], theta, Z[:, 3], Z[:, 4], force, length,
                                   mass_cart, mass_pole, damping, dt)
    return torch.stack([x, x + length * torch.sin(th),
                        pivot_height - length * torch.cos(th), xd, thd], dim=1)


def _cartpole_rk4(x, th, xd, thd, force, length, mc, mp, b, dt):
    def derivs(state):
        x_, th_, xd_, thd_ = state
        sin, cos = torch.sin(th_), torch.cos(th_)
        denom = mc + mp * sin * sin
        xdd = (force + b * thd_ * cos / length
               + mp * sin * (GRAVITY * cos + length * thd_ * thd_)) / denom
        thdd = -(xdd * cos + GRAVITY * sin + b * thd_ / (mp * length)) / length
        return xd_, thd_, xdd, thdd

    state = (x, th, xd, thd)
    k1 = derivs(state)
    k2 = derivs(tuple(s + 0.5 * dt * k for s, k in zip(state, k1)))
    k3 = derivs(tuple(s + 0.5 * dt * k for s, k in zip(state, k2)))
    k4 = derivs(tuple(s + dt * k for s, k in zip(state, k3)))
    return tuple(s + (dt / 6.0) * (a + 2 * b2 + 2 * c + d)
                 for s, a, b2, c, d in zip(state, k1, k2, k3, k4))


def rigidlink_step_t(Z, U):
    """Batched torch rigid-link step; Z is (B, 6), U is (B, 6)."""
    p_l = Z[:, :3] + U[:, :3]
    p_r = Z[:, 3:] + U[:, 3:]
    rest = torch.linalg.norm(Z[:, :3] - Z[:, 3:], dim=1)
    axis = p_l - p_r
    dist = torch.linalg.norm(axis, dim=1).clamp_min(1e-9)
    corr = (0.5 * (dist - rest) / dist).unsqueeze(1)
    return torch.cat([p_l - corr * axis, p_r + corr * axis], dim=1)


def make_step_t(model, params=None):
    """Torch step closure f(Z (B, n), U (B, c)) -> (B, n) for a SimpleModel."""
    if model.kind == "cartpole":
        p = params or model.default_params
        mc, mp, b = (torch.tensor(p.mass_cart), torch.tensor(p.mass_pole),
                     torch.tensor(p.angular_damping))

        def step(Z, U):
            return cartpole_step_t(Z, U, mc, mp, b, model.dt, model.pivot_height)
    else:
        def step(Z, U):
            return rigidlink_step_t(Z, U)
    return step


# ---------------------------------------------------------------------------
# kernel and sparse GP, batched over output dimensions


def rbf_stacked(X1, X2, log_ls, log_sv):
    """RBF gram for stacked GPs: X* (d, N, D), log_ls (d, D) -> (d, N1, N2)."""
    inv = torch.exp(-log_ls).unsqueeze(1)
    A = X1 * inv
    B = X2 * inv
    sq = ((A * A).sum(-1, keepdim=True) + (B * B).sum(-1).unsqueeze(1)
          - 2.0 * A @ B.transpose(1, 2))
    return torch.exp(log_sv).view(-1, 1, 1) * torch.exp(-0.5 * sq.clamp_min(0.0))


def chol_jittered_t(mat, jitter=1e-10, max_tries=8):
    n = mat.shape[-1]
    eye = torch.eye(n, dtype=mat.dtype)
    for i in range(max_tries):
        try:
            return torch.linalg.cholesky(mat + (jitter * 10 ** i) * eye)
        except torch.linalg.LinAlgError:
            continue
    raise torch.linalg.LinAlgError("matrix is not positive definite")


class TorchGP:
    """Trainable stacked-tensor view of a :class:`proxympc.gp.GPModel`."""

    def __init__(self, gp_model):
        self.n_out, self.P, self.D = gp_model.inducing.shape
        self.mean_constrained = gp_model.mean_constrained
        self.jitter = to_t([k.jitter for k in gp_model.kernels])
        self.zeta = to_t(gp_model.inducing).requires_grad_(True)
        raw = np.array([np.tril(L, -1) + np.diag(np.log(np.diag(L)))
                        for L in gp_model.chol_s])
        self.s_raw = to_t(raw).requires_grad_(True)
        self.log_ls = to_t(np.log(np.stack([k.lengthscales
                                            for k in gp_model.kernels])))
        self.log_ls.requires_grad_(True)
        self.log_sv = to_t(np.log([k.signal_variance for k in gp_model.kernels]))
        self.log_sv.requires_grad_(True)
        self.m = to_t(gp_model.pseudo_mean).requires_grad_(not self.mean_constrained)

    def trainables(self):
        out = [self.zeta, self.s_raw, self.log_ls, self.log_sv]
        if not self.mean_constrained:
            out.append(self.m)
        return out

    def chol_s_t(self):
        return (torch.tril(self.s_raw, -1)
                + torch.diag_embed(torch.exp(torch.diagonal(self.s_raw,
                                                            dim1=1, dim2=2))))

    def precompute(self):
        """Kernel factorization shared by all queries of one forward pass."""
        K = rbf_stacked(self.zeta, self.zeta, self.log_ls, self.log_sv)
        K = K + self.jitter.view(-1, 1, 1) * torch.eye(self.P)
        return torch.linalg.cholesky(K), self.chol_s_t()

    def q_batch(self, X, ctx):
        """Clamped posterior variances at X (B, D) -> (B, n_out)."""
        Lk, Ls = ctx
        ks = rbf_stacked(X.expand(self.n_out, -1, -1), self.zeta,
                         self.log_ls, self.log_sv)
        Binv = torch.cholesky_solve(ks.transpose(1, 2), Lk)
        q = (torch.exp(self.log_sv).unsqueeze(1)
             - (ks.transpose(1, 2) * Binv).sum(1)
             + ((Ls.transpose(1, 2) @ Binv) ** 2).sum(1))
        return torch.max(q, self.jitter.unsqueeze(1)).T

    def mu_f_batch(self, X, ctx):
        Lk, _ = ctx
        ks = rbf_stacked(X.expand(self.n_out, -1, -1), self.zeta,
                         self.log_ls, self.log_sv)
        a = torch.cholesky_solve(self.m.unsqueeze(2), Lk)
        return (ks @ a).squeeze(2).T

    def export(self, template):
        """Write trained tensors back into a fresh numpy GPModel."""
        from .gp import GPModel, KernelParams

        inducing = self.zeta.detach().numpy().copy()
        chol_s = self.chol_s_t().detach().numpy().copy()
        pseudo_mean = self.m.detach().numpy().copy()
        if self.mean_constrained:
            pseudo_mean = np.zeros_like(pseudo_mean)
        ls = np.exp(self.log_ls.detach().numpy())
        sv = np.exp(self.log_sv.detach().numpy())
        kernels = [KernelParams(ls[d], float(sv[d]), float(self.jitter[d]))
                   for d in range(self.n_out)]
        return GPModel(inducing, chol_s, pseudo_mean, kernels, self.mean_constrained)


# ---------------------------------------------------------------------------
# differentiable unscented filter and trajectory ELBO


def ut_weights(n, alpha=0.5, kappa=0.0, beta=2.0):
    lam = alpha ** 2 * (n + kappa) - n
    w_mean = torch.full((2 * n + 1,), 0.5 / (n + lam))
    w_cov = w_mean.clone()
    w_mean[0] = lam / (n + lam)
    w_cov[0] = w_mean[0] + (1 - alpha ** 2 + beta)
    return math.sqrt(n + lam), w_mean, w_cov


def sigma_points_batched(mean, cov, scale):
    """mean (E, n), cov (E, n, n) -> points (E, 2n+1, n)."""
    root = chol_jittered_t(0.5 * (cov + cov.transpose(1, 2)))
    offs = scale * root.transpose(1, 2)
    return torch.cat([mean.unsqueeze(1),
                      mean.unsqueeze(1) + offs,
                      mean.unsqueeze(1) - offs], dim=1)


def episodes_elbo(mu_y, sg_y, u, eps, mask, step_fn, q_at, mu_f_at, state_dim,
                  obs_dim, init_unobs_var=1.0):
    """Per-episode trajectory evidence lower bounds, batched.

    mu_y, sg_y (E, T, m); u (E, T, c); eps (E, T, m); mask (E, T) with 1 for
    real steps (prefix) and 0 for padding.  The variational marginals are
    the unscented filtering distributions; the emission term uses the
    closed form for the selector observation, and the dynamics KL term is
    integrated over the previous belief by sigma-point quadrature with the
    mean weights (exact for integrands quadratic in the previous state).

    q_at(X) -> (B, n) process-noise diagonals at inputs X = [z, u];
    mu_f_at is None for the mean-constrained model.  Returns (E,) elbos.
    """
    E, T, m = mu_y.shape
    n = state_dim
    scale, w_mean, w_cov = ut_weights(n)
    S = 2 * n + 1
    y = mu_y + sg_y * eps

    mean = torch.cat([y[:, 0], torch.zeros(E, n - m)], dim=1)
    var0 = torch.cat([sg_y[:, 0] ** 2, torch.full((E, n - m), init_unobs_var)], dim=1)
    cov = torch.diag_embed(var0)

    # KL(q(z1) || N(0, I))
    elbo = -0.5 * (var0.sum(1) + (mean * mean).sum(1) - n - torch.log(var0).sum(1))
    # emission term at t = 1
    r = sg_y[:, 0] ** 2
    elbo = elbo - 0.5 * (m * LOG_2PI + torch.log(r).sum(1)
                         + ((y[:, 0] - mean[:, :m]) ** 2 / r).sum(1)
                         + (var0[:, :m] / r).sum(1))

    eye_n = torch.eye(n)
    for t in range(1, T):
        pts = sigma_points_batched(mean, cov, scale)          # (E, S, n)
        u_prev = u[:, t - 1]                                  # (E, c)
        flat_pts = pts.reshape(E * S, n)
        flat_u = u_prev.repeat_interleave(S, dim=0)
        prop = step_fn(flat_pts, flat_u)
        X = torch.cat([flat_pts, flat_u], dim=1)
        if mu_f_at is not None:
            prop = prop + mu_f_at(X)
        prop = prop.reshape(E, S, n)

        # unscented predict with Q at the pre-prediction mean
        q_mean = q_at(torch.cat([mean, u_prev], dim=1))       # (E, n)
        mu_pred = torch.einsum("s,esn->en", w_mean, prop)
        cen = prop - mu_pred.unsqueeze(1)
        cov_pred = torch.einsum("s,esn,esk->enk", w_cov, cen, cen)
        cov_pred = cov_pred + torch.diag_embed(q_mean)
        cov_pred = 0.5 * (cov_pred + cov_pred.transpose(1, 2))

        # exact linear-Gaussian update (Joseph form)
        r = sg_y[:, t] ** 2
        s_inn = cov_pred[:, :m, :m] + torch.diag_embed(r)
        gain = torch.linalg.solve(s_inn, cov_pred[:, :m, :]).transpose(1, 2)
        mean = mu_pred + (gain @ (y[:, t] - mu_pred[:, :m]).unsqueeze(2)).squeeze(2)
        kc = torch.cat([gain, torch.zeros(E, n, n - m)], dim=2)
        ikc = eye_n - kc
        cov = (ikc @ cov_pred @ ikc.transpose(1, 2)
               + gain @ torch.diag_embed(r) @ gain.transpose(1, 2))
        cov = 0.5 * (cov + cov.transpose(1, 2))

        # E_{q(z_{t-1})} KL(q(z_t) || p(z_t | z_{t-1}, u_{t-1}))
        q_pts = q_at(X).reshape(E, S, n)
        logdet_cov = torch.linalg.slogdet(cov)[1]
        diff = prop - mean.unsqueeze(1)
        cov_diag = torch.diagonal(cov, dim1=1, dim2=2)
        kl_pts = 0.5 * ((cov_diag.unsqueeze(1) / q_pts).sum(2)
                        + (diff * diff / q_pts).sum(2)
                        - n + torch.log(q_pts).sum(2) - logdet_cov.unsqueeze(1))
        term3 = torch.einsum("s,es->e", w_mean, kl_pts)

        ll = -0.5 * (m * LOG_2PI + torch.log(r).sum(1)
                     + ((y[:, t] - mean[:, :m]) ** 2 / r).sum(1)
                     + (cov_diag[:, :m] / r).sum(1))
        elbo = elbo + mask[:, t] * (ll - term3)
    return elbo


def episode_elbo(mu_y, sg_y, u, eps, step_fn, q_at, mu_f_at, state_dim, obs_dim,
                 init_unobs_var=1.0):
    """Single-episode convenience wrapper around :func:`episodes_elbo`."""
    return episodes_elbo(mu_y.unsqueeze(0), sg_y.unsqueeze(0), u.unsqueeze(0),
                         eps.unsqueeze(0), torch.ones(1, mu_y.shape[0]),
                         step_fn, q_at, mu_f_at, state_dim, obs_dim,
                         init_unobs_var)[0]


def pad_episodes(episodes):
    """Stack variable-length (mu_y, sg_y, u) episodes into padded tensors."""
    lengths = [ep[0].shape[0] for ep in episodes]
    E, T = len(episodes), max(lengths)
    m = episodes[0][0].shape[1]
    c = episodes[0][2].shape[1]
    mu_y = torch.zeros(E, T, m)
    sg_y = torch.ones(E, T, m)
    u = torch.zeros(E, T, c)
    mask = torch.zeros(E, T)
    for i, (mu, sg, uu) in enumerate(episodes):
        L = lengths[i]
        mu_y[i, :L] = to_t(mu)
        sg_y[i, :L] = to_t(sg)
        u[i, :L] = to_t(uu)
        mask[i, :L] = 1.0
    return mu_y, sg_y, u, mask


def gp_training_loss(episodes, eps_list, tgp: TorchGP, step_fn, state_dim,
                     obs_dim):
    """Mean negative ELBO over the given episodes with fixed noise draws.

    ``episodes`` holds numpy (mu_y, sigma_y, u) triples; ``eps_list`` the
    matching per-episode standard-normal draws as tensors.
    """
    ctx = tgp.precompute()

    def q_at(X):
        return tgp.q_batch(X, ctx)

    mu_f_at = None
    if not tgp.mean_constrained:
        def mu_f_at(X):
            return tgp.mu_f_batch(X, ctx)

    mu_y, sg_y, u, mask = pad_episodes(episodes)
    E, T, m = mu_y.shape
    eps = torch.zeros(E, T, m)
    for i, e in enumerate(eps_list):
        eps[i, :e.shape[0]] = e
    elbos = episodes_elbo(mu_y, sg_y, u, eps, mask, step_fn, q_at, mu_f_at,
                          state_dim, obs_dim)
    return -elbos.mean()


def run_gp_training(episodes, step_t, gp_init, obs_dim, cfg):
    """Adam loop with non-finite-step rejection; returns a numpy GPModel."""
    state_dim = gp_init.D - episodes[0][2].shape[1]
    tgp = TorchGP(gp_init)
    opt = torch.optim.Adam(tgp.trainables(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    batch_rng = np.random.default_rng(cfg.seed + 1)

    snapshot = [p.detach().clone() for p in tgp.trainables()]
    rejects = 0
    for _ in range(cfg.epochs):
        if cfg.minibatch_episodes and cfg.minibatch_episodes < len(episodes):
            idx = batch_rng.choice(len(episodes), size=cfg.minibatch_episodes,
                                   replace=False)
        else:
            idx = np.arange(len(episodes))
        batch = [episodes[i] for i in idx]
        eps_list = [torch.randn(ep[0].shape, generator=gen) for ep in batch]
        try:
            loss = gp_training_loss(batch, eps_list, tgp, step_t, state_dim,
                                    obs_dim)
            finite = bool(torch.isfinite(loss))
        except (torch.linalg.LinAlgError, RuntimeError):
            finite = False
        if not finite:
            with torch.no_grad():
                for p, s in zip(tgp.trainables(), snapshot):
                    p.copy_(s)
            for group in opt.param_groups:
                group["lr"] *= 0.5
            rejects += 1
            if rejects > cfg.max_rejects:
                raise RuntimeError(
                    f"GP training diverged: {rejects} consecutive non-finite losses")
            continue
        rejects = 0
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            bad = any(not torch.isfinite(p).all() for p in tgp.trainables())
            if bad:
                for p, s in zip(tgp.trainables(), snapshot):
                    p.copy_(s)
                for group in opt.param_groups:
                    group["lr"] *= 0.5
                continue
        snapshot = [p.detach().clone() for p in tgp.trainables()]
    return tgp.export(gp_init)
