import numpy as np
import pytest
import torch

from proxympc import diffkit
from proxympc.gp import (
    GPModel,
    GpTrainConfig,
    KernelParams,
    TransitionDistribution,
    gp_posterior,
    init_gp,
    kernel,
    kernel_matrix,
    predict_Q,
    train_gp,
)


def toy_gp(rng, n_out=2, P=4, D=3, mean_constrained=True, sv=0.5):
    inducing = rng.standard_normal((n_out, P, D))
    kernels = [KernelParams(rng.uniform(0.5, 2.0, size=D), sv, 1e-6)
               for _ in range(n_out)]
    chol_s = np.empty((n_out, P, P))
    for d in range(n_out):
        K = kernel_matrix(inducing[d], inducing[d], kernels[d])
        K[np.diag_indices_from(K)] += kernels[d].jitter
        chol_s[d] = np.linalg.cholesky(K)
    m = np.zeros((n_out, P))
    if not mean_constrained:
        m = rng.standard_normal((n_out, P))
    return GPModel(inducing, chol_s, m, kernels, mean_constrained)


class TestKernel:
    def test_self_kernel_is_signal_variance(self):
        kp = KernelParams(np.array([1.0, 2.0]), 0.7)
        x = np.array([0.3, -0.4])
        assert abs(kernel(x, x, kp) - 0.7) < 1e-15

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        kp = KernelParams(rng.uniform(0.5, 2, size=4), 1.3)
        for _ in range(20):
            x, x2 = rng.standard_normal(4), rng.standard_normal(4)
            assert kernel(x, x2, kp) == kernel(x2, x, kp)

    def test_hand_value(self):
        kp = KernelParams(np.array([1.0, 1.0]), 1.0)
        v = kernel(np.array([0.0, 0.0]), np.array([1.0, 1.0]), kp)
        assert abs(v - np.exp(-1.0)) < 1e-12

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(1)
        kp = KernelParams(rng.uniform(0.5, 2, size=3), 0.9)
        X = rng.standard_normal((5, 3))
        X2 = rng.standard_normal((4, 3))
        K = kernel_matrix(X, X2, kp)
        for i in range(5):
            for j in range(4):
                assert abs(K[i, j] - kernel(X[i], X2[j], kp)) < 1e-12


class TestPosterior:
    def test_s_equals_k_gives_prior_variance(self):
        rng = np.random.default_rng(2)
        gp = toy_gp(rng, sv=0.5)
        x = rng.standard_normal(3)
        _, q = gp.posterior_batch(x[None])
        np.testing.assert_allclose(q[0], 0.5, rtol=1e-6)

    def test_tiny_s_interpolates_at_inducing_points(self):
        rng = np.random.default_rng(3)
        gp = toy_gp(rng)
        jit = gp.kernels[0].jitter
        gp.chol_s = np.tile(np.sqrt(jit) * np.eye(gp.P), (gp.n_out, 1, 1))
        gp._refresh_cache()
        _, q = gp.posterior_batch(gp.inducing[0][0][None])
        assert q[0, 0] <= 2 * jit

    def test_constrained_mean_is_zero(self):
        rng = np.random.default_rng(4)
        gp = toy_gp(rng, mean_constrained=True)
        mu_f, _ = gp_posterior(gp, rng.standard_normal(2), rng.standard_normal(1))
        np.testing.assert_array_equal(mu_f, 0.0)

    def test_variance_invariant_under_inducing_permutation(self):
        rng = np.random.default_rng(5)
        gp = toy_gp(rng, n_out=1, P=6)
        X = rng.standard_normal((10, 3))
        _, q0 = gp.posterior_batch(X)
        perm = rng.permutation(6)
        S = gp.chol_s[0] @ gp.chol_s[0].T
        Sp = S[np.ix_(perm, perm)]
        gp2 = GPModel(gp.inducing[:, perm], np.linalg.cholesky(Sp)[None],
                      gp.pseudo_mean[:, perm], gp.kernels, True)
        _, q1 = gp2.posterior_batch(X)
        np.testing.assert_allclose(q0, q1, atol=1e-10)

    def test_variance_floored_at_jitter(self):
        rng = np.random.default_rng(6)
        gp = toy_gp(rng)
        gp.chol_s = 1e-9 * np.tile(np.eye(gp.P), (gp.n_out, 1, 1))
        gp._refresh_cache()
        X = np.vstack([gp.inducing[0], rng.standard_normal((20, 3))])
        _, q = gp.posterior_batch(X)
        assert np.all(q >= gp.kernels[0].jitter)

    def test_torch_posterior_agrees_with_numpy(self):
        rng = np.random.default_rng(7)
        gp = toy_gp(rng, n_out=2, P=5, mean_constrained=False)
        tgp = diffkit.TorchGP(gp)
        X = rng.standard_normal((8, 3))
        with torch.no_grad():
            ctx = tgp.precompute()
            qt = tgp.q_batch(diffkit.to_t(X), ctx).numpy()
            mt = tgp.mu_f_batch(diffkit.to_t(X), ctx).numpy()
        mu_f, q = gp.posterior_batch(X)
        np.testing.assert_allclose(qt, q, atol=1e-9)
        np.testing.assert_allclose(mt, mu_f, atol=1e-9)


class TestTransitionDistribution:
    def test_constant_q_before_training(self):
        td = TransitionDistribution(lambda Z, U: Z, state_dim=3, control_dim=1,
                                    q_init=0.01)
        np.testing.assert_allclose(predict_Q(td, np.zeros(3), np.zeros(1)),
                                   0.01 * np.eye(3))

    def test_constrained_mean_is_bit_exact_proxy_dynamics(self):
        rng = np.random.default_rng(8)
        gp = toy_gp(rng, n_out=3, D=4, mean_constrained=True)

        def dyn(Z, U):
            return Z * 1.1 + U @ np.ones((1, 3)) * 0.2

        td_gp = TransitionDistribution(dyn, 3, 1, gp=gp)
        td_raw = TransitionDistribution(dyn, 3, 1, gp=None)
        Z = rng.standard_normal((50, 3))
        U = rng.standard_normal((50, 1))
        assert np.array_equal(td_gp.mean_batch(Z, U), td_raw.mean_batch(Z, U))

    def test_q_symmetric_psd(self):
        rng = np.random.default_rng(9)
        gp = toy_gp(rng, n_out=2, D=3)
        td = TransitionDistribution(lambda Z, U: Z, 2, 1, gp=gp)
        Q = predict_Q(td, rng.standard_normal(2), rng.standard_normal(1))
        assert np.array_equal(Q, Q.T)
        assert np.all(np.diag(Q) > 0)


def small_episode(rng, T=6, n=2, m=1, c=1):
    mu_y = rng.standard_normal((T, m))
    sg_y = rng.uniform(0.05, 0.3, size=(T, m))
    u = rng.uniform(-1, 1, size=(T, c))
    return mu_y, sg_y, u


def toy_step_t():
    A = torch.tensor([[0.9, 0.1], [-0.05, 0.8]])
    B = torch.tensor([[0.1], [0.2]])

    def step(Z, U):
        return Z @ A.T + U @ B.T
    return step


class TestTrainingLoss:
    @pytest.mark.parametrize("constrained", [True, False])
    def test_gradient_matches_finite_differences(self, constrained):
        rng = np.random.default_rng(10)
        gp = toy_gp(rng, n_out=2, P=3, D=3, mean_constrained=constrained, sv=0.1)
        tgp = diffkit.TorchGP(gp)
        ep = [small_episode(rng, T=2)]
        eps = [torch.zeros(2, 1) + 0.3]
        step = toy_step_t()

        def loss_value():
            return diffkit.gp_training_loss(ep, eps, tgp, step, 2, 1)

        loss = loss_value()
        loss.backward()
        h = 1e-5
        for p in tgp.trainables():
            grad = p.grad.detach().numpy() if p.grad is not None else None
            assert grad is not None
            for i in range(p.numel()):
                with torch.no_grad():
                    p.view(-1)[i] += h
                    lp = float(loss_value())
                    p.view(-1)[i] -= 2 * h
                    lm = float(loss_value())
                    p.view(-1)[i] += h
                fd = (lp - lm) / (2 * h)
                ad = grad.reshape(-1)[i]
                rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-5)
                assert rel < 1e-4, f"param shape {p.shape} idx {i}: fd={fd} ad={ad}"

    def test_elbo_is_lower_bound_on_linear_gaussian_evidence(self):
        # -ELBO must dominate the exact negative log marginal likelihood
        rng = np.random.default_rng(11)
        n, m, c, T = 3, 2, 1, 6
        A = rng.standard_normal((n, n)) * 0.5
        B = rng.standard_normal((n, c))
        q_const = 0.04
        At, Bt = diffkit.to_t(A), diffkit.to_t(B)

        def step(Z, U):
            return Z @ At.T + U @ Bt.T

        def q_at(X):
            return torch.full((X.shape[0], n), q_const)

        mu_y = rng.standard_normal((T, m))
        sg_y = rng.uniform(0.1, 0.4, size=(T, m))
        us = rng.uniform(-1, 1, size=(T, c))
        C = np.hstack([np.eye(m), np.zeros((m, n - m))])

        def exact_nll(ys):
            # closed-form Kalman marginal likelihood with prior N(0, I)
            mu, S = np.zeros(n), np.eye(n)
            ll = 0.0
            for t in range(T):
                if t > 0:
                    mu = A @ mu + B @ us[t - 1]
                    S = A @ S @ A.T + q_const * np.eye(n)
                R = np.diag(sg_y[t] ** 2)
                Sy = C @ S @ C.T + R
                r = ys[t] - C @ mu
                ll += -0.5 * (m * np.log(2 * np.pi) + np.linalg.slogdet(Sy)[1]
                              + r @ np.linalg.solve(Sy, r))
                K = S @ C.T @ np.linalg.inv(Sy)
                mu = mu + K @ r
                S = S - K @ C @ S
            return -ll

        margin = []
        for _ in range(1000):
            eps = rng.standard_normal((T, m))
            ys = mu_y + sg_y * eps
            elbo = diffkit.episode_elbo(
                diffkit.to_t(mu_y), diffkit.to_t(sg_y), diffkit.to_t(us),
                diffkit.to_t(eps), step, q_at, None, n, m)
            neg_elbo = -float(elbo)
            nll = exact_nll(ys)
            assert neg_elbo >= nll - 1e-8
            margin.append(neg_elbo - nll)
        assert np.mean(margin) >= 0.0

    def test_zero_epochs_returns_init(self):
        rng = np.random.default_rng(12)
        gp = toy_gp(rng)
        out = train_gp([small_episode(rng)], toy_step_t(), gp, obs_dim=1,
                       cfg=GpTrainConfig(epochs=0))
        assert out is gp

    def test_training_shrinks_q_on_perfectly_predicted_data(self):
        # proxy-exact trajectories with floor noise: learned q should drop
        rng = np.random.default_rng(13)
        n, m, c = 2, 1, 1
        A = np.array([[0.9, 0.35], [-0.3, 0.85]])
        B = np.array([[0.05], [0.1]])
        At, Bt = diffkit.to_t(A), diffkit.to_t(B)

        def step_t(Z, U):
            return Z @ At.T + U @ Bt.T

        episodes = []
        inputs = []
        for _ in range(4):
            z = rng.standard_normal(n)
            T = 30
            mu_y = np.empty((T, m))
            us = rng.uniform(-1, 1, size=(T, c))
            for t in range(T):
                mu_y[t] = z[:m]
                inputs.append(np.concatenate([z, us[t]]))
                z = A @ z + B @ us[t]
            episodes.append((mu_y, np.full((T, m), 0.01), us))
        gp0 = init_gp(np.array(inputs), n_out=n, n_inducing=8, seed=0)
        _, q_before = gp0.posterior_batch(np.array(inputs))
        gp1 = train_gp(episodes, step_t, gp0, obs_dim=m,
                       cfg=GpTrainConfig(epochs=80, lr=2e-2, seed=0))
        _, q_after = gp1.posterior_batch(np.array(inputs))
        assert np.median(q_after) < np.median(q_before)


class TestPersistence:
    def test_round_trip_preserves_posterior_bits(self, tmp_path):
        rng = np.random.default_rng(14)
        gp = toy_gp(rng, n_out=3, P=6, D=4, mean_constrained=False)
        path = tmp_path / "gp.npz"
        gp.save(path)
        gp2 = GPModel.load(path)
        X = rng.standard_normal((100, 4))
        mu0, q0 = gp.posterior_batch(X)
        mu1, q1 = gp2.posterior_batch(X)
        assert np.array_equal(mu0, mu1)
        assert np.array_equal(q0, q1)

    def test_version_check(self, tmp_path):
        rng = np.random.default_rng(15)
        gp = toy_gp(rng)
        path = tmp_path / "gp.npz"
        gp.save(path)
        data = dict(np.load(path))
        data["format_version"] = np.array([99])
        np.savez(path, **data)
        with pytest.raises(ValueError):
            GPModel.load(path)
