import numpy as np
import pytest

from proxympc.simple_models import (
    CartPoleParams,
    ControlBounds,
    GRAVITY,
    SimpleModel,
    cartpole_geometry,
    cartpole_observation_map,
    cartpole_step,
    make_cartpole_model,
    make_rigidlink_model,
    observe,
    rigidlink_observation_map,
    rigidlink_step,
)


def cartpole_energy(z, params, pivot_height=0.0):
    """Independent energy functional computed straight from the state vector."""
    theta, length = cartpole_geometry(z, pivot_height)
    xd, thd = z[3], z[4]
    vmx = xd + length * thd * np.cos(theta)
    vmy = length * thd * np.sin(theta)
    return (0.5 * params.mass_cart * xd ** 2
            + 0.5 * params.mass_pole * (vmx ** 2 + vmy ** 2)
            + params.mass_pole * GRAVITY * z[2])


def hanging_state(x=0.0, length=1.0):
    return np.array([x, x, -length, 0.0, 0.0])


class TestCartPole:
    def test_hanging_rest_is_fixed_point(self):
        p = CartPoleParams()
        z = hanging_state()
        out = cartpole_step(z, np.zeros(1), p, dt=0.05)
        np.testing.assert_allclose(out, z, atol=1e-12)

    def test_energy_conserved_by_fine_step_oracle(self):
        p = CartPoleParams(mass_cart=1.2, mass_pole=0.4, angular_damping=0.0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = np.array([rng.uniform(-1, 1), 0.0, 0.0,
                          rng.uniform(-1, 1), rng.uniform(-3, 3)])
            length = rng.uniform(0.4, 1.2)
            theta = rng.uniform(-2.5, 2.5)
            z[1] = z[0] + length * np.sin(theta)
            z[2] = -length * np.cos(theta)
            e0 = cartpole_energy(z, p)
            out = cartpole_step(z, np.zeros(1), p, dt=0.05, substeps=100)
            e1 = cartpole_energy(out, p)
            scale = max(abs(e0), 1.0)
            assert abs(e1 - e0) / scale < 1e-6

    def test_coarse_step_matches_fine_oracle(self):
        p = CartPoleParams(mass_cart=0.8, mass_pole=0.3, angular_damping=0.07)
        rng = np.random.default_rng(1)
        for _ in range(10):
            length = rng.uniform(0.5, 1.0)
            theta = rng.uniform(-2, 2)
            z = np.array([rng.uniform(-1, 1), 0.0, 0.0,
                          rng.uniform(-1, 1), rng.uniform(-2, 2)])
            z[1] = z[0] + length * np.sin(theta)
            z[2] = -length * np.cos(theta)
            u = rng.uniform(-5, 5, size=1)
            coarse = cartpole_step(z, u, p, dt=0.05)
            fine = cartpole_step(z, u, p, dt=0.05, substeps=200)
            np.testing.assert_allclose(coarse, fine, atol=1e-4)

    def test_rk4_convergence_order(self):
        # halving the step size should shrink the error by about 2^4
        p = CartPoleParams(mass_cart=0.8, mass_pole=0.3, angular_damping=0.05)
        z = np.array([0.1, 0.1 + 0.8 * np.sin(1.5), -0.8 * np.cos(1.5), 0.4, 1.8])
        u = np.array([3.0])
        ref = cartpole_step(z, u, p, dt=0.05, substeps=512)
        e1 = np.max(np.abs(cartpole_step(z, u, p, dt=0.05, substeps=1) - ref))
        e2 = np.max(np.abs(cartpole_step(z, u, p, dt=0.05, substeps=2) - ref))
        e4 = np.max(np.abs(cartpole_step(z, u, p, dt=0.05, substeps=4) - ref))
        assert 8.0 < e1 / e2 < 32.0
        assert 8.0 < e2 / e4 < 32.0

    def test_vanishing_pole_mass_gives_point_mass_cart(self):
        p = CartPoleParams(mass_cart=2.0, mass_pole=1e-9, angular_damping=1e-15)
        z = hanging_state()
        force = 3.0
        out = cartpole_step(z, np.array([force]), p, dt=0.05)
        assert abs((out[3] - z[3]) - force / p.mass_cart * 0.05) < 1e-6

    def test_length_held_constant_and_mass_consistent(self):
        p = CartPoleParams()
        z = np.array([0.2, 0.9, -0.5, 0.3, 1.0])
        _, l0 = cartpole_geometry(z)
        out = cartpole_step(z, np.array([2.0]), p, dt=0.05)
        _, l1 = cartpole_geometry(out)
        assert abs(l1 - l0) < 1e-12

    def test_determinism(self):
        p = CartPoleParams()
        z = np.array([0.1, 0.6, -0.7, -0.2, 0.5])
        a = cartpole_step(z, np.array([1.3]), p, dt=0.05)
        b = cartpole_step(z, np.array([1.3]), p, dt=0.05)
        assert np.array_equal(a, b)

    def test_degenerate_length_rejected(self):
        p = CartPoleParams()
        z = np.array([0.0, 0.0, 0.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            cartpole_step(z, np.zeros(1), p, dt=0.05)

    def test_bad_params_rejected(self):
        with pytest.raises(ValueError):
            CartPoleParams(mass_cart=0.0)

    def test_batch_matches_single(self):
        model = make_cartpole_model()
        rng = np.random.default_rng(3)
        Z = np.empty((16, 5))
        for i in range(16):
            length = rng.uniform(0.4, 1.1)
            theta = rng.uniform(-2, 2)
            Z[i] = [rng.uniform(-1, 1), 0, 0, rng.uniform(-1, 1), rng.uniform(-2, 2)]
            Z[i, 1] = Z[i, 0] + length * np.sin(theta)
            Z[i, 2] = -length * np.cos(theta)
        U = rng.uniform(-5, 5, size=(16, 1))
        batch = model.step_batch(Z, U)
        for i in range(16):
            np.testing.assert_allclose(batch[i], model.step(Z[i], U[i]), rtol=0,
                                       atol=1e-12)


class TestRigidLink:
    def link(self):
        return np.array([0.0, 0.0, 0.5, 0.8, 0.0, 0.5])

    def test_rigid_translation(self):
        z = self.link()
        d = np.array([0.02, -0.01, 0.03])
        out = rigidlink_step(z, np.concatenate([d, d]))
        np.testing.assert_allclose(out, z + np.concatenate([d, d]), atol=1e-12)

    def test_opposed_axial_push_preserves_distance_and_midpoint(self):
        z = self.link()
        axis = (z[:3] - z[3:]) / np.linalg.norm(z[:3] - z[3:])
        a = 0.04 * axis
        out = rigidlink_step(z, np.concatenate([a, -a]))
        d_in = np.linalg.norm(z[:3] - z[3:])
        d_out = np.linalg.norm(out[:3] - out[3:])
        assert abs(d_in - d_out) < 1e-12
        np.testing.assert_allclose(0.5 * (out[:3] + out[3:]),
                                   0.5 * (z[:3] + z[3:]), atol=1e-12)

    def test_zero_action_is_identity(self):
        z = self.link()
        np.testing.assert_allclose(rigidlink_step(z, np.zeros(6)), z, atol=1e-15)

    def test_length_preserved_over_many_random_actions(self):
        # spec-level bound of 1e-9 m over a large batch of random actions
        rng = np.random.default_rng(7)
        model = make_rigidlink_model()
        n = 10 ** 6
        z = self.link()
        rest = np.linalg.norm(z[:3] - z[3:])
        worst = 0.0
        # chain the state so errors could accumulate if the projection leaked
        U = rng.uniform(-0.05, 0.05, size=(n, 6))
        Zb = np.tile(z, (1000, 1))
        for block in range(n // 1000):
            Zb = model.step_batch(Zb, U[block * 1000:(block + 1) * 1000])
            d = np.linalg.norm(Zb[:, :3] - Zb[:, 3:], axis=1)
            worst = max(worst, float(np.max(np.abs(d - rest))))
        assert worst < 1e-9

    def test_coincident_displacement_rejected(self):
        z = np.array([0.0, 0.0, 0.0, 0.1, 0.0, 0.0])
        u = np.array([0.1, 0, 0, 0, 0, 0.0])
        with pytest.raises(ValueError):
            rigidlink_step(z, u)


class TestObserve:
    def test_cartpole_selector(self):
        z = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        np.testing.assert_array_equal(observe(z, cartpole_observation_map()),
                                      [1.0, 2.0, 3.0])

    def test_rigidlink_identity(self):
        z = np.arange(6.0)
        np.testing.assert_array_equal(observe(z, rigidlink_observation_map()), z)

    def test_zero_maps_to_zero(self):
        np.testing.assert_array_equal(observe(np.zeros(5), cartpole_observation_map()),
                                      np.zeros(3))

    def test_linearity_exact(self):
        rng = np.random.default_rng(11)
        omap = cartpole_observation_map()
        for _ in range(50):
            z1, z2 = rng.standard_normal(5), rng.standard_normal(5)
            a, b = rng.standard_normal(2)
            lhs = observe(a * z1 + b * z2, omap)
            rhs = a * observe(z1, omap) + b * observe(z2, omap)
            assert np.array_equal(lhs, rhs)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            observe(np.zeros(4), cartpole_observation_map())


def test_control_bounds_clamp_and_sample():
    b = ControlBounds(lo=np.array([-1.0, 0.0]), hi=np.array([1.0, 2.0]))
    np.testing.assert_array_equal(b.clamp(np.array([5.0, -5.0])), [1.0, 0.0])
    rng = np.random.default_rng(0)
    s = b.sample(rng, size=100)
    assert np.all(s >= b.lo) and np.all(s <= b.hi)
