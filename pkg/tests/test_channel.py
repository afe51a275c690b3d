import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from channel import (
    build_channels, echo_channel, entity_channel, entity_channel_derivatives,
    pathloss_echo, pathloss_user, rx_steering, steering_phase, steering_phase_derivatives,
    target_channel, tx_steering, user_channel,
)
from config import get_default_config
from scenario import build_scenario, spherical_to_cartesian


@pytest.fixture
def scenario():
    return build_scenario(get_default_config(), seed=1)


class TestSteeringPhase:
    def test_origin_has_zero_phase(self):
        assert steering_phase(0.7, 1.1, 5.0, 0.0, 0.0, 6e-3) == 0.0

    def test_broadside_zero_linear_term(self):
        # theta = phi = pi/2: only the quadratic terms remain
        lam, d, x = 6e-3, 4.0, 0.01
        expected = (2 * np.pi / lam) * (-x ** 2 / (2 * d))
        assert steering_phase(np.pi / 2, np.pi / 2, d, x, 0.0, lam) == pytest.approx(expected)

    def test_rejects_non_positive_range(self):
        with pytest.raises(ValueError):
            steering_phase(0.5, 0.5, 0.0, 0.0, 0.0, 6e-3)

    @given(st.floats(0.3, 2.8), st.floats(0.3, 2.8), st.floats(1.0, 30.0),
           st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
    def test_derivatives_match_finite_differences(self, theta, phi, d, x, z):
        lam, h = 6e-3, 1e-7
        d_x, d_z, d_angles = steering_phase_derivatives(theta, phi, d, np.array([x]), np.array([z]), lam)

        def phase(t=theta, p=phi, r=d, xx=x, zz=z):
            return steering_phase(t, p, r, xx, zz, lam)

        fd_x = (phase(xx=x + h) - phase(xx=x - h)) / (2 * h)
        fd_theta = (phase(t=theta + h) - phase(t=theta - h)) / (2 * h)
        fd_d = (phase(r=d + h) - phase(r=d - h)) / (2 * h)
        assert d_x[0] == pytest.approx(fd_x, rel=1e-5, abs=1e-3)
        assert d_angles[0, 0] == pytest.approx(fd_theta, rel=1e-5, abs=1e-3)
        assert d_angles[2, 0] == pytest.approx(fd_d, rel=1e-4, abs=1e-4)


class TestSteeringVectors:
    def test_unit_modulus(self, scenario):
        a = tx_steering(0.9, 1.2, 6.0, scenario.tx)
        assert_allclose(np.abs(a), 1.0)
        b = rx_steering(0.9, 1.2, 6.0, scenario.rx)
        assert_allclose(np.abs(b), 1.0)


class TestPathLoss:
    def test_user_amplitude(self, scenario):
        b = np.array([0.0, 5.0, 0.0])
        amp = pathloss_user(b, scenario.tx)
        assert amp[0] == pytest.approx(1.0 / (np.sqrt(4 * np.pi) * 5.0))

    def test_echo_is_outer_product(self, scenario):
        b = np.array([1.0, 6.0, 0.5])
        psi = pathloss_echo(b, scenario.tx, scenario.rx)
        assert psi.shape == (scenario.rx.n, scenario.tx.n)
        assert np.linalg.matrix_rank(psi) == 1

    def test_coincident_point_rejected(self, scenario):
        with pytest.raises(ValueError, match="coincides"):
            pathloss_user(np.zeros(3), scenario.tx)


# ─── channels ─────────────────────────────────────────────────────────

class TestEntityChannel:
    def test_far_user_weaker(self, scenario):
        near = entity_channel(1.0, 1.2, 3.0, scenario.tx)
        far = entity_channel(1.0, 1.2, 15.0, scenario.tx)
        assert np.linalg.norm(far) < np.linalg.norm(near)

    def test_derivatives_match_finite_differences(self, scenario):
        lam = scenario.tx.wavelength
        x, z = scenario.tx.x.copy(), scenario.tx.z.copy()
        h, dh_x, dh_z = entity_channel_derivatives(1.1, 1.3, 4.0, x, z, lam)
        step = 1e-8
        plus, _, _ = entity_channel_derivatives(1.1, 1.3, 4.0, x + step, z, lam)
        minus, _, _ = entity_channel_derivatives(1.1, 1.3, 4.0, x - step, z, lam)
        assert_allclose(dh_x, (plus - minus) / (2 * step), rtol=1e-5)
        plus, _, _ = entity_channel_derivatives(1.1, 1.3, 4.0, x, z + step, lam)
        minus, _, _ = entity_channel_derivatives(1.1, 1.3, 4.0, x, z - step, lam)
        assert_allclose(dh_z, (plus - minus) / (2 * step), rtol=1e-5)

    def test_matches_entity_channel(self, scenario):
        h, _, _ = entity_channel_derivatives(1.1, 1.3, 4.0, scenario.tx.x, scenario.tx.z, scenario.tx.wavelength)
        assert_allclose(h, entity_channel(1.1, 1.3, 4.0, scenario.tx))


class TestChannelSet:
    def test_shapes(self, scenario):
        ch = build_channels(scenario.placement, scenario.tx, scenario.rx)
        cfg = scenario.config
        assert ch.users.shape == (cfg.K, cfg.n_t)
        assert ch.targets.shape == (cfg.L, cfg.n_t)
        assert ch.G.shape == (cfg.n_r, cfg.n_t)

    def test_target_is_scatterer_sum(self, scenario):
        p = scenario.placement
        expected = sum(entity_channel(*row, scenario.tx) for row in p.scatterers[0])
        assert_allclose(target_channel(p, scenario.tx)[0], expected)

    def test_echo_is_sum_over_targets(self, scenario):
        p = scenario.placement
        total = echo_channel(p, scenario.tx, scenario.rx)
        parts = sum(echo_channel(p, scenario.tx, scenario.rx, targets=[l]) for l in range(p.L))
        assert_allclose(total, parts)

    def test_moving_antennas_changes_users(self, scenario):
        before = user_channel(scenario.placement, scenario.tx)
        moved = scenario.tx.with_positions(scenario.tx.u + np.r_[0.0, np.full(scenario.tx.n - 1, 0.01),
                                                                 np.zeros(scenario.tx.n)])
        after = user_channel(scenario.placement, moved)
        assert_allclose(before[:, 0], after[:, 0])
        assert not np.allclose(before[:, 1:], after[:, 1:])

    def test_single_scatterer_echo(self, scenario):
        theta, phi, d = scenario.placement.scatterers[0, 0]
        b = spherical_to_cartesian(theta, phi, d)
        a_t = tx_steering(theta, phi, d, scenario.tx)
        a_r = rx_steering(theta, phi, d, scenario.rx)
        expected = pathloss_echo(b, scenario.tx, scenario.rx) * np.outer(a_r.conj(), a_t)
        assert np.all(np.isfinite(expected))
        assert_allclose(np.abs(expected), pathloss_echo(b, scenario.tx, scenario.rx))
