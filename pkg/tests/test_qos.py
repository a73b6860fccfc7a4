# -*- coding: utf-8 -*-

"""Testing the QoS quantities and the achievable rate."""

import math

import numpy as np
import pytest

from urllc_allocator import qos
from urllc_allocator.errors import InvalidInputError


@pytest.fixture(scope="module")
def user_qos():
    return qos.UserQoS.from_requirement(0.2, 8, 1e-5)


class TestQosExponent:
    def test_table_values(self, user_qos):
        assert user_qos.theta == pytest.approx(2.1551, abs=1e-4)
        assert user_qos.effective_bandwidth == pytest.approx(0.70797, rel=1e-4)
        assert user_qos.target == pytest.approx(0.2174, abs=1e-3)
        assert user_qos.eps_c == pytest.approx(5e-6)
        assert user_qos.eps_q == pytest.approx(5e-6)

    @pytest.mark.parametrize("arrival_rate", [0.01, 0.2, 1.0, 5.0])
    @pytest.mark.parametrize("dq_max", [1, 8, 20])
    def test_delay_violation_identity(self, arrival_rate, dq_max):
        u = qos.UserQoS.from_requirement(arrival_rate, dq_max, 1e-5)
        bound = math.exp(-u.theta * u.effective_bandwidth * dq_max)
        assert bound == pytest.approx(1e-5 / 2, rel=1e-9)

    def test_effective_bandwidth_above_rate(self, user_qos):
        assert user_qos.effective_bandwidth > user_qos.arrival_rate

    def test_small_theta_series(self):
        below = qos.effective_bandwidth(0.2, 0.5 * qos.SERIES_THRESHOLD)
        above = qos.effective_bandwidth(0.2, 2.0 * qos.SERIES_THRESHOLD)
        assert below == pytest.approx(0.2, rel=1e-7)
        assert above == pytest.approx(below, rel=1e-7)

    @pytest.mark.parametrize(
        "args", [(0.0, 8, 1e-5), (0.2, 0, 1e-5), (0.2, 8, 1.0)]
    )
    def test_invalid(self, args):
        with pytest.raises(InvalidInputError):
            qos.qos_exponent(*args)

    def test_overall_loss_is_split(self, user_qos):
        theta = qos.qos_exponent(0.2, 8, 1e-5)
        assert theta == user_qos.theta
        assert theta == pytest.approx(math.log1p(-math.log(5e-6) / 1.6))
        assert qos.qos_exponent(0.2, 8, 1e-5, split=0.1) == pytest.approx(
            math.log1p(-math.log(1e-6) / 1.6)
        )

    def test_invalid_split(self):
        with pytest.raises(InvalidInputError):
            qos.UserQoS.from_requirement(0.2, 8, 1e-5, split=1.0)


class TestGaussianQ:
    @pytest.mark.parametrize("p", [1e-12, 1e-9, 5e-6, 1e-3, 0.1, 0.4999])
    def test_round_trip(self, p):
        z = qos.gaussian_q_inv(p)
        assert float(qos.gaussian_q(z)) == pytest.approx(p, rel=1e-10)

    def test_known_value(self):
        assert qos.gaussian_q_inv(5e-6) == pytest.approx(4.4172, abs=1e-4)

    @pytest.mark.parametrize("p", [0.0, 0.5, 0.7, -1e-3])
    def test_domain(self, p):
        with pytest.raises(InvalidInputError):
            qos.gaussian_q_inv(p)


class TestRate:
    def test_example(self, symmetric4, user_qos):
        alpha = float(symmetric4.alphas[0])
        s = qos.achievable_rate(2e5, 5.0, alpha, 8.0, user_qos, symmetric4)
        # ln(1+snr) ~ 9.34, dispersion term ~ 1.40, c W ~ 0.0902
        assert s == pytest.approx(0.716, rel=0.01)

    def test_lower_bound_of_exact_dispersion(self, symmetric4, user_qos, rng):
        alpha = float(symmetric4.alphas[0])
        g = rng.gamma(8.0, 1.0, size=1000)
        bound = qos.achievable_rate(2e5, 1e-3, alpha, g, user_qos, symmetric4)
        exact = qos.achievable_rate(
            2e5, 1e-3, alpha, g, user_qos, symmetric4, exact_dispersion=True
        )
        assert np.all(exact >= bound)

    def test_dispersion_close_to_one_at_high_snr(self):
        assert qos.channel_dispersion(10 ** 0.5) > 0.9
        assert qos.channel_dispersion(0.0) == 0.0

    def test_negative_rate_allowed(self, symmetric4, user_qos):
        alpha = float(symmetric4.alphas[0])
        s = qos.achievable_rate(10.0, 1e-12, alpha, 0.1, user_qos, symmetric4)
        assert s < 0

    @pytest.mark.parametrize("bandwidth", [0.0, -1.0])
    def test_invalid_bandwidth(self, symmetric4, user_qos, bandwidth):
        with pytest.raises(InvalidInputError):
            qos.achievable_rate(
                bandwidth, 1.0, 1e-13, 8.0, user_qos, symmetric4
            )

    def test_invalid_power(self, symmetric4, user_qos):
        with pytest.raises(InvalidInputError):
            qos.achievable_rate(2e5, -1.0, 1e-13, 8.0, user_qos, symmetric4)

    def test_derivatives(self, symmetric4, user_qos):
        alpha = float(symmetric4.alphas[0])
        w, p, g = 1.5e5, 3.0, 6.5
        d_power, d_bandwidth = qos.rate_derivatives(
            w, p, alpha, g, user_qos.qinv_c, symmetric4
        )

        def rate(w_, p_):
            return qos.finite_blocklength_rate(
                w_, p_, alpha, g, user_qos.qinv_c, symmetric4
            )

        hw, hp = 1e-3 * w, 1e-4 * p
        fd_w = (rate(w + hw, p) - rate(w - hw, p)) / (2 * hw)
        fd_p = (rate(w, p + hp) - rate(w, p - hp)) / (2 * hp)
        assert d_bandwidth == pytest.approx(fd_w, rel=1e-5)
        assert d_power == pytest.approx(fd_p, rel=1e-5)


class TestConstraintForms:
    @pytest.mark.parametrize("factor", [0.9, 0.999, 1.001, 1.2])
    def test_capacity_equivalence(self, user_qos, factor):
        mean = user_qos.target * factor
        capacity = qos.effective_capacity(mean, user_qos.theta)
        assert (capacity >= user_qos.effective_bandwidth) == (
            mean <= user_qos.target
        )

    def test_lhs_sample(self, user_qos):
        assert qos.qos_lhs_sample(
            user_qos.effective_bandwidth, user_qos
        ) == pytest.approx(user_qos.target)

    def test_build_qos(self, road3):
        built = qos.build_qos(road3)
        assert len(built) == 3
        assert built[0] is built[1]
        arrays = qos.QosArrays.stack(built)
        assert arrays.theta.shape == (3,)
        np.testing.assert_allclose(arrays.target, built[0].target)
