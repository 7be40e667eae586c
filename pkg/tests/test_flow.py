import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qjump.flow import (
    FlowParams,
    JumpAtZeroIntensityError,
    apply_jump,
    drift_f,
    integrate_flow,
    integrate_flow_with_intensity,
    integrate_master,
    integrate_pure,
    jump_intensity,
    lindblad,
    master_solution,
    propagate,
    pure_drift,
)
from qjump.qmatrix import E01, EXCITED, GROUND, I2, adjoint, frobenius_norm, mat_exp, projector_from_vector, purity_defect, random_state, trace

AD = FlowParams(np.diag([0.5, -0.5]), E01)
AD0 = FlowParams(np.zeros((2, 2)), E01)
ZERO = FlowParams(np.zeros((2, 2)), np.zeros((2, 2)))
DRIVEN = FlowParams(np.array([[0.5, 0.4], [0.4, -0.5]]), E01)


def rand_params(seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    C = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    return FlowParams((h + adjoint(h)) / 2, C)


class TestVectorFields:
    def test_lindblad_examples(self):
        rho = random_state(np.random.default_rng(0))
        assert not np.any(lindblad(rho, ZERO))
        H = np.array([[0.2, 0.1j], [-0.1j, -0.3]])
        out = lindblad(rho, FlowParams(H, np.zeros((2, 2))))
        np.testing.assert_allclose(out, -1j * (H @ rho - rho @ H), atol=1e-15)
        assert abs(trace(out)) < 1e-15
        np.testing.assert_allclose(lindblad(EXCITED, AD), np.diag([1, -1]), atol=1e-15)

    def test_intensity_examples(self):
        rho = random_state(np.random.default_rng(1))
        assert jump_intensity(rho, ZERO) == 0
        assert jump_intensity(EXCITED, AD) == 1
        assert jump_intensity(GROUND, AD) == 0

    def test_drift_examples(self):
        rho = random_state(np.random.default_rng(2))
        assert not np.any(drift_f(rho, FlowParams(np.zeros((2, 2)), np.zeros((2, 2)))))
        np.testing.assert_array_equal(drift_f(EXCITED, AD), np.zeros((2, 2)))
        np.testing.assert_array_equal(drift_f(GROUND, AD), np.zeros((2, 2)))

    def test_drift_generator_form(self):
        # f(ρ) = Gρ + ρG† + Tr[J(ρ)] ρ
        p = rand_params(3)
        rho = random_state(np.random.default_rng(3))
        G = p.G
        expected = G @ rho + rho @ adjoint(G) + p.jump_trace(rho) * rho
        np.testing.assert_allclose(drift_f(rho, p), expected, atol=1e-13)

    def test_drift_traceless_on_states(self):
        p = rand_params(4)
        rng = np.random.default_rng(4)
        states = np.array([random_state(rng) for _ in range(50)])
        assert np.max(np.abs(trace(drift_f(states, p)))) < 1e-13

    def test_pure_drift_examples(self):
        x = np.array([0.6, 0.8j])
        assert not np.any(pure_drift(x, ZERO))
        np.testing.assert_array_equal(pure_drift(np.array([0, 1]), AD0), np.zeros(2))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_pure_drift_norm_conserving(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=2) + 1j * rng.normal(size=2)
        x /= np.linalg.norm(x)
        p = rand_params(seed % 97)
        assert abs(np.vdot(x, pure_drift(x, p)).real) <= 1e-13

    def test_pure_and_density_drifts_agree(self):
        # d(xx†) = f(xx†) when dx = pure_drift(x)
        p = rand_params(5)
        x = np.array([0.6, 0.8j])
        v = pure_drift(x, p)
        lhs = np.outer(v, x.conj()) + np.outer(x, v.conj())
        np.testing.assert_allclose(lhs, drift_f(np.outer(x, x.conj()), p), atol=1e-13)


class TestJump:
    def test_examples(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            rho = random_state(rng)
            np.testing.assert_allclose(apply_jump(rho, AD), GROUND, atol=1e-15)
            np.testing.assert_allclose(apply_jump(rho, FlowParams(np.zeros((2, 2)), I2)), rho, atol=1e-15)
            np.testing.assert_allclose(apply_jump(rho, FlowParams(np.zeros((2, 2)), 2 * I2)), rho, atol=1e-15)

    def test_zero_intensity_raises(self):
        with pytest.raises(JumpAtZeroIntensityError):
            apply_jump(GROUND, AD)


class TestPropagator:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_rk4(self, seed):
        p = rand_params(seed)
        rho = random_state(np.random.default_rng(seed))
        states, log_tr = propagate(rho, np.array([0.3, 1.0]), p)
        for t, s, lt in zip((0.3, 1.0), states, log_tr):
            y, integral = integrate_flow_with_intensity(rho, t, p, tol=1e-3)
            assert frobenius_norm(s - y) <= 1e-9
            # the RK4 route integrates the intensity with the trapezoid rule: O(h²) error
            assert abs(-lt - integral) <= 5e-5 * max(1, integral)

    def test_zero_time(self):
        rho = random_state(np.random.default_rng(7))
        s, lt = propagate(rho, 0.0, AD)
        np.testing.assert_allclose(s, rho, atol=1e-15)
        assert lt == pytest.approx(0, abs=1e-15)

    def test_canonical_excited_is_fixed(self):
        s, lt = propagate(EXCITED, np.linspace(0, 2, 5), AD)
        np.testing.assert_allclose(s, np.broadcast_to(EXCITED, s.shape), atol=1e-15)
        # the intensity stays one, so ∫ Tr J = t
        np.testing.assert_allclose(-lt, np.linspace(0, 2, 5), atol=1e-14)


class TestIntegrators:
    def test_zero_step(self):
        rho = random_state(np.random.default_rng(8))
        res = integrate_flow(rho, 0.0, AD)
        np.testing.assert_array_equal(res.state, rho)
        assert res.steps == 0

    def test_unitary_oracle(self):
        H = np.array([[0.7, 0.2 - 0.3j], [0.2 + 0.3j, -0.4]])
        p = FlowParams(H, np.zeros((2, 2)))
        rho = random_state(np.random.default_rng(9))
        U = mat_exp(H, -1.0)[:2, :2]
        res = integrate_flow(rho, 1.0, p)
        assert frobenius_norm(res.state - U @ rho @ adjoint(U)) <= 1e-8

    @pytest.mark.parametrize("params", [AD, DRIVEN])
    def test_purity_preserved(self, params):
        rho = projector_from_vector(np.array([0.6, 0.8j]))
        res = integrate_flow(rho, 1.0, params)
        assert purity_defect(res.state) <= 1e-7
        assert res.hermiticity <= 1e-12 and res.min_eigenvalue >= -1e-12

    def test_master_examples(self):
        rho = random_state(np.random.default_rng(10))
        np.testing.assert_array_equal(integrate_master(rho, 1.0, ZERO), rho)
        for t in (0.5, 1.0, 2.0):
            assert integrate_master(EXCITED, t, AD)[1, 1].real == pytest.approx(math.exp(-t), abs=1e-12)

    def test_master_trace(self):
        p = rand_params(11)
        rho = random_state(np.random.default_rng(11))
        y = rho
        for _ in range(10):
            y = integrate_master(y, 1.0, p, tol=1e-3)
            assert abs(trace(y) - 1) <= 1e-3

    def test_master_matches_superoperator(self):
        rho = random_state(np.random.default_rng(12))
        exact = master_solution(rho, [0.5, 1.0], DRIVEN)
        for t, m in zip((0.5, 1.0), exact):
            assert frobenius_norm(integrate_master(rho, t, DRIVEN) - m) <= 1e-11

    def test_pure_integrator_norm(self):
        x = integrate_pure(np.array([0.6, 0.8j]), 1.0, DRIVEN)
        assert abs(np.linalg.norm(x) - 1) <= 1e-10

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            integrate_flow(EXCITED, -0.1, AD)
