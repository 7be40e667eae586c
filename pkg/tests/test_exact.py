import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qjump.discrete import ModelSpec, amplitude_damping
from qjump.exact import JumpAtZeroIntensityError, apply_jump, monte_carlo_mean, solve_path
from qjump.flow import FlowParams, propagate
from qjump.poisson import PoissonRealization, RngStream, intensity_bound, sample_realization
from qjump.qmatrix import E01, EXCITED, GROUND, adjoint, frobenius_norm, mat_exp, random_state, validate_state

AD = amplitude_damping()
AD_P = FlowParams(AD.H, AD.C)
DRIVEN = ModelSpec(np.array([[0.5, 0.4], [0.4, -0.5]]), E01)
DRIVEN_P = FlowParams(DRIVEN.H, DRIVEN.C)
GRID = np.linspace(0, 1, 11)


def test_apply_jump_reexported():
    np.testing.assert_allclose(apply_jump(EXCITED, AD_P), GROUND)
    with pytest.raises(JumpAtZeroIntensityError):
        apply_jump(GROUND, AD_P)


class TestSolvePath:
    def test_empty_realization_is_flow(self):
        rho0 = random_state(np.random.default_rng(0))
        path = solve_path(rho0, PoissonRealization(1.0, 1.0), DRIVEN_P, GRID)
        np.testing.assert_allclose(path.states, propagate(rho0, GRID, DRIVEN_P)[0], atol=1e-14)
        assert not path.counting_values.any() and path.n_jumps == 0

    def test_no_coupling_is_unitary(self):
        H = np.array([[0.3, 0.1j], [-0.1j, -0.2]])
        p = FlowParams(H, np.zeros((2, 2)))
        rho0 = random_state(np.random.default_rng(1))
        r = PoissonRealization(1.0, 1.0, [0.2, 0.6], [0.0, 0.5])  # points exist but intensity is 0
        path = solve_path(rho0, r, p, GRID)
        assert path.n_jumps == 0 and not path.accepted.any()
        U = mat_exp(H, -1.0)[:2, :2]
        assert frobenius_norm(path.states[-1] - U @ rho0 @ adjoint(U)) <= 1e-13

    def test_canonical_single_jump(self):
        r = PoissonRealization(1.0, 1.0, [0.25, 0.55, 0.8], [0.9, 0.1, 0.3])
        path = solve_path(EXCITED, r, AD_P, GRID)
        # the first point is under the unit intensity and is a detection; afterwards Tr J = 0
        assert path.accepted.tolist() == [True, False, False]
        assert path.jump_times.tolist() == [0.25]
        np.testing.assert_allclose(path.states[GRID < 0.25], np.broadcast_to(EXCITED, (3, 2, 2)), atol=1e-15)
        np.testing.assert_allclose(path.states[GRID > 0.25], np.broadcast_to(GROUND, (8, 2, 2)), atol=1e-15)
        assert path.point_intensity.tolist() == pytest.approx([1.0, 0.0, 0.0], abs=1e-15)
        assert path.compensator_T == pytest.approx(0.25, abs=1e-14)

    def test_grid_point_at_jump_is_post_jump(self):
        r = PoissonRealization(1.0, 1.0, [0.5], [0.2])
        path = solve_path(EXCITED, r, AD_P, GRID)
        np.testing.assert_allclose(path.states[5], GROUND, atol=1e-15)
        assert path.counting_values[5] == 1 and path.counting_values[4] == 0

    def test_methods_agree(self):
        for p in range(5):
            r = sample_realization(1.0, 2.0, RngStream(3, p))
            rho0 = random_state(np.random.default_rng(p))
            grid = np.linspace(0, 2, 21)
            a = solve_path(rho0, r, DRIVEN_P, grid)
            b = solve_path(rho0, r, DRIVEN_P, grid, method="rk4")
            assert a.accepted.tolist() == b.accepted.tolist()
            assert np.max(frobenius_norm(a.states - b.states)) <= 1e-9
            assert abs(a.compensator_T - b.compensator_T) <= 1e-5

    def test_rejects_low_realization(self):
        with pytest.raises(ValueError, match="intensity bound"):
            solve_path(EXCITED, PoissonRealization(1.0, 0.5), AD_P, GRID)

    def test_rejects_bad_grid(self):
        r = PoissonRealization(1.0, 1.0)
        with pytest.raises(ValueError):
            solve_path(EXCITED, r, AD_P, [0.5, 0.2])
        with pytest.raises(ValueError):
            solve_path(EXCITED, r, AD_P, [0.0, 1.5])
        with pytest.raises(ValueError):
            solve_path(EXCITED, r, AD_P, GRID, method="euler")

    def test_rows(self):
        path = solve_path(EXCITED, PoissonRealization(1.0, 1.0, [0.5], [0.2]), AD_P, GRID)
        rows = list(path.rows())
        assert len(rows) == 11 and len(rows[0]) == 10
        assert rows[-1][-1] == 1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_states_valid_for_random_models(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        C = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        p = FlowParams((h + adjoint(h)) / 2, C)
        r = sample_realization(intensity_bound(C), 1.0, RngStream(seed))
        path = solve_path(random_state(rng), r, p, GRID)
        assert validate_state(path.states, tol=1e-9).ok
        if path.n_jumps:
            assert validate_state(path.jump_states, tol=1e-9).ok
        # detections happen exactly at points under the curve
        assert np.array_equal(path.accepted, r.marks <= path.point_intensity)


class TestSingleJumpLaw:
    def test_counts(self):
        spec = amplitude_damping(H=np.zeros((2, 2)))
        res = monte_carlo_mean(spec, EXCITED, 1.0, [0.0, 1.0], 10_000, RngStream(20261016))
        p0 = math.exp(-1)
        freq0 = np.mean(res.jump_counts == 0)
        assert abs(freq0 - p0) <= 4 * math.sqrt(p0 * (1 - p0) / 10_000)
        assert res.jump_counts.max() == 1


class TestMonteCarloMean:
    def test_deterministic_model(self):
        spec = ModelSpec(np.diag([0.4, -0.4]), np.zeros((2, 2)))
        rho0 = random_state(np.random.default_rng(2))
        res = monte_carlo_mean(spec, rho0, 1.0, GRID, 5, 1)
        assert not res.stderr.any()
        np.testing.assert_allclose(res.mean, propagate(rho0, GRID, FlowParams(spec.H, spec.C))[0], atol=1e-15)

    def test_canonical_master_equation(self):
        grid = np.array([0.0, 0.5, 1.0, 2.0])
        res = monte_carlo_mean(AD, EXCITED, 2.0, grid, 10_000, RngStream(20261016))
        for t, m, s in zip(grid[1:], res.mean[1:], res.stderr[1:]):
            assert abs(m[1, 1].real - math.exp(-t)) <= 4 * s[1, 1].real

    def test_path_order_is_stream_order(self):
        a = monte_carlo_mean(DRIVEN, EXCITED, 1.0, GRID, 6, 9)
        b1 = monte_carlo_mean(DRIVEN, EXCITED, 1.0, GRID, 3, 9)
        b2 = monte_carlo_mean(DRIVEN, EXCITED, 1.0, GRID, 3, 9, first_path=3)
        assert a.jump_counts.tolist() == b1.jump_counts.tolist() + b2.jump_counts.tolist()

    def test_time_lipschitz(self):
        # E‖μ_t − μ_s‖ ≤ M|t − s| with M = sup‖f‖ + 2K
        rng = np.random.default_rng(3)
        states = np.array([random_state(rng) for _ in range(2000)])
        M = float(np.max(frobenius_norm(DRIVEN_P.drift(states)))) + 2 * intensity_bound(DRIVEN.C)
        s = 0.5
        grid = np.array([s, s + 0.01, s + 0.02, s + 0.04])
        paths = [solve_path(EXCITED, sample_realization(1.0, 1.0, RngStream(4, p)), DRIVEN_P, grid)
                 for p in range(1000)]
        mu = np.array([p.states for p in paths])
        for j, dt in zip((1, 2, 3), (0.01, 0.02, 0.04)):
            ratio = float(np.mean(frobenius_norm(mu[:, j] - mu[:, 0]))) / dt
            assert ratio <= M
