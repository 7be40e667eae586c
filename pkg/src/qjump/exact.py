"""Exact pathwise solution of the jump quantum-trajectory equation on a Poisson realization.

Between detections the state follows the deterministic flow of :mod:`qjump.flow`;
a realization point ``(τ, ξ)`` is a detection iff ``ξ ≤ Tr[J(ρ_{τ−})]``, in which
case the state jumps to ``J(ρ_{τ−})/Tr[J(ρ_{τ−})]``. The counting process of
detections has stochastic intensity ``Tr[J(ρ_{t−})]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import (
    FlowParams,
    JumpAtZeroIntensityError,
    apply_jump,
    integrate_flow_with_intensity,
    propagate,
)
from .poisson import PoissonRealization, RngStream, accepts, intensity_bound, sample_realization
from .qmatrix import check_state

__all__ = [
    "JumpAtZeroIntensityError",
    "MonteCarloResult",
    "TrajectoryPath",
    "apply_jump",
    "monte_carlo_mean",
    "solve_path",
]


@dataclass
class TrajectoryPath:
    """A càdlàg path sampled on ``grid``: ``states[j]`` is the post-jump value at ``grid[j]``.

    ``point_intensity[i]`` is the left-limit intensity seen by realization point
    ``i`` and ``accepted[i]`` whether that point was a detection.
    ``compensator[j]`` is ``∫_0^{grid[j]} Tr[J(ρ_s)] ds`` and ``jump_states[m]`` the
    post-jump state at ``jump_times[m]``.
    """

    grid: np.ndarray
    states: np.ndarray
    jump_times: np.ndarray
    jump_states: np.ndarray
    counting_values: np.ndarray
    compensator: np.ndarray
    compensator_T: float
    point_intensity: np.ndarray
    accepted: np.ndarray
    realization_digest: str

    @property
    def n_jumps(self) -> int:
        return int(self.jump_times.size)

    def rows(self):
        for t, rho, N in zip(self.grid, self.states, self.counting_values):
            flat = rho.reshape(-1)
            yield [t] + [v for z in flat for v in (z.real, z.imag)] + [int(N)]


def _check_grid(grid, T: float) -> np.ndarray:
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if grid.size and (grid[0] < 0 or grid[-1] > T or np.any(np.diff(grid) <= 0)):
        raise ValueError("grid must be strictly increasing inside [0, T]")
    return grid


def _solve_propagator(rho0, r: PoissonRealization, params: FlowParams, grid):
    states = np.empty((grid.size, 2, 2), dtype=complex)
    comp = np.empty(grid.size)
    lam_pts = np.empty(len(r))
    acc = np.zeros(len(r), dtype=bool)
    jumps = []
    state, s, comp_s, idx = rho0, 0.0, 0.0, 0
    for i, (tau, xi) in enumerate(zip(r.times, r.marks)):
        pre, log_tr = propagate(state, tau - s, params)
        lam = float(params.jump_intensity(pre))
        lam_pts[i] = lam
        if not accepts(xi, lam):
            continue
        j = int(np.searchsorted(grid, tau, side="left"))
        if j > idx:
            seg, seg_log = propagate(state, grid[idx:j] - s, params)
            states[idx:j] = seg
            comp[idx:j] = comp_s - seg_log
        comp_s -= float(log_tr)
        state = apply_jump(pre, params)
        s, idx = float(tau), j
        acc[i] = True
        jumps.append((tau, state))
    if idx < grid.size:
        seg, seg_log = propagate(state, grid[idx:] - s, params)
        states[idx:] = seg
        comp[idx:] = comp_s - seg_log
    _, log_tr = propagate(state, r.T - s, params)
    return states, comp, comp_s - float(log_tr), lam_pts, acc, jumps


def _solve_rk4(rho0, r: PoissonRealization, params: FlowParams, grid, tol):
    states = np.empty((grid.size, 2, 2), dtype=complex)
    comp = np.empty(grid.size)
    lam_pts = np.empty(len(r))
    acc = np.zeros(len(r), dtype=bool)
    jumps = []
    state, s, integral, idx = rho0, 0.0, 0.0, 0

    def advance(target):
        nonlocal state, s, integral
        state, q = integrate_flow_with_intensity(state, target - s, params, tol)
        integral += q
        s = target

    for i, (tau, xi) in enumerate(zip(r.times, r.marks)):
        while idx < grid.size and grid[idx] < tau:
            advance(grid[idx])
            states[idx], comp[idx] = state, integral
            idx += 1
        advance(float(tau))
        lam = float(params.jump_intensity(state))
        lam_pts[i] = lam
        if accepts(xi, lam):
            state = apply_jump(state, params)
            acc[i] = True
            jumps.append((tau, state))
    while idx < grid.size:
        advance(grid[idx])
        states[idx], comp[idx] = state, integral
        idx += 1
    advance(r.T)
    return states, comp, integral, lam_pts, acc, jumps


def solve_path(rho0, realization: PoissonRealization, params: FlowParams, grid,
               method: str = "propagator", tol: float = 1e-3) -> TrajectoryPath:
    """Solve the jump equation driven by ``realization`` and sample it on ``grid``.

    ``method="propagator"`` evaluates the between-jump flow in closed form;
    ``method="rk4"`` integrates it with fixed-step RK4 of step at most ``tol``.
    Grid times are always re-propagated from the last detection, never interpolated.
    """
    rho0 = check_state(rho0, what="rho0")
    K = intensity_bound(params.C)
    if realization.K < K - 1e-12:
        raise ValueError(f"realization height {realization.K} is below the intensity bound {K}")
    grid = _check_grid(grid, realization.T)
    if method == "propagator":
        out = _solve_propagator(rho0, realization, params, grid)
    elif method == "rk4":
        out = _solve_rk4(rho0, realization, params, grid, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    states, comp, comp_T, lam_pts, acc, jumps = out
    jump_times = np.array([t for t, _ in jumps], dtype=float)
    jump_states = np.array([m for _, m in jumps], dtype=complex).reshape(-1, 2, 2)
    counts = np.searchsorted(jump_times, grid, side="right")
    return TrajectoryPath(grid, states, jump_times, jump_states, counts, comp, comp_T,
                          lam_pts, acc, realization.digest())


@dataclass
class MonteCarloResult:
    grid: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    jump_counts: np.ndarray
    compensators: np.ndarray
    n_paths: int

    @property
    def mean_count(self) -> float:
        return float(self.jump_counts.mean())


def _stream(rng, path: int) -> RngStream:
    if isinstance(rng, RngStream):
        return RngStream(rng.seed, path, rng.domain)
    return RngStream(int(rng), path)


def monte_carlo_mean(spec, rho0, T: float, grid, n_paths: int, rng,
                     method: str = "propagator", first_path: int = 0) -> MonteCarloResult:
    """Pointwise mean and standard error of exact paths over independent realizations.

    ``rng`` is a master seed (or an :class:`RngStream` whose seed/domain are
    used); path ``p`` draws its realization from stream ``first_path + p``.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    params = FlowParams(spec.H, spec.C)
    K = intensity_bound(params.C)
    grid = _check_grid(grid, T)
    # Welford updates: an ensemble of identical paths gives a stderr of exactly zero
    mean = np.zeros((grid.size, 2, 2), dtype=complex)
    m2_re = np.zeros((grid.size, 2, 2))
    m2_im = np.zeros((grid.size, 2, 2))
    counts = np.empty(n_paths, dtype=np.int64)
    comps = np.empty(n_paths)
    for p in range(n_paths):
        r = sample_realization(K, T, _stream(rng, first_path + p))
        path = solve_path(rho0, r, params, grid, method=method)
        delta = path.states - mean
        mean = mean + delta / (p + 1)
        delta2 = path.states - mean
        m2_re += delta.real * delta2.real
        m2_im += delta.imag * delta2.imag
        counts[p] = path.n_jumps
        comps[p] = path.compensator_T
    scale = 1.0 / ((n_paths - 1) * n_paths)
    stderr = np.sqrt(m2_re * scale) + 1j * np.sqrt(m2_im * scale)
    return MonteCarloResult(grid, mean, stderr, counts, comps, n_paths)

