"""Euler scheme for the jump quantum-trajectory equation on a shared Poisson realization.

One step over the slab ``[k/n, (k+1)/n)`` freezes the coefficients at ``θ_k``:

    θ_{k+1} = θ_k + f(θ_k)/n + q(θ_k) · #{points in the slab with ξ ≤ Re Tr[J(θ_k)]}

where ``q`` is a smooth version of the jump displacement ``J(ρ)/Tr[J(ρ)] − ρ``.
When ``C`` is singular the normalized jump is not smooth; the whole problem is
then conjugated by a unitary ``V`` for which ``VCV†`` has a zero second row, so
that the displacement becomes ``E00 − θ`` in the new frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .discrete import n_steps
from .exact import TrajectoryPath, solve_path
from .flow import FlowParams
from .poisson import (
    PoissonRealization,
    RealizationBatch,
    RngStream,
    accepts,
    intensity_bound,
    sample_realization,
    slab_count,
)
from .qmatrix import GROUND, adjoint, as_complex, check_state, frobenius_norm, trace

EPS_GUARD = 1e-12
SINGULAR_TOL = 1e-10


@dataclass(frozen=True)
class JumpFunctionSpec:
    """Smooth jump displacement ``q`` and the frame it lives in.

    ``invertible``: ``q(θ) = J(θ)/max(Re Tr J(θ), ε) − θ`` with ``V = I``.
    ``transformed``: ``q(θ) = E00 − θ`` in the frame ``θ ↦ VθV†``.
    """

    mode: str
    V: np.ndarray
    epsilon_guard: float = EPS_GUARD

    def q(self, theta, params: FlowParams):
        theta = as_complex(theta)
        if self.mode == "transformed":
            return GROUND - theta
        J = params.jump(theta)
        lam = np.maximum(trace(J).real, self.epsilon_guard)
        return J / np.asarray(lam)[..., None, None] - theta

    def to_frame(self, m):
        return self.V @ as_complex(m) @ adjoint(self.V)

    def from_frame(self, m):
        return adjoint(self.V) @ as_complex(m) @ self.V

    def frame_params(self, params: FlowParams) -> FlowParams:
        return params if self.mode == "invertible" else params.conjugated(self.V)


def build_jump_function(C) -> JumpFunctionSpec:
    C = as_complex(C)
    U, s, _ = np.linalg.svd(C)
    if s[-1] > SINGULAR_TOL:
        return JumpFunctionSpec("invertible", np.eye(2, dtype=complex))
    # the last left-singular vector spans ker C†; making it the second basis
    # vector kills the second row of VCV†
    V = adjoint(U)
    row = (V @ C @ adjoint(V))[1]
    if np.linalg.norm(row) > SINGULAR_TOL:
        raise ArithmeticError("failed to find a frame with a zero second row")
    return JumpFunctionSpec("transformed", V)


def frozen_height(theta, params: FlowParams):
    """``max(Re Tr[J(θ)], 0)``: a negative frozen intensity is an empty rectangle."""
    return np.maximum(params.jump_trace(theta).real, 0.0)


def euler_step(theta, realization: PoissonRealization, k: int, n: int,
               jf: JumpFunctionSpec, params: FlowParams):
    """One Euler step; ``theta`` and ``params`` are expressed in the frame of ``jf``."""
    theta = as_complex(theta)
    h = float(frozen_height(theta, params))
    count = slab_count(realization, k, n, h)
    out = theta + params.drift(theta) / n
    if count:
        out = out + count * jf.q(theta, params)
    return out


def _interp(theta_k, k: int, t: float, r: PoissonRealization, n: int, jf, params):
    """``θ̃_t`` for ``t ∈ [k/n, (k+1)/n]`` (frame of ``jf``); points in ``[k/n, t]`` count."""
    t0 = k / n
    if t == t0:
        return theta_k
    h = float(frozen_height(theta_k, params))
    lo = np.searchsorted(r.times, t0, side="left")
    hi = np.searchsorted(r.times, t, side="right")
    count = int(np.count_nonzero(accepts(r.marks[lo:hi], h)))
    out = theta_k + (t - t0) * params.drift(theta_k)
    if count:
        out = out + count * jf.q(theta_k, params)
    return out


@dataclass
class EulerPath:
    """Euler iterates ``θ_k`` at ``k/n`` (original frame) with access to ``θ̃_t``."""

    n: int
    T: float
    states: np.ndarray
    frame_states: np.ndarray
    jf: JumpFunctionSpec
    params: FlowParams
    realization: PoissonRealization

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) / self.n

    def slab_of(self, t: float) -> int:
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(k, 0), self.steps)

    def interpolate(self, t: float) -> np.ndarray:
        if not 0 <= t <= self.T:
            raise ValueError("t outside [0, T]")
        k = self.slab_of(t)
        th = _interp(self.frame_states[k], k, t, self.realization, self.n, self.jf, self.params)
        return self.jf.from_frame(th)


def euler_path(rho0, realization: PoissonRealization, n: int, T: float,
               jf: JumpFunctionSpec, params: FlowParams) -> EulerPath:
    """Run ``[nT]`` Euler steps; in transformed mode the problem is solved in the ``V`` frame."""
    rho0 = check_state(rho0, what="rho0")
    wp = jf.frame_params(params)
    steps = n_steps(n, T)
    hist = np.empty((steps + 1, 2, 2), dtype=complex)
    hist[0] = jf.to_frame(rho0)
    for k in range(steps):
        hist[k + 1] = euler_step(hist[k], realization, k, n, jf, wp)
    return EulerPath(n, T, jf.from_frame(hist), hist, jf, wp, realization)


def euler_batch(rho0, batch: RealizationBatch, n: int, T: float,
                jf: JumpFunctionSpec, params: FlowParams) -> np.ndarray:
    """Vectorized :func:`euler_path` over a batch; returns frame iterates of shape ``(P, steps+1, 2, 2)``."""
    wp = jf.frame_params(params)
    steps = n_steps(n, T)
    index = batch.index(n, steps)
    hist = np.empty((batch.size, steps + 1, 2, 2), dtype=complex)
    theta = np.broadcast_to(jf.to_frame(rho0), (batch.size, 2, 2)).copy()
    hist[:, 0] = theta
    for k in range(steps):
        counts = index.counts(k, frozen_height(theta, wp))
        nxt = theta + wp.drift(theta) / n
        hit = counts > 0
        if np.any(hit):
            nxt[hit] += counts[hit, None, None] * jf.q(theta[hit], wp)
        theta = nxt
        hist[:, k + 1] = theta
    return hist


def sup_error(frame_hist: np.ndarray, realization: PoissonRealization, exact: TrajectoryPath,
              grid_pos: np.ndarray, n: int, T: float, jf: JumpFunctionSpec, wp: FlowParams) -> float:
    """``sup ‖θ̃_t − μ_t‖_F`` over the ``k/n`` grid, ``T`` and the exact path's jump times.

    ``grid_pos[k]`` locates ``k/n`` in ``exact.grid``; ``exact.grid`` must contain ``T``.
    """
    steps = frame_hist.shape[0] - 1
    theta = jf.from_frame(frame_hist)
    mu = exact.states[grid_pos]
    err = float(np.max(frobenius_norm(theta - mu)))
    extra = [(float(t), m) for t, m in zip(exact.jump_times, exact.jump_states)]
    if T > steps / n:
        extra.append((T, exact.states[-1]))
    edges = np.arange(steps + 1) / n
    for t, m in extra:
        k = min(int(np.searchsorted(edges, t, side="right")) - 1, steps)
        th = jf.from_frame(_interp(frame_hist[k], k, t, realization, n, jf, wp))
        err = max(err, float(frobenius_norm(th - m)))
    return err


def reporting_grid(n_grid, T: float) -> tuple[np.ndarray, dict]:
    """Union of the ``k/n`` grids (and ``T``) with, per ``n``, the positions of ``k/n`` in it."""
    pieces = [np.arange(n_steps(n, T) + 1) / n for n in n_grid]
    grid = np.unique(np.concatenate(pieces + [np.array([0.0, T])]))
    pos = {n: np.searchsorted(grid, p) for n, p in zip(n_grid, pieces)}
    return grid, pos


@dataclass
class ErrorEstimate:
    value: float
    stderr: float
    per_path: np.ndarray


def euler_sup_error(rho0, params: FlowParams, n: int, T: float, n_paths: int, rng,
                    first_path: int = 0) -> ErrorEstimate:
    """Monte Carlo ``Z(n) = E[sup_t ‖θ̃_t − μ_t‖]`` with Euler and exact paths sharing realizations.

    Realizations are drawn with height ``K + 1`` so that one realization dominates
    every process's acceptance region; ``rng`` is a master seed or :class:`RngStream`.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    seed, domain = (rng.seed, rng.domain) if isinstance(rng, RngStream) else (int(rng), 0)
    K = intensity_bound(params.C) + 1.0
    jf = build_jump_function(params.C)
    wp = jf.frame_params(params)
    grid, pos = reporting_grid([n], T)
    reals = [sample_realization(K, T, RngStream(seed, first_path + p, domain)) for p in range(n_paths)]
    hist = euler_batch(rho0, RealizationBatch(reals), n, T, jf, params)
    errs = np.empty(n_paths)
    for p, r in enumerate(reals):
        exact = solve_path(rho0, r, params, grid)
        errs[p] = sup_error(hist[p], r, exact, pos[n], n, T, jf, wp)
    return ErrorEstimate(float(errs.mean()), float(errs.std(ddof=1) / math.sqrt(n_paths)), errs)
