"""Invariant suite run by ``qjump audit``.

Each check returns an :class:`AuditResult`; :class:`AuditHooks` lets tests inject
faults (non-unitary blocks, empty realizations) to confirm the checks can fail.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coupling import marginal_equality_test, void_probability_audit
from .discrete import ModelSpec, TransitionMaps, UnitaryBlocks, build_blocks
from .exact import solve_path
from .flow import FlowParams
from .poisson import (
    DOMAIN_STATES,
    PoissonRealization,
    RngStream,
    intensity_bound,
    sample_realization,
)
from .qmatrix import hermitian_eigvals, purity_defect, random_state, trace, validate_state

STATE_TOL = 1e-6
PURITY_TOL = 1e-6
AUDIT_PATHS = 200


@dataclass
class AuditResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        extras = ", ".join(f"{k}={v}" for k, v in self.detail.items())
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {extras}"


@dataclass
class AuditHooks:
    """Fault injection: ``blocks(n)`` replaces the unitary blocks; ``empty_realizations`` drops all points."""

    blocks: object = None
    empty_realizations: bool = False


def _realizations(K, T, seed, count, hooks: AuditHooks):
    if hooks.empty_realizations:
        return [PoissonRealization(T, K) for _ in range(count)]
    return [sample_realization(K, T, RngStream(seed, p)) for p in range(count)]


def _pure_version(rho):
    """``rho`` itself if pure, else the projector on its dominant eigenvector."""
    if purity_defect(rho) <= 1e-12:
        return rho
    w, v = np.linalg.eigh(rho)
    x = v[:, -1]
    return np.outer(x, x.conj())


def check_state_validity(paths) -> AuditResult:
    worst = validate_state(np.concatenate([np.concatenate([p.states, p.jump_states]) for p in paths]))
    return AuditResult("state_validity", worst.min_eigenvalue >= -STATE_TOL
                       and worst.trace_defect <= STATE_TOL and worst.hermiticity <= STATE_TOL,
                       {"hermiticity": worst.hermiticity, "trace_defect": worst.trace_defect,
                        "min_eigenvalue": worst.min_eigenvalue})


def check_trace_preservation(spec: ModelSpec, n_grid, mode: str, states, hooks: AuditHooks) -> AuditResult:
    """``|Tr M0 + Tr M1 − 1|`` against ``1e-10`` (exact blocks) or the first-order bound ``λ_max(G†G)/n²``."""
    params = FlowParams(spec.H, spec.C)
    GdG = params.G.conj().T @ params.G
    worst, ok = 0.0, True
    for n in n_grid:
        blocks: UnitaryBlocks = hooks.blocks(n) if hooks.blocks else build_blocks(spec, n, mode)
        M0, M1 = TransitionMaps(blocks, spec.observable)(states)
        defect = float(np.max(np.abs((trace(M0) + trace(M1)).real - 1)))
        bound = 1e-10 if blocks.mode == "exact" else float(hermitian_eigvals(GdG)[1]) / n**2 + 1e-12
        ok &= defect <= bound
        worst = max(worst, defect)
    return AuditResult("trace_preservation", bool(ok), {"max_defect": worst, "mode": mode})


def check_void_probability(spec: ModelSpec, states) -> AuditResult:
    audits = [void_probability_audit(spec, n, states) for n in (10, 100)]
    return AuditResult("void_probability", all(a.passed for a in audits),
                       {"max_error": max(a.max_error for a in audits),
                        "clamped_states": sum(a.clamped for a in audits)})


def check_purity(spec: ModelSpec, rho0, T, grid, seed, count, hooks) -> AuditResult:
    params = FlowParams(spec.H, spec.C)
    pure0 = _pure_version(rho0)
    K = intensity_bound(spec.C)
    worst = 0.0
    worst_post = 0.0
    rank1 = np.linalg.matrix_rank(spec.C, tol=1e-10) == 1
    for r in _realizations(K, T, seed, count, hooks):
        p = solve_path(pure0, r, params, grid)
        worst = max(worst, float(np.max(purity_defect(p.states))))
        if rank1 and p.n_jumps:
            q = solve_path(rho0, r, params, grid)
            if q.n_jumps:
                after = q.grid >= q.jump_times[0]
                post = np.concatenate([q.states[after], q.jump_states])
                worst_post = max(worst_post, float(np.max(purity_defect(post))))
    return AuditResult("purity_absorption", worst <= PURITY_TOL and worst_post <= PURITY_TOL,
                       {"pure_start_defect": worst, "post_jump_defect": worst_post,
                        "rank_one_C": bool(rank1)})


def check_non_explosion(paths, realizations, K, T) -> AuditResult:
    counts = np.array([p.n_jumps for p in paths])
    points = np.array([len(r) for r in realizations])
    mean = float(counts.mean())
    se = float(counts.std(ddof=1) / math.sqrt(len(counts))) if len(counts) > 1 else 0.0
    ok = bool(np.all(counts <= points)) and mean <= K * T + 4 * se + 1e-12
    return AuditResult("non_explosion", ok, {"mean_jumps": mean, "bound_KT": K * T, "stderr": se})


def check_jump_correctness(rho0, params, realizations, paths, grid) -> AuditResult:
    """Re-derive every accept/reject decision with the independent RK4 route."""
    mismatches = 0
    for r, p in zip(realizations, paths):
        q = solve_path(rho0, r, params, grid, method="rk4")
        bad = p.accepted != q.accepted
        # decisions within integrator error of the boundary are not meaningful
        bad &= np.abs(r.marks - p.point_intensity) > 1e-6
        mismatches += int(np.count_nonzero(bad))
    strict = all(np.all((r.marks <= p.point_intensity) == p.accepted) for r, p in zip(realizations, paths))
    return AuditResult("jump_correctness", mismatches == 0 and strict, {"mismatches": mismatches})


def check_marginal_equality(spec, rho0, T, n_paths, seed) -> AuditResult:
    m = 6
    n = max(50, math.ceil(m / T))
    res = [marginal_equality_test(spec, rho0, n, T, n_paths, seed + i, m=m) for i in range(3)]
    passed = sum(r.passed for r in res) >= 2
    return AuditResult("marginal_equality", passed, {"p_values": [round(r.p_value, 6) for r in res]})


def run_audit(config, hooks: AuditHooks | None = None, paths: int = AUDIT_PATHS) -> list[AuditResult]:
    hooks = hooks or AuditHooks()
    spec, rho0, run = config.spec, config.rho0, config.run
    T, seed = run["T"], run["seed"]
    params = FlowParams(spec.H, spec.C)
    K = intensity_bound(spec.C)
    count = min(paths, run["n_paths"])
    grid = np.linspace(0.0, T, run["grid_points"])
    reals = _realizations(K, T, seed, count, hooks)
    exact = [solve_path(rho0, r, params, grid, method=run["mode"]["flow"]) for r in reals]
    gen = RngStream(seed, 0, DOMAIN_STATES).generator()
    states = np.array([random_state(gen) for _ in range(1000)])
    return [
        check_state_validity(exact),
        check_trace_preservation(spec, run["n_grid"], run["mode"]["blocks"], states, hooks),
        check_void_probability(spec, states),
        check_purity(spec, rho0, T, grid, seed, count, hooks),
        check_non_explosion(exact, reals, K, T),
        check_jump_correctness(rho0, params, reals[:20], exact[:20], grid),
        check_marginal_equality(spec, rho0, T, max(run["n_paths"], 2), seed),
    ]
