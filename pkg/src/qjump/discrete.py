"""Repeated interactions with indirect measurement: the discrete quantum trajectory.

A qubit interacts for a time ``1/n`` with a fresh ancilla prepared in ``|Ω⟩``;
a two-outcome observable is then measured on the ancilla. The conditional
qubit state is a Markov chain whose transitions are built from the ancilla
blocks ``L00`` and ``L10`` of the interaction unitary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .qmatrix import (
    E01,
    E10,
    GROUND,
    I2,
    TOL_PROB,
    TOL_STATE,
    adjoint,
    as_complex,
    assemble,
    blocks,
    check_state,
    frobenius_norm,
    mat_exp,
    tensor,
    trace,
)


class ModelError(RuntimeError):
    """The model produced transitions that are not trace preserving."""


@dataclass(frozen=True)
class ObservableSpec:
    P0: np.ndarray
    P1: np.ndarray
    eigenvalues: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        P0 = as_complex(self.P0)
        P1 = as_complex(self.P1)
        for name, p in (("P0", P0), ("P1", P1)):
            if p.shape != (2, 2):
                raise ValueError(f"{name} must be 2x2")
            if frobenius_norm(p - adjoint(p)) > TOL_STATE:
                raise ValueError(f"{name} is not hermitian")
            if frobenius_norm(p @ p - p) > TOL_STATE:
                raise ValueError(f"{name} is not idempotent")
        if frobenius_norm(P0 + P1 - I2) > TOL_STATE:
            raise ValueError("P0 + P1 must be the identity")
        if frobenius_norm(P0 @ P1) > TOL_STATE:
            raise ValueError("P0 and P1 must be orthogonal")
        object.__setattr__(self, "P0", P0)
        object.__setattr__(self, "P1", P1)

    @classmethod
    def diagonal(cls, eigenvalues=(0.0, 1.0)) -> "ObservableSpec":
        return cls(GROUND.copy(), I2 - GROUND, tuple(eigenvalues))

    @classmethod
    def from_projector(cls, P0, eigenvalues=(0.0, 1.0)) -> "ObservableSpec":
        P0 = as_complex(P0)
        return cls(P0, I2 - P0, tuple(eigenvalues))

    @property
    def is_diagonal(self) -> bool:
        return abs(self.P0[0, 1]) <= TOL_STATE and abs(self.P0[1, 0]) <= TOL_STATE


@dataclass(frozen=True)
class ModelSpec:
    """System Hamiltonian ``H``, coupling ``C``, measured observable and ancilla state."""

    H: np.ndarray
    C: np.ndarray
    observable: ObservableSpec = field(default_factory=ObservableSpec.diagonal)
    beta: np.ndarray = field(default_factory=lambda: GROUND.copy())

    def __post_init__(self):
        H = as_complex(self.H)
        C = as_complex(self.C)
        if H.shape != (2, 2) or C.shape != (2, 2):
            raise ValueError("H and C must be 2x2")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(C))):
            raise ValueError("H and C must be finite")
        if frobenius_norm(H - adjoint(H)) > TOL_STATE:
            raise ValueError("H is not hermitian")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "beta", check_state(self.beta, what="beta"))

    @property
    def is_degenerate(self) -> bool:
        """No coupling: the measurement never sees anything."""
        return bool(np.all(self.C == 0))


def amplitude_damping(H=None) -> ModelSpec:
    """Canonical model: lowering coupling, diagonal observable, ``H = diag(1, -1)/2``."""
    if H is None:
        H = np.diag([0.5, -0.5])
    return ModelSpec(H=H, C=E01.copy())


@dataclass(frozen=True)
class UnitaryBlocks:
    L00: np.ndarray
    L01: np.ndarray
    L10: np.ndarray
    L11: np.ndarray
    n: int
    mode: str = "exact"

    def assembled(self) -> np.ndarray:
        return assemble(self.L00, self.L01, self.L10, self.L11)

    def unitarity_defect(self) -> float:
        u = self.assembled()
        return float(frobenius_norm(adjoint(u) @ u - np.eye(4)))


def build_total_hamiltonian(spec: ModelSpec, n: int) -> np.ndarray:
    """Interaction Hamiltonian for one step of duration ``1/n``.

    ``H_tot(n) = H⊗I + i√n (C⊗E10 − C†⊗E01)``; with ``U = exp(−i H_tot / n)`` this
    gives ``L00 = I + (−iH − ½C†C)/n + O(1/n²)`` and ``L10 = C/√n + O(n^{-3/2})``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    C = spec.C
    coupling = tensor(C, E10) - tensor(adjoint(C), E01)
    return tensor(spec.H, I2) + 1j * math.sqrt(n) * coupling


def build_unitary_exact(spec: ModelSpec, n: int) -> UnitaryBlocks:
    u = mat_exp(build_total_hamiltonian(spec, n), -1.0 / n)
    return UnitaryBlocks(*blocks(u), n=n, mode="exact")


def build_unitary_asymptotic(spec: ModelSpec, n: int) -> UnitaryBlocks:
    """First-order blocks with all remainders set to zero.

    Only ``L00`` and ``L10`` drive the chain (the ancilla starts in ``|Ω⟩``); the
    ``L01``/``L11`` entries are the matching first-order terms and are not used.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    H, C = spec.H, spec.C
    Cd = adjoint(C)
    s = 1.0 / math.sqrt(n)
    L00 = I2 + (-1j * H - 0.5 * Cd @ C) / n
    L10 = s * C
    L01 = -s * Cd
    L11 = I2 + (-1j * H - 0.5 * C @ Cd) / n
    return UnitaryBlocks(L00, L01, L10, L11, n=n, mode="asymptotic")


def build_blocks(spec: ModelSpec, n: int, mode: str = "asymptotic") -> UnitaryBlocks:
    if mode == "exact":
        return build_unitary_exact(spec, n)
    if mode == "asymptotic":
        return build_unitary_asymptotic(spec, n)
    raise ValueError(f"unknown block mode {mode!r}")


@dataclass(frozen=True)
class TransitionMaps:
    """Non-normalized transitions ``ρ ↦ (M0(ρ), M1(ρ))``; broadcasts over stacks of states.

    ``M_i(ρ) = Σ_{a,b} (P_i)_{ba} L_{a0} ρ L_{b0}†``, the partial trace of
    ``(I⊗P_i) U (ρ⊗|Ω⟩⟨Ω|) U† (I⊗P_i)``.
    """

    blocks: UnitaryBlocks
    observable: ObservableSpec

    def __call__(self, rho):
        rho = as_complex(rho)
        L0, L1 = self.blocks.L00, self.blocks.L10
        L0d, L1d = adjoint(L0), adjoint(L1)
        a = L0 @ rho @ L0d
        d = L1 @ rho @ L1d
        if self.observable.is_diagonal:
            P0 = self.observable.P0
            P1 = self.observable.P1
            return P0[0, 0] * a + P0[1, 1] * d, P1[0, 0] * a + P1[1, 1] * d
        b = L0 @ rho @ L1d
        c = L1 @ rho @ L0d
        out = []
        for P in (self.observable.P0, self.observable.P1):
            out.append(P[0, 0] * a + P[1, 0] * b + P[0, 1] * c + P[1, 1] * d)
        return tuple(out)


def transition_maps(blocks: UnitaryBlocks, obs: ObservableSpec, beta=GROUND) -> TransitionMaps:
    if frobenius_norm(as_complex(beta) - GROUND) > TOL_STATE:
        raise ValueError("only the ancilla reference state |Ω⟩⟨Ω| is supported")
    return TransitionMaps(blocks, obs)


def outcome_probabilities(M0, M1=None):
    """``(p, q)`` with ``p = Tr M0`` and ``q = 1 − p``, clipped to ``[0, 1]``.

    With first-order blocks ``Tr M0`` may exceed one by ``O(1/n²)`` near states
    the coupling annihilates; the clip makes such a branch unreachable.
    """
    p = np.clip(trace(M0).real, 0.0, 1.0)
    return p, 1.0 - p


def normalized_noise(p: float, q: float, outcome: int) -> float:
    """Centered, unit-variance measurement noise ``(ν − q)/√(pq)``."""
    if not (0 < p < 1 and 0 < q < 1):
        raise ValueError(f"normalized noise needs 0 < p, q < 1 (got p={p}, q={q})")
    if abs(p + q - 1) > 1e-12:
        raise ValueError("p + q must equal 1")
    return math.sqrt(p / q) if outcome == 1 else -math.sqrt(q / p)


def branch_update(M0, M1, outcome):
    """Normalized post-measurement state for the given outcome(s)."""
    M = np.where(np.asarray(outcome)[..., None, None] == 1, M1, M0)
    tr = trace(M).real
    return M / tr[..., None, None]


def chain_step(rho, maps: TransitionMaps, rng: np.random.Generator):
    """One repeated-measurement step. Returns ``(ρ', outcome, p, q)``."""
    M0, M1 = maps(rho)
    t0, t1 = trace(M0).real, trace(M1).real
    if t0 < TOL_PROB and t1 < TOL_PROB:
        raise ModelError("both outcome branches have vanishing probability")
    p, q = outcome_probabilities(M0)
    p, q = float(p), float(q)
    if q < TOL_PROB or t1 < TOL_PROB:
        outcome = 0
    elif p < TOL_PROB or t0 < TOL_PROB:
        outcome = 1
    else:
        outcome = int(rng.random() < q)
    return branch_update(M0, M1, outcome), outcome, p, q


@dataclass
class ChainHistory:
    """Full history of a discrete trajectory: ``states[k]`` is ``ρ_k``."""

    n: int
    states: np.ndarray
    outcomes: np.ndarray
    p: np.ndarray
    q: np.ndarray
    noise: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.outcomes)

    def rows(self):
        """CSV-ready rows ``(k, outcome, p, q, Re/Im of ρ_k entries)``; outcome blank at k=0."""
        for k, rho in enumerate(self.states):
            if k == 0:
                head = [0, "", "", ""]
            else:
                head = [k, int(self.outcomes[k - 1]), self.p[k - 1], self.q[k - 1]]
            flat = rho.reshape(-1)
            yield head + [v for z in flat for v in (z.real, z.imag)]


def n_steps(n: int, T: float) -> int:
    """``[nT]`` robust to round-off in ``n·T``."""
    return int(math.floor(n * T + 1e-9))


def simulate_chain(spec: ModelSpec, n: int, T: float, rho0, rng: np.random.Generator,
                   mode: str = "exact", steps: int | None = None) -> ChainHistory:
    if T <= 0:
        raise ValueError("T must be positive")
    rho = check_state(rho0, what="rho0")
    maps = transition_maps(build_blocks(spec, n, mode), spec.observable, spec.beta)
    k_max = n_steps(n, T) if steps is None else steps
    states = np.empty((k_max + 1, 2, 2), dtype=complex)
    outcomes = np.zeros(k_max, dtype=np.int8)
    ps = np.empty(k_max)
    qs = np.empty(k_max)
    noise = np.full(k_max, np.nan)
    states[0] = rho
    for k in range(k_max):
        rho, outcome, p, q = chain_step(rho, maps, rng)
        states[k + 1] = rho
        outcomes[k], ps[k], qs[k] = outcome, p, q
        if 0 < p < 1:
            noise[k] = normalized_noise(p, q, outcome)
    return ChainHistory(n, states, outcomes, ps, qs, noise)
