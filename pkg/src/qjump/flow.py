"""Deterministic qubit dynamics: Lindbladian, jump map and the between-jump flow.

All vector fields broadcast over leading stack axes. Between two detections
the conditional state obeys ``dρ = f(ρ) dt`` with
``f(ρ) = L(ρ) + Tr[J(ρ)] ρ − J(ρ)``; it is the trace normalization of the
linear flow ``σ ↦ Gσ + σG†`` with ``G = −iH − ½C†C``, which
:func:`propagate` evaluates in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .qmatrix import (
    TOL_PROB,
    adjoint,
    as_complex,
    expm2,
    frobenius_norm,
    hermitian_eigvals,
    trace,
)

H_ODE = 1e-3


class IntegratorError(RuntimeError):
    pass


class JumpAtZeroIntensityError(RuntimeError):
    """A detection was applied where the jump intensity vanishes (a thinning bug)."""


@dataclass(frozen=True)
class FlowParams:
    H: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        H = as_complex(self.H)
        C = as_complex(self.C)
        if frobenius_norm(H - adjoint(H)) > 1e-9:
            raise ValueError("H is not hermitian")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "C", C)

    @classmethod
    def from_spec(cls, spec) -> "FlowParams":
        return cls(spec.H, spec.C)

    @cached_property
    def Cd(self) -> np.ndarray:
        return adjoint(self.C)

    @cached_property
    def CdC(self) -> np.ndarray:
        return self.Cd @ self.C

    @cached_property
    def G(self) -> np.ndarray:
        """Non-hermitian effective generator ``−iH − ½C†C``."""
        return -1j * self.H - 0.5 * self.CdC

    def conjugated(self, V) -> "FlowParams":
        V = as_complex(V)
        Vd = adjoint(V)
        return FlowParams(V @ self.H @ Vd, V @ self.C @ Vd)

    # vector fields -------------------------------------------------------

    def jump(self, rho):
        """``J(ρ) = CρC†``."""
        return self.C @ as_complex(rho) @ self.Cd

    def lindblad(self, rho):
        rho = as_complex(rho)
        H, CdC = self.H, self.CdC
        return (-1j * (H @ rho - rho @ H) - 0.5 * (CdC @ rho + rho @ CdC)
                + self.C @ rho @ self.Cd)

    def jump_trace(self, rho):
        """``Tr[J(ρ)] = Tr[ρ C†C]`` (complex for non-hermitian input)."""
        return trace(as_complex(rho) @ self.CdC)

    def jump_intensity(self, rho):
        return self.jump_trace(rho).real

    def drift(self, rho):
        rho = as_complex(rho)
        J = self.jump(rho)
        return self.lindblad(rho) + trace(J)[..., None, None] * rho - J

    def pure_drift(self, x):
        """``[−iH − ½C†C + ½η] x`` with ``η = ⟨x, C†C x⟩``."""
        x = as_complex(x)
        Gx = np.einsum("ij,...j->...i", self.G, x)
        CdCx = np.einsum("ij,...j->...i", self.CdC, x)
        eta = np.einsum("...i,...i->...", np.conj(x), CdCx).real
        return Gx + 0.5 * eta[..., None] * x


def lindblad(rho, params: FlowParams):
    return params.lindblad(rho)


def jump_intensity(rho, params: FlowParams):
    return params.jump_intensity(rho)


def drift_f(rho, params: FlowParams):
    return params.drift(rho)


def pure_drift(x, params: FlowParams):
    return params.pure_drift(x)


def apply_jump(rho, params: FlowParams):
    """Post-detection state ``J(ρ)/Tr[J(ρ)]``."""
    J = params.jump(rho)
    lam = trace(J).real
    if np.any(lam <= TOL_PROB):
        raise JumpAtZeroIntensityError(f"jump requested at intensity {lam}")
    return J / lam[..., None, None]


def propagate(rho, dt, params: FlowParams):
    """Between-jump flow from ``rho`` over durations ``dt`` (scalar or 1-D array).

    Returns ``(states, log_norm)``: the normalized states and ``ln Tr σ``, where
    ``−ln Tr σ = ∫ Tr[J(ρ_s)] ds`` is the intensity integrated along the flow.
    """
    rho = as_complex(rho)
    dt = np.asarray(dt, dtype=float)
    E = expm2(dt[..., None, None] * params.G)
    sigma = E @ rho @ adjoint(E)
    tr = trace(sigma).real
    return sigma / tr[..., None, None], np.log(tr)


@dataclass
class FlowStepResult:
    state: np.ndarray
    trace_defect: float
    hermiticity: float
    min_eigenvalue: float
    steps: int


def _rk4(field, y, dt: float, tol: float = H_ODE, renormalize: bool = True, quad=None):
    if dt < 0:
        raise ValueError("dt must be non-negative")
    steps = max(1, math.ceil(dt / tol - 1e-12)) if dt > 0 else 0
    h = dt / steps if steps else 0.0
    if steps and h < 1e-15:
        raise IntegratorError("step size underflow")
    trace_defect = 0.0
    acc = 0.0
    for _ in range(steps):
        k1 = field(y)
        k2 = field(y + 0.5 * h * k1)
        k3 = field(y + 0.5 * h * k2)
        k4 = field(y + h * k3)
        y_new = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y_new)):
            raise IntegratorError("non-finite state during integration")
        if quad is not None:
            acc += 0.5 * h * (quad(y) + quad(y_new))
        if renormalize:
            tr = trace(y_new)
            trace_defect += float(abs(tr - 1))
            y_new = y_new / tr
        y = y_new
    return y, steps, trace_defect, acc


def integrate_flow(rho0, dt: float, params: FlowParams, tol: float = H_ODE) -> FlowStepResult:
    """RK4 integration of ``dρ = f(ρ) dt`` with step ``min(tol, dt)``, trace renormalized per step."""
    y, steps, tdef, _ = _rk4(params.drift, as_complex(rho0), dt, tol)
    return FlowStepResult(
        state=y,
        trace_defect=tdef,
        hermiticity=float(frobenius_norm(y - adjoint(y))),
        min_eigenvalue=float(hermitian_eigvals(y)[0]),
        steps=steps,
    )


def integrate_flow_with_intensity(rho0, dt: float, params: FlowParams, tol: float = H_ODE):
    """RK4 flow plus the trapezoid-rule integral of ``Tr[J(ρ_s)]`` along it."""
    y, _, _, acc = _rk4(params.drift, as_complex(rho0), dt, tol, quad=params.jump_intensity)
    return y, acc


def integrate_master(rho0, dt: float, params: FlowParams, tol: float = H_ODE) -> np.ndarray:
    """RK4 integration of the master equation ``dρ = L(ρ) dt`` (no renormalization)."""
    y, _, _, _ = _rk4(params.lindblad, as_complex(rho0), dt, tol, renormalize=False)
    return y


def integrate_pure(x0, dt: float, params: FlowParams, tol: float = H_ODE) -> np.ndarray:
    """RK4 integration of the pure-state equation; the norm is not re-imposed."""
    y, _, _, _ = _rk4(params.pure_drift, as_complex(x0), dt, tol, renormalize=False)
    return y


def master_solution(rho0, times, params: FlowParams) -> np.ndarray:
    """Master-equation solution at the given times via the exponential of the 4×4 superoperator."""
    from scipy.linalg import expm

    H, C = params.H, params.C
    I = np.eye(2)
    CdC = params.CdC
    # row-major vec: vec(AXB) = (A ⊗ Bᵀ) vec(X)
    gen = (-1j * (np.kron(H, I) - np.kron(I, H.T))
           - 0.5 * (np.kron(CdC, I) + np.kron(I, CdC.T))
           + np.kron(C, np.conj(C)))
    v0 = as_complex(rho0).reshape(-1)
    out = [(expm(gen * t) @ v0).reshape(2, 2) for t in np.atleast_1d(times)]
    return np.array(out)
