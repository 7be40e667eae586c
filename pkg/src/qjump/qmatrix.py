"""Small dense complex linear algebra for qubit states and qubit-ancilla operators.

Every function accepts a single matrix or a stack of matrices (leading batch
axes) unless stated otherwise. Two-site operators use the basis ordering
``Ω⊗Ω, X⊗Ω, Ω⊗X, X⊗X`` where the first factor is the system and the second
the ancilla, so block ``(i, j)`` of a 4×4 operator is the system operator
``⟨i|·|j⟩`` taken on the ancilla.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

TOL_STATE = 1e-9
TOL_PROB = 1e-14

I2 = np.eye(2, dtype=complex)
GROUND = np.array([[1, 0], [0, 0]], dtype=complex)
EXCITED = np.array([[0, 0], [0, 1]], dtype=complex)
E10 = np.array([[0, 0], [1, 0]], dtype=complex)
E01 = np.array([[0, 1], [0, 0]], dtype=complex)


def as_complex(m) -> np.ndarray:
    return np.asarray(m, dtype=complex)


def adjoint(m) -> np.ndarray:
    m = as_complex(m)
    return np.conj(np.swapaxes(m, -1, -2))


def trace(m):
    return np.trace(as_complex(m), axis1=-2, axis2=-1)


def frobenius_norm(m):
    m = as_complex(m)
    return np.sqrt(np.sum(m.real**2 + m.imag**2, axis=(-2, -1)))


def tensor(system_op, ancilla_op) -> np.ndarray:
    """Return ``system_op ⊗ ancilla_op`` in the fixed two-site basis ordering."""
    return np.kron(as_complex(ancilla_op), as_complex(system_op))


def blocks(m4) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Split a 4×4 operator into its ancilla blocks ``(L00, L01, L10, L11)``."""
    m4 = as_complex(m4)
    return m4[:2, :2], m4[:2, 2:], m4[2:, :2], m4[2:, 2:]


def assemble(l00, l01, l10, l11) -> np.ndarray:
    return np.block([[l00, l01], [l10, l11]]).astype(complex)


def mat_exp(m, scale: float) -> np.ndarray:
    """Return ``exp(i·scale·m)`` for a finite square matrix."""
    m = as_complex(m)
    if not np.all(np.isfinite(m)) or not np.isfinite(scale):
        raise ValueError("mat_exp requires finite input")
    return expm(1j * scale * m)


def expm2(a) -> np.ndarray:
    """Closed-form exponential of a stack of 2×2 matrices.

    Uses ``exp(A) = e^{μ}[cosh(δ) I + sinh(δ)/δ (A − μI)]`` with ``μ = tr A/2`` and
    ``δ² = −det(A − μI)``; both ``cosh`` and ``sinh(δ)/δ`` are even in ``δ`` so the
    square-root branch is irrelevant.
    """
    a = as_complex(a)
    mu = 0.5 * (a[..., 0, 0] + a[..., 1, 1])
    b00 = a[..., 0, 0] - mu
    d2 = b00 * b00 + a[..., 0, 1] * a[..., 1, 0]
    delta = np.sqrt(d2)
    small = np.abs(d2) < 1e-6
    safe = np.where(small, 1.0, delta)
    # series tail error at |δ²| < 1e-6 is below 1e-25
    shc = np.where(small, 1 + d2 / 6 + d2 * d2 / 120 + d2**3 / 5040, np.sinh(safe) / safe)
    ch = np.where(small, 1 + d2 / 2 + d2 * d2 / 24 + d2**3 / 720, np.cosh(safe))
    out = np.empty(a.shape, dtype=complex)
    out[..., 0, 0] = ch + shc * b00
    out[..., 1, 1] = ch - shc * b00
    out[..., 0, 1] = shc * a[..., 0, 1]
    out[..., 1, 0] = shc * a[..., 1, 0]
    return np.exp(mu)[..., None, None] * out


def partial_trace_second(m4) -> np.ndarray:
    """Trace out the ancilla: the unique ``E0[m]`` with ``Tr[E0[m] X] = Tr[m (X⊗I)]``."""
    m4 = as_complex(m4)
    return np.einsum("aiaj->ij", m4.reshape(2, 2, 2, 2))


def projector_from_vector(x, tol: float = TOL_STATE) -> np.ndarray:
    x = as_complex(x)
    norm = np.linalg.norm(x, axis=-1)
    if np.any(np.abs(norm - 1) > tol):
        raise ValueError(f"vector is not normalized (norm {norm})")
    return x[..., :, None] * np.conj(x[..., None, :])


def hermitian_eigvals(m):
    """Eigenvalues ``(λ_min, λ_max)`` of the hermitian part of 2×2 matrices, closed form."""
    m = as_complex(m)
    h = 0.5 * (m + adjoint(m))
    a = h[..., 0, 0].real
    d = h[..., 1, 1].real
    b = h[..., 0, 1]
    mean = 0.5 * (a + d)
    rad = np.sqrt(0.25 * (a - d) ** 2 + np.abs(b) ** 2)
    return mean - rad, mean + rad


def purity_defect(m):
    """``‖M² − M‖_F``; zero exactly for rank-one projectors."""
    m = as_complex(m)
    return frobenius_norm(m @ m - m)


@dataclass(frozen=True)
class StateReport:
    hermiticity: float
    trace_defect: float
    min_eigenvalue: float
    tol: float

    @property
    def ok(self) -> bool:
        return (
            self.hermiticity <= self.tol
            and self.trace_defect <= self.tol
            and self.min_eigenvalue >= -self.tol
        )

    def __bool__(self) -> bool:
        return self.ok


def validate_state(m, tol: float = TOL_STATE) -> StateReport:
    """Diagnose a candidate density matrix (single or stack; worst case is reported)."""
    m = as_complex(m)
    herm = float(np.max(frobenius_norm(m - adjoint(m))))
    tr = float(np.max(np.abs(trace(m) - 1)))
    lmin = float(np.min(hermitian_eigvals(m)[0]))
    return StateReport(herm, tr, lmin, tol)


def check_state(m, tol: float = TOL_STATE, what: str = "state") -> np.ndarray:
    report = validate_state(m, tol)
    if not report.ok:
        raise ValueError(f"{what} is not a density matrix: {report}")
    return as_complex(m)


def random_state(rng: np.random.Generator, pure: bool = False) -> np.ndarray:
    """Draw a qubit state (Hilbert–Schmidt measure, or Haar when ``pure``)."""
    if pure:
        v = rng.normal(size=2) + 1j * rng.normal(size=2)
        return projector_from_vector(v / np.linalg.norm(v))
    g = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    rho = g @ adjoint(g)
    return rho / trace(rho).real
