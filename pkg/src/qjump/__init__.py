"""Jump-type quantum trajectories of a qubit: repeated-measurement chains, the exact
Poisson-driven solution, its Euler scheme, and coupled convergence statistics."""

__version__ = "0.1.0"
