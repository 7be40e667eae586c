"""Poisson random measure on ``[0, T] × [0, K]`` with Lebesgue intensity.

One realization is a finite set of points ``(τ_i, ξ_i)``: the times form a
rate-``K`` Poisson process on ``[0, T]`` and the marks are i.i.d. uniform on
``[0, K]``. Every process in the package (exact solution, Euler scheme, the
coupled chains) reads its randomness from such a realization by counting the
points that fall under an intensity curve or inside a rectangle.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .qmatrix import TOL_PROB, as_complex, hermitian_eigvals

# stream domains: keep the randomness of unrelated consumers disjoint
DOMAIN_REALIZATION = 0
DOMAIN_CHAIN = 1
DOMAIN_BOOTSTRAP = 2
DOMAIN_STATES = 3


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, domain, stream)``.

    Streams for different path indices are statistically independent and do
    not depend on the order in which they are created, so a path's randomness
    is the same whichever worker happens to draw it.
    """

    seed: int
    stream: int = 0
    domain: int = DOMAIN_REALIZATION

    def __post_init__(self):
        for name in ("seed", "stream", "domain"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        if self.seed >= 2**64:
            raise ValueError("seed must fit in 64 bits")

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.domain), int(self.stream)))
        return np.random.Generator(np.random.Philox(ss))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngStream or a numpy Generator")


def intensity_bound(C) -> float:
    """Sharp intensity bound ``K = λ_max(C†C)``; ``Tr[CρC†] ≤ K`` on states."""
    C = as_complex(C)
    CdC = np.conj(C.T) @ C
    return max(0.0, float(hermitian_eigvals(CdC)[1]))


@dataclass(frozen=True)
class PoissonRealization:
    T: float
    K: float
    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    marks: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        times = np.array(self.times, dtype=float).reshape(-1)
        marks = np.array(self.marks, dtype=float).reshape(-1)
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError("T must be positive")
        if not (np.isfinite(self.K) and self.K >= 0):
            raise ValueError("K must be non-negative")
        if times.shape != marks.shape:
            raise ValueError("times and marks must have the same length")
        if times.size:
            if times[0] <= 0 or times[-1] >= self.T:
                raise ValueError("point times must lie in (0, T)")
            if np.any(np.diff(times) <= 0):
                raise ValueError("point times must be strictly increasing")
            if np.any(marks < 0) or np.any(marks > self.K):
                raise ValueError("marks must lie in [0, K]")
        times.setflags(write=False)
        marks.setflags(write=False)
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "K", float(self.K))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)

    def __len__(self) -> int:
        return self.times.size

    def digest(self) -> str:
        """SHA-256 of the exact bit patterns; equal digests mean identical realizations."""
        h = hashlib.sha256()
        h.update(struct.pack("<dd", self.T, self.K))
        h.update(self.times.astype("<f8").tobytes())
        h.update(self.marks.astype("<f8").tobytes())
        return h.hexdigest()

    def to_record(self) -> dict:
        return {
            "T": self.T,
            "K": self.K,
            "points": [[float(t), float(x)] for t, x in zip(self.times, self.marks)],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PoissonRealization":
        pts = np.asarray(rec.get("points", []), dtype=float).reshape(-1, 2)
        return cls(float(rec["T"]), float(rec["K"]), pts[:, 0], pts[:, 1])

    def dumps(self) -> str:
        # json writes floats with repr, which round-trips 64-bit values exactly
        return json.dumps(self.to_record())

    @classmethod
    def loads(cls, text: str) -> "PoissonRealization":
        return cls.from_record(json.loads(text))

    def restricted(self, T: float) -> "PoissonRealization":
        """The same points on the shorter horizon ``[0, T]``."""
        keep = self.times < T
        return PoissonRealization(T, self.K, self.times[keep], self.marks[keep])


def sample_realization(K: float, T: float, rng) -> PoissonRealization:
    """Rate-``K`` Poisson process on ``[0, T]`` from exponential gaps, with uniform marks on ``[0, K]``."""
    if K < 0:
        raise ValueError("K must be non-negative")
    if T <= 0:
        raise ValueError("T must be positive")
    if K == 0:
        return PoissonRealization(T, K)
    gen = _as_generator(rng)
    chunks = []
    t = 0.0
    block = int(K * T + 4 * np.sqrt(K * T) + 8)
    while True:
        arrivals = t + np.cumsum(gen.exponential(1.0 / K, size=block))
        inside = arrivals[arrivals < T]
        chunks.append(inside)
        if inside.size < block:
            break
        t = float(arrivals[-1])
    times = np.concatenate(chunks)
    marks = gen.uniform(0.0, K, size=times.size)
    return PoissonRealization(T, K, times, marks)


def accepts(mark, height):
    """Thinning indicator ``ξ ≤ h``, with heights at or below ``TOL_PROB`` accepting nothing."""
    height = np.asarray(height, dtype=float)
    return (np.asarray(mark) <= height) & (height > TOL_PROB)


def count_under_curve(r: PoissonRealization, t0: float, t1: float, height_fn) -> int:
    """``#{i : t0 < τ_i ≤ t1, ξ_i ≤ h(τ_i)}``."""
    lo = np.searchsorted(r.times, t0, side="right")
    hi = np.searchsorted(r.times, t1, side="right")
    n = 0
    for tau, xi in zip(r.times[lo:hi], r.marks[lo:hi]):
        if accepts(xi, height_fn(tau)):
            n += 1
    return n


def count_in_rectangle(r: PoissonRealization, t0: float, t1: float, u0: float, u1: float) -> int:
    """``#{i : t0 ≤ τ_i < t1, u0 ≤ ξ_i ≤ u1}``."""
    lo = np.searchsorted(r.times, t0, side="left")
    hi = np.searchsorted(r.times, t1, side="left")
    xi = r.marks[lo:hi]
    return int(np.count_nonzero((xi >= u0) & (xi <= u1)))


def slab_count(r: PoissonRealization, k: int, n: int, height: float) -> int:
    """Points in the slab ``[k/n, (k+1)/n) × [0, h]`` (zero when ``h ≤ TOL_PROB``)."""
    if height <= TOL_PROB:
        return 0
    return count_in_rectangle(r, k / n, (k + 1) / n, 0.0, height)


class SlabIndex:
    """Points of a :class:`RealizationBatch` grouped by slab ``[k/n, (k+1)/n)``, ``k < steps``."""

    def __init__(self, batch: "RealizationBatch", n: int, steps: int):
        self.batch, self.n, self.steps = batch, n, steps
        edges = np.arange(steps + 1) / n
        slab = np.searchsorted(edges, batch.times, side="right") - 1
        self.order = np.argsort(slab, kind="stable")
        self.starts = np.searchsorted(slab[self.order], np.arange(steps + 1), side="left")

    def slab(self, k: int):
        """``(path ids, marks, times)`` of the points in slab ``k``."""
        if not 0 <= k < self.steps:
            raise IndexError(k)
        sel = self.order[self.starts[k]:self.starts[k + 1]]
        b = self.batch
        return b.path[sel], b.marks[sel], b.times[sel]

    def counts(self, k: int, heights) -> np.ndarray:
        """Per-path count of slab-``k`` points with ``ξ ≤ heights[path]`` (cf. :func:`slab_count`)."""
        path, marks, _ = self.slab(k)
        heights = np.asarray(heights, dtype=float)
        ok = accepts(marks, heights[path])
        return np.bincount(path[ok], minlength=self.batch.size)


class RealizationBatch:
    """Points of several realizations stacked for vectorized slab queries."""

    def __init__(self, realizations):
        self.realizations = list(realizations)
        if not self.realizations:
            raise ValueError("empty batch")
        Ts = {r.T for r in self.realizations}
        if len(Ts) != 1:
            raise ValueError("all realizations in a batch must share T")
        self.T = Ts.pop()
        self.size = len(self.realizations)
        lengths = [len(r) for r in self.realizations]
        self.path = np.repeat(np.arange(self.size), lengths)
        self.times = np.concatenate([r.times for r in self.realizations])
        self.marks = np.concatenate([r.marks for r in self.realizations])

    def __len__(self) -> int:
        return self.size

    def digests(self) -> list[str]:
        return [r.digest() for r in self.realizations]

    def index(self, n: int, steps: int) -> SlabIndex:
        return SlabIndex(self, n, steps)
