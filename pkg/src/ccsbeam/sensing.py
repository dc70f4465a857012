"""Measurement operators: shift sets, noisy subsampled correlation,
phase quantization, masks, and full-sampling recovery."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg

__all__ = [
    "SubsamplingSet",
    "BaseMatrix",
    "Measurement",
    "MeasurementOperator",
    "SingularMaskError",
    "counter_rng",
    "sample_omega",
    "measure",
    "quantize_phase",
    "mask",
    "full_recovery",
    "chirp_base_matrix",
]


class SingularMaskError(ValueError):
    """Raised when the base-matrix spectrum has a (near-)zero entry."""


def counter_rng(seed: int, *counters: int) -> np.random.Generator:
    """Counter-based RNG: an independent, reproducible stream per counter tuple.

    Used for per-(sample, epoch) noise draws so repeated runs and paired
    method comparisons see identical randomness.
    """
    if len(counters) > 3:
        raise ValueError("at most three counter words supported")
    ctr = np.zeros(4, dtype=np.uint64)
    for i, c in enumerate(counters):
        ctr[i] = np.uint64(c)
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(0x9E3779B97F4A7C15)])
    return np.random.Generator(np.random.Philox(counter=ctr, key=key))


@dataclass(frozen=True)
class SubsamplingSet:
    """Ordered set of M distinct 2D circulant shifts (r[m], c[m]) in [0, N)^2."""

    n: int
    shifts: tuple[tuple[int, int], ...]

    def __post_init__(self):
        m = len(self.shifts)
        if not 1 <= m <= self.n * self.n:
            raise ValueError(f"need 1 <= M <= N^2, got M={m} for N={self.n}")
        if len(set(self.shifts)) != m:
            raise ValueError("shift pairs must be distinct")
        for r, c in self.shifts:
            if not (0 <= r < self.n and 0 <= c < self.n):
                raise ValueError(f"shift ({r}, {c}) outside [0, {self.n})^2")

    @property
    def m(self) -> int:
        return len(self.shifts)

    def rows(self) -> np.ndarray:
        return np.array([r for r, _ in self.shifts], dtype=np.intp)

    def cols(self) -> np.ndarray:
        return np.array([c for _, c in self.shifts], dtype=np.intp)

    def flat_indices(self) -> np.ndarray:
        """Row-major indices r*N + c into a flattened N x N correlation map."""
        return self.rows() * self.n + self.cols()

    def serialize(self) -> list[str]:
        """One 'r,c' line per shift, in order."""
        return [f"{r},{c}" for r, c in self.shifts]

    @classmethod
    def deserialize(cls, n: int, lines: list[str]) -> "SubsamplingSet":
        shifts = []
        for line in lines:
            r, c = line.strip().split(",")
            shifts.append((int(r), int(c)))
        return cls(n, tuple(shifts))


@dataclass
class BaseMatrix:
    """Base phase-shift matrix with per-shifter constant modulus.

    Every entry has modulus omega/N where omega = ||P||_F; with finite
    resolution q all phases lie on the 2*pi/2^q grid.
    """

    p: np.ndarray
    q: int | None = None  # None = unconstrained resolution

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.complex128)
        n = self.p.shape[0]
        if self.p.ndim != 2 or self.p.shape[1] != n:
            raise ValueError(f"base matrix must be square, got {self.p.shape}")
        mods = np.abs(self.p)
        if mods.min() <= 0:
            raise ValueError("base matrix entries must be nonzero")
        if not np.allclose(mods, mods.flat[0], rtol=1e-9, atol=0):
            raise ValueError("base matrix entries must share a common modulus")

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def omega(self) -> float:
        return float(np.linalg.norm(self.p))


@dataclass
class Measurement:
    """Compressed channel measurement vector with its noise level and shifts."""

    y: np.ndarray
    noise_var: float
    omega_set: SubsamplingSet = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.y)


class MeasurementOperator:
    """Gather tables turning subsampled circular correlation into one matrix
    product per batch (plus the adjoint gather used by the filter gradient)."""

    def __init__(self, omega_set: SubsamplingSet):
        n = omega_set.n
        k = np.arange(n)
        rows, cols = omega_set.rows(), omega_set.cols()
        sub = lambda off: (k[None, :] - off[:, None]) % n
        add = lambda off: (k[None, :] + off[:, None]) % n
        # perm[i, m]: index into P paired with H-index i in measurement m
        self.perm = (
            (sub(rows)[:, :, None] * n + sub(cols)[:, None, :]).reshape(len(rows), n * n).T
        )
        # inv[m, j]: index into H paired with P-index j in measurement m
        self.inv = (add(rows)[:, :, None] * n + add(cols)[:, None, :]).reshape(len(rows), n * n)
        self._m_range = np.arange(len(rows))

    def sensing_matrix(self, p: np.ndarray) -> np.ndarray:
        """(N^2, M) matrix S such that y = h_flat @ S."""
        return p.conj().ravel()[self.perm]

    def filter_grad(self, c: np.ndarray) -> np.ndarray:
        """Collapse C[i, m] = sum_b H[b, i] * conj(g_y[b, m]) onto P entries."""
        return c[self.inv, self._m_range[:, None]].sum(axis=0)


def sample_omega(n: int, m: int, seed: int) -> SubsamplingSet:
    """Draw M distinct shift pairs uniformly from the N x N grid."""
    if not 1 <= m <= n * n:
        raise ValueError(f"need 1 <= M <= N^2, got M={m} for N={n}")
    rng = counter_rng(seed)
    flat = rng.choice(n * n, size=m, replace=False)
    return SubsamplingSet(n, tuple((int(i) // n, int(i) % n) for i in flat))


def measure(
    h: np.ndarray,
    p: BaseMatrix | np.ndarray,
    omega_set: SubsamplingSet,
    noise_var: float = 0.0,
    seed: int = 0,
) -> Measurement:
    """Acquire y[m] = G(r[m], c[m]) + v[m] with G = circ_xcorr(H, P).

    v[m] is complex Gaussian with independent real/imaginary parts of
    variance noise_var/2 each; noise_var = 0 gives exact subsampling.
    """
    if noise_var < 0:
        raise ValueError("noise variance must be nonnegative")
    pm = p.p if isinstance(p, BaseMatrix) else np.asarray(p)
    g = linalg.circ_xcorr(h, pm)
    y = g.ravel()[omega_set.flat_indices()].copy()
    if noise_var > 0:
        rng = counter_rng(seed)
        scale = np.sqrt(noise_var / 2.0)
        y = y + scale * (
            rng.standard_normal(len(y)) + 1j * rng.standard_normal(len(y))
        )
    return Measurement(y=y, noise_var=float(noise_var), omega_set=omega_set)


# Floor guard: phase values a hair below a grid point (atan2 round-off) snap
# up, making the quantizer idempotent in floating point.
_GRID_GUARD = 1e-9


def quantize_phase(p: np.ndarray, q: int) -> np.ndarray:
    """Project each entry onto the unit-modulus 2^q-point phase grid.

    entry -> exp(1j * delta * floor(angle(entry)/delta)) with
    delta = 2*pi/2^q and the angle taken in [0, 2*pi).  Input magnitudes
    are discarded.
    """
    if q < 1:
        raise ValueError(f"resolution must be at least 1 bit, got q={q}")
    p = np.asarray(p, dtype=np.complex128)
    if np.any(p == 0):
        raise ValueError("cannot quantize a zero entry (phase undefined)")
    delta = 2.0 * np.pi / (1 << q)
    ang = np.angle(p)
    ang = np.where(ang < 0, ang + 2.0 * np.pi, ang)
    t = ang / delta
    b = np.floor(t)
    b = np.where(t - b > 1.0 - _GRID_GUARD, b + 1, b)
    b = np.mod(b, 1 << q)
    return np.exp(1j * delta * b)


def mask(p: np.ndarray) -> np.ndarray:
    """Beamspace magnitude pattern |N * dft2(P)| of a base matrix.

    Invariant under circulant shifts of P; governs how much sensing energy
    each beamspace direction receives.
    """
    p = p.p if isinstance(p, BaseMatrix) else p
    n = p.shape[0]
    return np.abs(n * linalg.dft2(p))


def full_recovery(g: np.ndarray, p: np.ndarray, rel_tol: float = 1e-9) -> np.ndarray:
    """Recover the beamspace from a full correlation map G = circ_xcorr(H, P).

    Divides dft2(G) by the effective spectrum Z_eff = N * conj(dft2(P))
    entrywise.  Raises SingularMaskError if any |Z_eff| falls below
    rel_tol * max|Z_eff|.
    """
    pm = p.p if isinstance(p, BaseMatrix) else np.asarray(p)
    n = pm.shape[0]
    z_eff = n * np.conj(linalg.dft2(pm))
    mags = np.abs(z_eff)
    floor = rel_tol * mags.max()
    if mags.min() <= floor:
        i, j = np.unravel_index(int(np.argmin(mags)), z_eff.shape)
        raise SingularMaskError(
            f"base-matrix spectrum is (near-)zero at index ({i}, {j}): "
            f"|Z|={mags[i, j]:.3e} <= {floor:.3e}"
        )
    return linalg.dft2(g) / z_eff


def chirp_base_matrix(n: int) -> BaseMatrix:
    """Separable quadratic-chirp base matrix with an exactly flat mask.

    P[k, l] = exp(1j*pi*(k^2 + l^2)/N); for even N its periodic
    autocorrelation is ideal, so |dft2(P)| is constant and the matrix is
    admissible for full-sampling recovery.
    """
    k = np.arange(n)
    u = np.exp(1j * np.pi * k * k / n)
    return BaseMatrix(p=np.outer(u, u), q=None)
