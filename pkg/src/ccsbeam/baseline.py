"""Non-learned comparators: random-phase compressive sensing with OMP
beam prediction, and the exhaustive-search oracle."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import linalg
from .channel import best_beam_label
from .sensing import BaseMatrix, Measurement, SubsamplingSet, counter_rng, quantize_phase

__all__ = [
    "OmpConfig",
    "random_phase_matrix",
    "sensing_dictionary",
    "omp",
    "omp_predict",
    "exhaustive_best",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OmpConfig:
    sparsity: int = 4
    residual_tol: float = 1e-10

    def __post_init__(self):
        if self.sparsity < 1:
            raise ValueError("sparsity must be at least 1")


def random_phase_matrix(n: int, q: int | None, seed: int) -> BaseMatrix:
    """Quasi-omnidirectional base matrix: i.i.d. phases uniform on the 2^q
    grid (or continuous for unconstrained q), unit modulus, ||P||_F = N."""
    rng = counter_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n, n))
    p = np.exp(1j * phases)
    if q is not None:
        p = quantize_phase(p, q)
    return BaseMatrix(p=p, q=q)


def sensing_dictionary(p: BaseMatrix | np.ndarray, omega_set: SubsamplingSet) -> np.ndarray:
    """(M, N^2) sensing matrix A with y = A @ vec(X) for beamspace X.

    Row m is the conjugated, vectorized 2D transform of the m-th circulant
    shift of the base matrix; shifting only multiplies the base spectrum by
    a phase ramp, which is how the rows are built.
    """
    pm = p.p if isinstance(p, BaseMatrix) else np.asarray(p)
    n = pm.shape[0]
    z0 = linalg.dft2(pm)
    u = np.exp(2j * np.pi * np.outer(omega_set.rows(), np.arange(n)) / n)
    v = np.exp(2j * np.pi * np.outer(omega_set.cols(), np.arange(n)) / n)
    z = z0[None] * u[:, :, None] * v[:, None, :]  # (M, N, N) shifted spectra
    return np.conj(z.reshape(omega_set.m, n * n))


def omp(y: np.ndarray, a: np.ndarray, cfg: OmpConfig) -> np.ndarray:
    """Orthogonal matching pursuit for complex dictionaries.

    Parameters
    ----------
    y : (M,) measurement vector
    a : (M, D) sensing matrix whose columns are the atoms
    cfg : sparsity / residual tolerance

    Returns
    -------
    (D,) sparse coefficient vector with at most cfg.sparsity nonzeros.
    """
    m, d = a.shape
    if cfg.sparsity > m:
        raise ValueError(f"sparsity {cfg.sparsity} exceeds measurement count {m}")
    col_norms = np.linalg.norm(a, axis=0)
    col_norms[col_norms == 0] = 1.0
    residual = y.astype(np.complex128).copy()
    support: list[int] = []
    coef = np.zeros(0, dtype=np.complex128)
    for _ in range(cfg.sparsity):
        scores = np.abs(a.conj().T @ residual) / col_norms
        scores[support] = 0.0
        pick = int(np.argmax(scores))
        support.append(pick)
        sub = a[:, support]
        gram = sub.conj().T @ sub
        coef = np.linalg.solve(gram, sub.conj().T @ y)
        residual = y - sub @ coef
        if np.linalg.norm(residual) < cfg.residual_tol:
            break
    x = np.zeros(d, dtype=np.complex128)
    x[support] = coef
    return x


def omp_predict(
    y: Measurement | np.ndarray,
    p: BaseMatrix | np.ndarray,
    omega_set: SubsamplingSet,
    cfg: OmpConfig | None = None,
) -> tuple[int, int]:
    """Beam prediction by sparse recovery over the beamspace dictionary.

    Returns the grid index of the largest-magnitude recovered coefficient.
    An all-zero measurement is degenerate; it predicts (0, 0).
    """
    cfg = cfg or OmpConfig()
    yv = np.asarray(getattr(y, "y", y)).ravel()
    if not np.any(yv):
        log.debug("degenerate all-zero measurement; predicting (0, 0)")
        return (0, 0)
    a = sensing_dictionary(p, omega_set)
    x = omp(yv, a, cfg)
    n = int(np.sqrt(a.shape[1]))
    idx = int(np.argmax(np.abs(x)))
    return idx // n, idx % n


def exhaustive_best(h: np.ndarray) -> tuple[int, int]:
    """Oracle upper bound: the true beamspace argmax of the channel."""
    return best_beam_label(h)
