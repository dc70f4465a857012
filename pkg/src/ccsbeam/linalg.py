"""Complex matrix primitives for 2D circular correlation sensing.

Conventions used throughout the package:

* ``dft_kernel(N)`` is the unitary DFT matrix with entries
  ``exp(-2j*pi*k*l/N)/sqrt(N)``; it is symmetric and unitary.
* ``dft2(A) = conj(U) @ A @ conj(U)`` (the adjoint kernel on both sides),
  so ``dft2`` preserves Frobenius norm and is inverted by ``idft2``.
* ``circ_xcorr(H, P)[r, c] = sum_{k,l} H[k,l] * conj(P)[(k-r)%N, (l-c)%N]``,
  i.e. entry (r, c) is the inner product of H with the (r, c)-circulant
  shift of P.

The key spectral identity (verified by tests) is

    dft2(circ_xcorr(H, P)) == dft2(H) * (N * conj(dft2(P)))

entrywise, which is what makes full-sampling recovery a pointwise division.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

__all__ = [
    "dft_kernel",
    "dft2",
    "idft2",
    "circ_shift",
    "circ_xcorr",
    "stack_real_tensor",
    "valid_correlate2",
    "stacked_correlation",
]


@lru_cache(maxsize=32)
def dft_kernel(n: int) -> np.ndarray:
    """Unitary N x N DFT matrix U with U[k, l] = exp(-2j*pi*k*l/N)/sqrt(N)."""
    if n < 1:
        raise ValueError(f"array side must be positive, got {n}")
    k = np.arange(n)
    u = np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)
    u.setflags(write=False)
    return u


def _check_square(a: np.ndarray, name: str = "input") -> int:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    return a.shape[0]


def dft2(a: np.ndarray) -> np.ndarray:
    """2D unitary transform conj(U) @ A @ conj(U).

    Maps a channel matrix to its beamspace representation. Norm-preserving;
    inverse is :func:`idft2`.
    """
    n = _check_square(a)
    uc = dft_kernel(n).conj()
    return uc @ np.asarray(a, dtype=np.complex128) @ uc


def idft2(b: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2`: U @ B @ U."""
    n = _check_square(b)
    u = dft_kernel(n)
    return u @ np.asarray(b, dtype=np.complex128) @ u


def circ_shift(p: np.ndarray, r: int, c: int) -> np.ndarray:
    """Circulantly shift P down by r rows and right by c columns.

    output[k, l] = P[(k - r) % N, (l - c) % N].  Offsets must already lie in
    [0, N); callers reduce mod N themselves so that out-of-range values are
    caught as bugs instead of silently wrapping.
    """
    n = _check_square(p)
    if not (0 <= r < n and 0 <= c < n):
        raise ValueError(f"shift offsets must lie in [0, {n}), got ({r}, {c})")
    return np.roll(np.asarray(p), (r, c), axis=(0, 1))


@lru_cache(maxsize=8)
def _shift_gather_index(n: int) -> np.ndarray:
    """Index table T with T[r*N+c, k*N+l] = ((k-r)%N)*N + (l-c)%N.

    Lets the direct-path correlation be evaluated as one gather + matvec.
    """
    k = np.arange(n)
    row = (k[None, :] - k[:, None]) % n  # row[r, k] = (k - r) % N
    idx = (row[:, None, :, None] * n + row[None, :, None, :]).reshape(n * n, n * n)
    idx.setflags(write=False)
    return idx


def circ_xcorr(h: np.ndarray, p: np.ndarray, method: str = "auto") -> np.ndarray:
    """2D circular cross-correlation G of H against the base matrix P.

    G[r, c] = sum_{k,l} H[k,l] * conj(P)[(k-r)%N, (l-c)%N]
            = <H, circ_shift(P, r, c)>.

    method: "direct" evaluates the definition (default for N <= 16),
    "fft" uses the spectral identity; "auto" picks by size.  Both paths are
    cross-validated in the tests.
    """
    n = _check_square(h, "H")
    if _check_square(p, "P") != n:
        raise ValueError(f"H and P must have equal shape, got {h.shape} vs {p.shape}")
    if method == "auto":
        method = "direct" if n <= 16 else "fft"
    h = np.asarray(h, dtype=np.complex128)
    p = np.asarray(p, dtype=np.complex128)
    if method == "direct":
        gathered = p.conj().ravel()[_shift_gather_index(n)]
        return (gathered @ h.ravel()).reshape(n, n)
    if method == "fft":
        return np.fft.ifft2(np.fft.fft2(h) * np.fft.fft2(p).conj())
    raise ValueError(f"unknown method {method!r}")


def stack_real_tensor(h: np.ndarray) -> np.ndarray:
    """Arrange a complex N x N matrix as the 2N x 4N x 2 real stack.

    Valid-mode, stride-1 real cross-correlation of the stack with the
    two-channel filter (P_R, P_I) produces an (N+1) x (3N+1) map whose
    columns [0, N) hold Re(circ_xcorr(H, P)) and whose columns [2N, 3N)
    hold Im(circ_xcorr(H, P)), both over rows [0, N).  The periodic 2x2
    tiling realizes the circular wrap; the sign flip on the second half
    realizes the complex conjugate product.
    """
    n = _check_square(h, "H")
    h = np.asarray(h, dtype=np.complex128)
    hr = np.tile(h.real, (2, 2))
    hi = np.tile(h.imag, (2, 2))
    out = np.empty((2 * n, 4 * n, 2), dtype=np.float64)
    out[:, : 2 * n, 0] = hr
    out[:, 2 * n :, 0] = hi
    out[:, : 2 * n, 1] = hi
    out[:, 2 * n :, 1] = -hr
    return out


def valid_correlate2(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode stride-1 2D cross-correlation of real arrays.

    out[u, v] = sum_{k,l} image[u+k, v+l] * kernel[k, l].
    """
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    windows = np.lib.stride_tricks.sliding_window_view(image, kernel.shape)
    return np.einsum("uvkl,kl->uv", windows, kernel)


def stacked_correlation(stack: np.ndarray, p_r: np.ndarray, p_i: np.ndarray) -> np.ndarray:
    """Apply the two-channel filter (p_r, p_i) to a stack from stack_real_tensor."""
    return valid_correlate2(stack[:, :, 0], p_r) + valid_correlate2(stack[:, :, 1], p_i)
