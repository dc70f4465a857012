"""Compressive beam alignment for planar phased arrays.

Channel measurements are entries of the 2D circular cross-correlation
between the channel matrix and a single learnable base phase-shift matrix,
subsampled at a fixed set of circulant shifts.  The package provides the
exact linear-algebra primitives, a synthetic two-lane street channel
generator, the measurement/quantization operators, a from-scratch trainable
beam classifier with projected gradient descent for low-resolution phase
shifters, an OMP baseline, and an evaluation sweep harness with CSV/figure
reports.
"""

__version__ = "0.1.0"
