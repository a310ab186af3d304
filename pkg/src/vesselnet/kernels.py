"""Gaussian second-partial-derivative kernels that seed each scale branch."""

from dataclasses import dataclass

import numpy as np

DEFAULT_SIGMA = 3.0
# 19 is the unique odd support making the patch chain exact:
# 146-19+1 = 128, 82-19+1 = 64, 50-19+1 = 32.
DEFAULT_SIZE = 19


@dataclass
class ScaleKernels:
    """The three Hessian convolution kernels for one scale branch.

    kxx and kyy are even in both axes (kyy is the transpose of kxx);
    kxy is odd in each axis, so its entries sum to zero exactly.
    """

    kxx: np.ndarray
    kxy: np.ndarray
    kyy: np.ndarray
    sigma: float = DEFAULT_SIGMA

    @property
    def size(self):
        return self.kxx.shape[0]


def gaussian_second_derivative_kernels(sigma=DEFAULT_SIGMA, size=DEFAULT_SIZE):
    """Sample the analytic second derivatives of a 2-D Gaussian.

    With g(x, y) = exp(-(x^2 + y^2) / (2 sigma^2)) / (2 pi sigma^2):

        kxx = (x^2 / sigma^4 - 1 / sigma^2) * g
        kyy = (y^2 / sigma^4 - 1 / sigma^2) * g
        kxy = (x y / sigma^4) * g

    sampled at integer offsets centered on (0, 0). No renormalization is
    applied after truncation, so the kernels keep their analytic values;
    the truncated sums carry a residue that shrinks with the support.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    r = size // 2
    u = np.arange(-r, r + 1, dtype=np.float64)
    # x varies along columns, y along rows.
    y, x = np.meshgrid(u, u, indexing="ij")
    g = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma)) / (2.0 * np.pi * sigma * sigma)
    s2 = sigma * sigma
    s4 = s2 * s2
    kxx = (x * x / s4 - 1.0 / s2) * g
    kyy = (y * y / s4 - 1.0 / s2) * g
    kxy = (x * y / s4) * g
    return ScaleKernels(kxx=kxx, kxy=kxy, kyy=kyy, sigma=float(sigma))
