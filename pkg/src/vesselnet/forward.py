"""Forward vessel-enhancement pipeline and the classical single-pass filter.

The trainable path runs three parallel scale branches: resize by (1, 2, 4),
convolve with the branch's three kernels to get a Hessian field, solve the
per-pixel 2x2 eigenproblem, score tubularness, and upsample back to the
128x128 output window. Branch outputs fuse by pixelwise maximum and a
threshold-centered asymmetric sigmoid turns the fused score into a
probability map.

The classical filter computes the same measure directly with one
sigma-specific kernel per scale at full resolution; at sigma = 3 it is the
exact reference for branch 0.
"""

import math
from dataclasses import dataclass

import numpy as np

from .image import (
    OUTPUT_SIZE,
    PATCH_SIZES,
    ShapeError,
    conv2d_valid,
    downsample_avg,
    ensure_image,
    upsample_nn,
)
from .kernels import gaussian_second_derivative_kernels
from .params import (
    BRIGHT_TUBES,
    DARK_TUBES,
    DEFAULT_BETA,
    DEFAULT_C,
    POLARITIES,
    SCALE_FACTORS,
)

# Keeps the blobness ratio finite where lambda2 == 0; irrelevant elsewhere.
EPS_DIV = 1e-12


@dataclass
class HessianField:
    """Second-derivative response channels of equal dims."""

    hxx: np.ndarray
    hxy: np.ndarray
    hyy: np.ndarray

    def __post_init__(self):
        if not (self.hxx.shape == self.hxy.shape == self.hyy.shape):
            raise ShapeError("Hessian channels must share dims")


@dataclass
class EigenField:
    """Per-pixel eigenvalues with |lam2| >= |lam1|."""

    lam1: np.ndarray
    lam2: np.ndarray


def hessian_field(patch, kernels):
    """Convolve a patch with the three kernels of one scale branch."""
    return HessianField(
        hxx=conv2d_valid(patch, kernels.kxx),
        hxy=conv2d_valid(patch, kernels.kxy),
        hyy=conv2d_valid(patch, kernels.kyy),
    )


def _eigen_parts(hxx, hxy, hyy):
    """Closed-form symmetric 2x2 eigenvalues, ordered by magnitude.

    Returns (lam1, lam2, swap) where swap marks pixels whose larger-magnitude
    eigenvalue came from the "-" branch; on magnitude ties lam2 takes the
    "+" branch.
    """
    trace = hxx + hyy
    det_root = np.sqrt((hxx - hyy) ** 2 + 4.0 * hxy**2)
    lam_plus = 0.5 * (trace + det_root)
    lam_minus = 0.5 * (trace - det_root)
    swap = np.abs(lam_plus) < np.abs(lam_minus)
    lam2 = np.where(swap, lam_minus, lam_plus)
    lam1 = np.where(swap, lam_plus, lam_minus)
    return lam1, lam2, swap


def eigenvalues(h):
    """Eigenvalue maps of a Hessian field with |lam2| >= |lam1| per pixel."""
    lam1, lam2, _ = _eigen_parts(h.hxx, h.hxy, h.hyy)
    return EigenField(lam1=lam1, lam2=lam2)


def _vesselness_parts(lam1, lam2, beta, c, polarity):
    """Tubularness score plus the intermediates its adjoint needs.

    Returns (v, rb, blob_term, struct_exp, gate): rb is the blobness ratio,
    blob_term = exp(-rb^2 / (2 beta^2)), struct_exp = exp(-S^2 / (2 c^2)),
    and gate marks pixels zeroed by the polarity condition.
    """
    if polarity not in POLARITIES:
        raise ValueError(f"polarity must be one of {POLARITIES}, got {polarity!r}")
    if beta <= 0 or c <= 0:
        raise ValueError(f"beta and c must be positive, got beta={beta}, c={c}")
    gate = lam2 < 0 if polarity == DARK_TUBES else lam2 > 0
    s_sq = lam1 * lam1 + lam2 * lam2
    rb = np.abs(lam1) / (np.abs(lam2) + EPS_DIV)
    blob_term = np.exp(-(rb * rb) / (2.0 * beta * beta))
    struct_exp = np.exp(-s_sq / (2.0 * c * c))
    v = np.where(gate, 0.0, blob_term * (1.0 - struct_exp))
    return v, rb, blob_term, struct_exp, gate


def vesselness(e, beta, c, polarity=DARK_TUBES):
    """Per-pixel tubularness in [0, 1) from an eigenvalue field."""
    v, _, _, _, _ = _vesselness_parts(e.lam1, e.lam2, beta, c, polarity)
    return v


@dataclass
class ScaleTrace:
    """Every forward intermediate of one scale branch, kept for the adjoint."""

    factor: int
    resized: np.ndarray
    hxx: np.ndarray
    hxy: np.ndarray
    hyy: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray
    swap: np.ndarray
    rb: np.ndarray
    blob_term: np.ndarray
    struct_exp: np.ndarray
    gate: np.ndarray
    vessel_small: np.ndarray
    vessel: np.ndarray
    beta: float
    c: float


def _single_scale_trace(patch, scale_index, sp, polarity):
    size = PATCH_SIZES[scale_index]
    factor = SCALE_FACTORS[scale_index]
    p = np.asarray(patch, dtype=np.float64)
    if p.shape != (size, size):
        raise ShapeError(f"scale {scale_index} expects a {size}x{size} patch, got {p.shape}")
    resized = downsample_avg(p, factor)
    hxx = conv2d_valid(resized, sp.kernels.kxx)
    hxy = conv2d_valid(resized, sp.kernels.kxy)
    hyy = conv2d_valid(resized, sp.kernels.kyy)
    lam1, lam2, swap = _eigen_parts(hxx, hxy, hyy)
    vessel_small, rb, blob_term, struct_exp, gate = _vesselness_parts(
        lam1, lam2, sp.beta, sp.c, polarity
    )
    vessel = upsample_nn(vessel_small, factor)
    return ScaleTrace(
        factor=factor, resized=resized, hxx=hxx, hxy=hxy, hyy=hyy,
        lam1=lam1, lam2=lam2, swap=swap, rb=rb, blob_term=blob_term,
        struct_exp=struct_exp, gate=gate, vessel_small=vessel_small,
        vessel=vessel, beta=sp.beta, c=sp.c,
    )


def single_scale_forward(patch, scale_index, sp, polarity=DARK_TUBES):
    """One branch: resize, Hessian, eigenvalues, tubularness, upsample.

    Patch size must match the branch (146, 164, 200 for indices 0, 1, 2);
    the output is always 128x128.
    """
    return _single_scale_trace(patch, scale_index, sp, polarity).vessel


def fuse_scales(maps):
    """Pixelwise maximum over the three branch outputs."""
    stack = _stack_scale_maps(maps)
    return stack.max(axis=0)


def _stack_scale_maps(maps):
    maps = list(maps)
    if len(maps) != 3:
        raise ShapeError(f"expected 3 scale maps, got {len(maps)}")
    shape = (OUTPUT_SIZE, OUTPUT_SIZE)
    for m in maps:
        if m.shape != shape:
            raise ShapeError(f"scale maps must be {shape}, got {m.shape}")
    return np.stack(maps, axis=0)


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def rescale_sigmoid(v, t, neg_scale, pos_scale):
    """Map raw scores to probabilities, centered on the threshold.

    Scores are shifted by t and scaled asymmetrically (neg_scale below the
    threshold, pos_scale at or above it) before the sigmoid, so v = t maps
    to exactly 0.5.
    """
    if t <= 0 or neg_scale <= 0 or pos_scale <= 0:
        raise ValueError("threshold and rescale factors must be positive")
    d = np.asarray(v, dtype=np.float64) - t
    z = np.where(d < 0, d * neg_scale, d * pos_scale)
    return sigmoid(z)


def frangi_net_forward(ps, params, polarity=None):
    """Full forward pass: three branches, max fusion, sigmoid rescale."""
    pol = params.polarity if polarity is None else polarity
    maps = [
        single_scale_forward(patch, i, sp, pol)
        for i, (patch, sp) in enumerate(zip(ps.patches, params.scales))
    ]
    fused = fuse_scales(maps)
    return rescale_sigmoid(fused, params.threshold, params.neg_scale, params.pos_scale)


def classical_kernel_size(sigma):
    """Support that keeps truncation below ~1e-4 of peak: radius ceil(3 sigma)."""
    return 2 * math.ceil(3.0 * sigma) + 1


def single_sigma_vesselness(img, sigma, beta=DEFAULT_BETA, c=DEFAULT_C, polarity=DARK_TUBES):
    """Full-resolution tubularness for one sigma-specific kernel set.

    Output dims are the valid-convolution dims for that sigma's support;
    out[0, 0] is centered on image pixel (radius, radius).
    """
    a = ensure_image(img)
    k = gaussian_second_derivative_kernels(sigma, classical_kernel_size(sigma))
    h = hessian_field(a, k)
    e = eigenvalues(h)
    return vesselness(e, beta, c, polarity)


def classical_frangi(img, sigmas, beta=DEFAULT_BETA, c=DEFAULT_C, polarity=DARK_TUBES):
    """Direct multi-sigma filter: per-sigma maps, center-cropped, max-fused.

    Output dims match the valid-convolution dims of the largest kernel;
    out[0, 0] is centered on image pixel (R, R) where R is the largest
    kernel radius.
    """
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("at least one sigma required")
    a = ensure_image(img)
    sizes = [classical_kernel_size(s) for s in sigmas]
    size_max = max(sizes)
    if size_max > min(a.shape):
        raise ShapeError(f"image {a.shape} smaller than the largest kernel ({size_max})")
    target_h = a.shape[0] - size_max + 1
    target_w = a.shape[1] - size_max + 1
    fused = None
    for sigma, size in zip(sigmas, sizes):
        resp = single_sigma_vesselness(a, sigma, beta, c, polarity)
        m = (size_max - size) // 2
        resp = resp[m : m + target_h, m : m + target_w]
        fused = resp if fused is None else np.maximum(fused, resp)
    return fused
