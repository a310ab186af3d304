"""Trainable parameter state for the three scale branches, with file I/O."""

import struct
from dataclasses import dataclass, field

import numpy as np

from .kernels import DEFAULT_SIGMA, DEFAULT_SIZE, ScaleKernels, gaussian_second_derivative_kernels

SCALE_FACTORS = (1, 2, 4)

DARK_TUBES = "dark"
BRIGHT_TUBES = "bright"
POLARITIES = (DARK_TUBES, BRIGHT_TUBES)

BETA_MIN = 1e-3
C_MIN = 1e-3

DEFAULT_BETA = 0.5
DEFAULT_C = 1.0
DEFAULT_THRESHOLD = 1e-3
DEFAULT_NEG_SCALE = 20000.0
DEFAULT_POS_SCALE = 2000.0

PARAMS_MAGIC = b"FRNGNET1"


@dataclass
class ScaleParams:
    """Kernels plus the blobness/structureness sensitivities for one scale."""

    kernels: ScaleKernels
    beta: float = DEFAULT_BETA
    c: float = DEFAULT_C

    def __post_init__(self):
        if self.beta < BETA_MIN or self.c < C_MIN:
            raise ValueError(f"beta and c must be >= {BETA_MIN}, got beta={self.beta}, c={self.c}")


@dataclass
class FrangiNetParams:
    """Full trainable state: three scale branches plus the rescale constants."""

    scales: tuple
    threshold: float = DEFAULT_THRESHOLD
    neg_scale: float = DEFAULT_NEG_SCALE
    pos_scale: float = DEFAULT_POS_SCALE
    polarity: str = DARK_TUBES

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if len(self.scales) != 3:
            raise ValueError(f"exactly 3 scale branches required, got {len(self.scales)}")
        if self.threshold <= 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.neg_scale <= 0 or self.pos_scale <= 0:
            raise ValueError("rescale factors must be positive")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")


def default_params(sigma=DEFAULT_SIGMA, size=DEFAULT_SIZE, beta=DEFAULT_BETA, c=DEFAULT_C,
                   polarity=DARK_TUBES):
    """Freshly initialized parameters: identical analytic kernels per branch.

    Each branch gets its own kernel arrays so they can train independently.
    """
    scales = tuple(
        ScaleParams(kernels=gaussian_second_derivative_kernels(sigma, size), beta=beta, c=c)
        for _ in SCALE_FACTORS
    )
    return FrangiNetParams(scales=scales)


def copy_params(params):
    """Deep copy: fresh kernel arrays, same values."""
    scales = tuple(
        ScaleParams(
            kernels=ScaleKernels(
                kxx=sp.kernels.kxx.copy(),
                kxy=sp.kernels.kxy.copy(),
                kyy=sp.kernels.kyy.copy(),
                sigma=sp.kernels.sigma,
            ),
            beta=sp.beta,
            c=sp.c,
        )
        for sp in params.scales
    )
    return FrangiNetParams(
        scales=scales,
        threshold=params.threshold,
        neg_scale=params.neg_scale,
        pos_scale=params.pos_scale,
        polarity=params.polarity,
    )


def params_equal(a, b):
    """Bitwise equality of every trainable value and constant."""
    if (a.threshold, a.neg_scale, a.pos_scale, a.polarity) != (
        b.threshold, b.neg_scale, b.pos_scale, b.polarity,
    ):
        return False
    for sa, sb in zip(a.scales, b.scales):
        if sa.beta != sb.beta or sa.c != sb.c:
            return False
        for ka, kb in (
            (sa.kernels.kxx, sb.kernels.kxx),
            (sa.kernels.kxy, sb.kernels.kxy),
            (sa.kernels.kyy, sb.kernels.kyy),
        ):
            if ka.shape != kb.shape or not np.array_equal(ka, kb):
                return False
    return True


def save_params(path, params):
    """Write the binary parameter file.

    Layout (little-endian): magic "FRNGNET1"; float64 threshold, neg_scale,
    pos_scale; u8 polarity (0 = dark, 1 = bright); then per scale branch:
    u32 kernel side, kxx/kxy/kyy as float64 row-major, float64 beta and c.
    """
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<dddB", params.threshold, params.neg_scale, params.pos_scale,
                             0 if params.polarity == DARK_TUBES else 1))
        for sp in params.scales:
            side = sp.kernels.kxx.shape[0]
            fh.write(struct.pack("<I", side))
            for k in (sp.kernels.kxx, sp.kernels.kxy, sp.kernels.kyy):
                fh.write(np.ascontiguousarray(k, dtype="<f8").tobytes())
            fh.write(struct.pack("<dd", sp.beta, sp.c))


def load_params(path):
    """Read a parameter file written by save_params."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    pos = 8
    threshold, neg_scale, pos_scale, pol = struct.unpack_from("<dddB", data, pos)
    pos += struct.calcsize("<dddB")
    scales = []
    for _ in range(3):
        (side,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if side < 3 or side % 2 == 0:
            raise ValueError(f"{path}: invalid kernel side {side}")
        n = side * side
        mats = []
        for _ in range(3):
            mats.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos)
                        .reshape(side, side).astype(np.float64))
            pos += 8 * n
        beta, c = struct.unpack_from("<dd", data, pos)
        pos += 16
        scales.append(ScaleParams(
            kernels=ScaleKernels(kxx=mats[0], kxy=mats[1], kyy=mats[2], sigma=DEFAULT_SIGMA),
            beta=beta, c=c,
        ))
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in parameter file")
    return FrangiNetParams(
        scales=tuple(scales), threshold=threshold, neg_scale=neg_scale,
        pos_scale=pos_scale, polarity=DARK_TUBES if pol == 0 else BRIGHT_TUBES,
    )
