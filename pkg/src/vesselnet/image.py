"""Image loading, resampling, patch extraction and valid-mode convolution.

Images are plain 2-D float64 numpy arrays in row-major (row, col) order.
Loaded images are normalized to [0, 1]; binary masks use uint8 {0, 1}.
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.signal import correlate

# Geometry of the three-branch patch pipeline: a 128x128 output window,
# concentric input crops, and the border the largest crop needs.
OUTPUT_SIZE = 128
PATCH_SIZES = (146, 164, 200)
PATCH_MARGINS = (9, 18, 36)
BORDER = PATCH_MARGINS[-1]


class ShapeError(ValueError):
    """Array dimensions violate an operation's contract."""


class FormatError(ValueError):
    """Unsupported pixel layout or file encoding."""


def ensure_image(arr, name="image"):
    """Validate a 2-D finite float array and return it as float64."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf values")
    return a


def _read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) file.

    Returns (array, maxval) where the array is uint (H, W) for PGM and
    (H, W, 3) for PPM. Samples wider than 8 bit are big-endian per the
    Netpbm convention.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    def next_token(pos):
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return data[start:pos], pos

    magic, pos = next_token(0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM magic {magic!r} (binary P5/P6 only)")
    fields = []
    for _ in range(3):
        tok, pos = next_token(pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: malformed PNM header token {tok!r}") from None
    width, height, maxval = fields
    if not (0 < maxval < 65536):
        raise FormatError(f"{path}: PNM maxval {maxval} out of range")
    pos += 1  # single whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raw.size != count:
        raise FormatError(f"{path}: truncated PNM pixel data")
    arr = raw.reshape((height, width) if channels == 1 else (height, width, 3))
    return arr.astype(np.uint16 if maxval > 255 else np.uint8), maxval


def load_image(path):
    """Load a raster image as a float64 array normalized to [0, 1].

    Supports 8/16-bit grayscale and 8-bit RGB in PNG, plus binary PGM/PPM.
    RGB inputs yield the green channel only; integer samples are divided
    by the format's maximum value.
    """
    if not os.path.exists(path):
        raise OSError(f"no such file: {path}")
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".pgm", ".ppm", ".pnm"):
        arr, maxval = _read_pnm(path)
        if arr.ndim == 3:
            arr = arr[:, :, 1]
        return ensure_image(arr.astype(np.float64) / maxval, name=str(path))

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "RGB":
                arr = np.asarray(im)[:, :, 1].astype(np.float64) / 255.0
            elif mode == "L":
                arr = np.asarray(im).astype(np.float64) / 255.0
            elif mode in ("I;16", "I;16B", "I;16L"):
                arr = np.asarray(im).astype(np.float64) / 65535.0
            elif mode == "I":
                # Pillow promotes some 16-bit grayscale PNGs to 32-bit ints.
                arr = np.asarray(im).astype(np.float64) / 65535.0
            else:
                raise FormatError(f"{path}: unsupported pixel layout {mode!r}")
    except FormatError:
        raise
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise FormatError(f"{path}: sample values outside the declared bit depth")
    return ensure_image(arr, name=str(path))


def load_mask(path):
    """Load a binary mask: any supported image, thresholded at 0.5."""
    return (load_image(path) >= 0.5).astype(np.uint8)


def save_gray16_png(path, values):
    """Write values in [0, 1] as 16-bit grayscale PNG (round(v * 65535)).

    Used for probability maps and phantom images.
    """
    p = ensure_image(values, name="gray16 image")
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("gray16 values must lie in [0, 1]")
    Image.fromarray(np.round(p * 65535.0).astype(np.uint16)).save(path, format="PNG")


def save_mask_png(path, mask):
    """Write a binary mask as 8-bit PNG with values {0, 255}."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    Image.fromarray((m.astype(np.uint8) * 255)).save(path, format="PNG")


def save_rgb_png(path, rgb):
    """Write an (H, W, 3) uint8 array as 8-bit RGB PNG."""
    a = np.asarray(rgb, dtype=np.uint8)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"RGB image must have shape (H, W, 3), got {a.shape}")
    Image.fromarray(a, mode="RGB").save(path, format="PNG")


def downsample_avg(img, factor):
    """Downsample by non-overlapping block averaging.

    Both dimensions must be divisible by the factor; factor 1 is the
    identity.
    """
    a = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return a.copy()
    if factor not in (2, 4):
        raise ValueError(f"downsample factor must be 1, 2 or 4, got {factor}")
    h, w = a.shape
    if h % factor or w % factor:
        raise ShapeError(f"dims {a.shape} not divisible by factor {factor}")
    return a.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def upsample_nn(img, factor):
    """Upsample by nearest-neighbor replication into factor x factor blocks."""
    a = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return a.copy()
    if factor not in (2, 4):
        raise ValueError(f"upsample factor must be 1, 2 or 4, got {factor}")
    return np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)


@dataclass
class PatchSet:
    """Concentric crops feeding the three scale branches.

    p0/p2/p4 are 146/164/200 pixels per side and share the center of the
    128x128 output window.
    """

    p0: np.ndarray
    p2: np.ndarray
    p4: np.ndarray

    def __post_init__(self):
        for a, s in zip((self.p0, self.p2, self.p4), PATCH_SIZES):
            if a.shape != (s, s):
                raise ShapeError(f"patch must be {s}x{s}, got {a.shape}")

    @property
    def patches(self):
        return (self.p0, self.p2, self.p4)


def extract_patch_set(img, top_left):
    """Extract the concentric patch crops for one output window.

    `top_left` is the (row, col) of the 128x128 output window; every crop
    needs up to a 36-pixel margin around that window.
    """
    a = ensure_image(img)
    r, c = int(top_left[0]), int(top_left[1])
    h, w = a.shape
    if r - BORDER < 0 or c - BORDER < 0 or r + OUTPUT_SIZE + BORDER > h or c + OUTPUT_SIZE + BORDER > w:
        raise ShapeError(
            f"output window at ({r}, {c}) needs a {BORDER}-px margin inside a {h}x{w} image"
        )
    crops = []
    for size, margin in zip(PATCH_SIZES, PATCH_MARGINS):
        r0, c0 = r - margin, c - margin
        crops.append(a[r0 : r0 + size, c0 : c0 + size].copy())
    return PatchSet(*crops)


def conv2d_valid(img, kernel):
    """Valid-mode 2-D cross-correlation (kernel is not flipped).

    Output dims are input minus kernel plus one per side. The kernel side
    must be odd and fit inside the image.
    """
    a = np.asarray(img, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if a.ndim != 2 or k.ndim != 2:
        raise ShapeError("conv2d_valid expects 2-D arrays")
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ShapeError(f"kernel sides must be odd, got {k.shape}")
    if k.shape[0] > a.shape[0] or k.shape[1] > a.shape[1]:
        raise ShapeError(f"kernel {k.shape} larger than image {a.shape}")
    return correlate(a, k, mode="valid", method="auto")
