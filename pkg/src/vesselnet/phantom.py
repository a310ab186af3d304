"""Synthetic tube phantoms with exact ground-truth masks.

Tubes are dark capsules (segments with rounded ends) on a bright
background, matching the appearance the dark-tube polarity expects.
Hard profiles give exact label arithmetic for geometry tests; gaussian
profiles exercise graded responses for training.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, read_kv_pairs

DIAMETER_MIN = 6.0
DIAMETER_MAX = 35.0
PROFILES = ("hard", "gaussian")


@dataclass
class Tube:
    """One capsule: endpoints in (x, y) pixel coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float
    diameter: float
    contrast: float

    def __post_init__(self):
        if self.x0 == self.x1 and self.y0 == self.y1:
            raise ValueError("degenerate tube: start equals end")
        if not DIAMETER_MIN <= self.diameter <= DIAMETER_MAX:
            raise ValueError(
                f"diameter {self.diameter} outside [{DIAMETER_MIN}, {DIAMETER_MAX}]"
            )
        if not 0.0 < self.contrast <= 1.0:
            raise ValueError(f"contrast must be in (0, 1], got {self.contrast}")


@dataclass
class PhantomSpec:
    width: int
    height: int
    tubes: list = field(default_factory=list)
    background: float = 0.8
    noise_sigma: float = 0.0
    profile: str = "gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"phantom dims must be positive, got {self.width}x{self.height}")
        if not 0.0 <= self.background <= 1.0:
            raise ValueError(f"background must be in [0, 1], got {self.background}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        for t in self.tubes:
            if self.background - t.contrast < 0:
                raise ValueError(
                    f"tube contrast {t.contrast} exceeds background {self.background}"
                )


def _segment_distance(xs, ys, tube):
    """Distance from each grid point to the closed segment (capsule axis)."""
    vx = tube.x1 - tube.x0
    vy = tube.y1 - tube.y0
    px = xs - tube.x0
    py = ys - tube.y0
    t = np.clip((px * vx + py * vy) / (vx * vx + vy * vy), 0.0, 1.0)
    return np.hypot(px - t * vx, py - t * vy)


def generate_phantom(spec):
    """Render a spec into (image, label); identical spec -> identical output.

    The image is background minus each tube's depression (indicator for
    hard profiles, contrast * exp(-d^2 / (2 s^2)) with s = diameter/(2 sqrt 2)
    for gaussian), plus seeded noise, clamped to [0, 1]. The label marks
    pixels within diameter/2 of any segment regardless of profile.
    """
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)
    img = np.full((spec.height, spec.width), spec.background, dtype=np.float64)
    label = np.zeros((spec.height, spec.width), dtype=np.uint8)

    for tube in spec.tubes:
        d = _segment_distance(xs, ys, tube)
        inside = d <= tube.diameter / 2.0
        if spec.profile == "hard":
            img -= tube.contrast * inside
        else:
            s = tube.diameter / (2.0 * np.sqrt(2.0))
            img -= tube.contrast * np.exp(-(d * d) / (2.0 * s * s))
        label |= inside.astype(np.uint8)

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        img += rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), label


def _parse_tube(path, lineno, value):
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 6:
        raise ConfigError(path, lineno,
                          f"tube needs 6 values (x0,y0,x1,y1,diameter,contrast), got {len(parts)}")
    try:
        nums = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(path, lineno, f"non-numeric tube value in {value!r}") from None
    try:
        return Tube(*nums)
    except ValueError as exc:
        raise ConfigError(path, lineno, str(exc)) from None


def parse_phantom_spec(path):
    """Read a phantom spec from a key = value file.

    Keys: width, height (required), background, noise_sigma, profile, seed,
    and one `tube = x0,y0,x1,y1,diameter,contrast` line per tube. Errors
    carry line numbers.
    """
    fields = {"tubes": []}
    converters = {
        "width": int, "height": int, "background": float,
        "noise_sigma": float, "profile": str, "seed": int,
    }
    for lineno, key, value in read_kv_pairs(path):
        if key == "tube":
            fields["tubes"].append(_parse_tube(path, lineno, value))
        elif key in converters:
            try:
                fields[key] = converters[key](value)
            except ValueError:
                raise ConfigError(path, lineno, f"bad value for {key}: {value!r}") from None
        else:
            raise ConfigError(path, lineno, f"unknown key {key!r}")
    for required in ("width", "height"):
        if required not in fields:
            raise ValueError(f"{path}: missing required key {required!r}")
    try:
        return PhantomSpec(**fields)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
