"""Vector-space analogs of common image corruptions with severity levels.

Severity L1 applies one randomly chosen kind per corrupted sample, L2 a
random count in 1..5 and L3 a random count in 1..8, always as distinct
kinds applied in sequence.  Magnitudes are drawn per application and are
expressed in units of the clean data's mean per-feature standard deviation
(unit scale when that is zero).
``intensity`` rescales every kind's displacement from its input.

Mapping from image corruptions:

  gaussian-noise     additive isotropic noise
  salt-pepper        random coordinates clamped to the per-feature min or max
  brightness-offset  one constant offset on every coordinate
  color-shift        independent offsets on four contiguous coordinate blocks
  motion-blur        moving average along the coordinate axis
  fog                blend toward the dataset mean plus a constant haze
  contrast-scale     shrink toward the sample's own mean
  quantization       rounding to a coarse grid (JPEG analog)
  pixelate           averaging within contiguous coordinate blocks
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

SEVERITY_MAX_KINDS = {"L1": 1, "L2": 5, "L3": 8}


@dataclass(frozen=True)
class _Context:
    scale: float
    lo: np.ndarray
    hi: np.ndarray
    mean: np.ndarray


def _gaussian_noise(x, rng, ctx):
    return x + rng.normal(0.0, rng.uniform(0.3, 0.8) * ctx.scale, x.shape)


def _salt_pepper(x, rng, ctx):
    hit = rng.random(x.shape) < rng.uniform(0.05, 0.2)
    salt = rng.random(x.shape) < 0.5
    return np.where(hit, np.where(salt, ctx.hi, ctx.lo), x)


def _brightness(x, rng, ctx):
    return x + rng.choice((-1.0, 1.0)) * rng.uniform(0.3, 0.8) * ctx.scale


def _color_shift(x, rng, ctx):
    out = x.copy()
    for block in np.array_split(np.arange(x.size), 4):
        out[block] += rng.normal(0.0, 0.5 * ctx.scale)
    return out


def _motion_blur(x, rng, ctx):
    width = int(rng.integers(2, 5))
    padded = np.pad(x, (width // 2, width - 1 - width // 2), mode="edge")
    return np.convolve(padded, np.full(width, 1.0 / width), mode="valid")


def _fog(x, rng, ctx):
    a = rng.uniform(0.2, 0.5)
    return (1.0 - a) * x + a * ctx.mean + a * ctx.scale


def _contrast(x, rng, ctx):
    s = rng.uniform(0.4, 0.8)
    m = x.mean()
    return m + s * (x - m)


def _quantization(x, rng, ctx):
    step = rng.uniform(0.3, 0.8) * ctx.scale
    return np.round(x / step) * step


def _pixelate(x, rng, ctx):
    size = int(rng.integers(2, 5))
    out = x.copy()
    for start in range(0, x.size, size):
        out[start : start + size] = x[start : start + size].mean()
    return out


KINDS = {
    "gaussian-noise": _gaussian_noise,
    "salt-pepper": _salt_pepper,
    "brightness-offset": _brightness,
    "color-shift": _color_shift,
    "motion-blur": _motion_blur,
    "fog": _fog,
    "contrast-scale": _contrast,
    "quantization": _quantization,
    "pixelate": _pixelate,
}


@dataclass(frozen=True)
class CorruptionSpec:
    severity: str = "L2"
    fraction: float = 0.2
    kinds: tuple[str, ...] = tuple(KINDS)
    seed: int = 0
    intensity: float = 1.0

    def __post_init__(self):
        if self.severity not in SEVERITY_MAX_KINDS:
            raise ValueError(f"unknown severity {self.severity!r} (expected L1, L2 or L3)")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        unknown = [k for k in self.kinds if k not in KINDS]
        if unknown:
            raise ValueError(f"unknown corruption kind(s): {', '.join(unknown)}")
        if self.intensity <= 0:
            raise ValueError("intensity must be positive")
        if len(set(self.kinds)) != len(self.kinds):
            raise ValueError("corruption kinds must be distinct")

    @property
    def max_kinds(self) -> int:
        return min(SEVERITY_MAX_KINDS[self.severity], len(self.kinds))


@dataclass
class CorruptionResult:
    x: np.ndarray
    mask: np.ndarray
    applied: list[tuple[str, ...]]

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(a) for a in self.applied if a], dtype=int)


def corrupted_count(n: int, fraction: float) -> int:
    """floor(fraction * n), reading ``fraction`` as the decimal it prints as."""
    return int(Fraction(repr(float(fraction))) * n)


def apply_corruption(x: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator | None = None,
                     reference: np.ndarray | None = None) -> CorruptionResult:
    """Corrupt exactly floor(fraction * n) samples; the rest are copied bitwise.

    ``reference`` supplies the clean statistics (defaults to ``x`` itself).
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    out = x.copy()
    mask = np.zeros(n, dtype=bool)
    applied: list[tuple[str, ...]] = [()] * n
    n_bad = corrupted_count(n, spec.fraction)
    if n_bad == 0:
        return CorruptionResult(out, mask, applied)
    ref = x if reference is None else np.asarray(reference, dtype=np.float64)
    scale = float(ref.std(axis=0).mean())
    if not scale > 0:
        scale = 1.0  # degenerate reference (e.g. a single sample)
    ctx = _Context(scale, ref.min(axis=0), ref.max(axis=0), ref.mean(axis=0))
    chosen = np.sort(rng.choice(n, size=n_bad, replace=False))
    mask[chosen] = True
    names = list(spec.kinds)
    for i in chosen:
        count = 1 if spec.max_kinds == 1 else int(rng.integers(1, spec.max_kinds + 1))
        picks = tuple(names[j] for j in rng.choice(len(names), size=count, replace=False))
        v = out[i]
        for kind in picks:
            step = KINDS[kind](v, rng, ctx)
            v = step if spec.intensity == 1.0 else v + spec.intensity * (step - v)
        out[i] = v
        applied[i] = picks
    return CorruptionResult(out, mask, applied)
