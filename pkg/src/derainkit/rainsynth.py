"""Synthetic rain-streak generation and rainy-image composition.

A rain layer is built the way photo editors fake rain: sparse uniform
noise, thresholded so only a `density` fraction of pixels survive, is
motion-blurred along a line kernel of the requested length and angle,
then contrast-stretched to the requested peak intensity. Several such
fields can be overlaid (screen-blended) to vary streak overlap.

Rainy images are composed from a clean background and a rain layer
either additively (clamped) or with the screen blend
1 - (1 - B)(1 - R) = B + R - B*R, which brightens and never darkens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.signal import fftconvolve

from .errors import EmptyBackgroundsError, ImageSmallerThanPatchError, \
    InvalidParameterError, ShapeMismatchError
from .images import quantize

DENSITY_MAX = 0.2
LENGTH_MIN, LENGTH_MAX = 5, 80
ANGLE_MAX = 30.0
OVERLAYS_MAX = 3


class BlendMode(Enum):
    ADDITIVE = "additive"
    SCREEN = "screen"


@dataclass
class RainParams:
    """Parameters for one rain layer."""

    density: float = 0.05
    streak_length: int = 20
    angle_deg: float = 0.0
    intensity: float = 1.0
    num_overlays: int = 1
    seed: int = 0

    def validate(self) -> "RainParams":
        if not 0.0 < self.density <= DENSITY_MAX:
            raise InvalidParameterError(
                f"density must be in (0, {DENSITY_MAX}], got {self.density}"
            )
        if not LENGTH_MIN <= self.streak_length <= LENGTH_MAX:
            raise InvalidParameterError(
                f"streak_length must be in [{LENGTH_MIN}, {LENGTH_MAX}], "
                f"got {self.streak_length}"
            )
        if not -ANGLE_MAX <= self.angle_deg <= ANGLE_MAX:
            raise InvalidParameterError(
                f"angle_deg must be in [-{ANGLE_MAX}, {ANGLE_MAX}], got {self.angle_deg}"
            )
        if not 0.0 < self.intensity <= 1.0:
            raise InvalidParameterError(
                f"intensity must be in (0, 1], got {self.intensity}"
            )
        if not 1 <= self.num_overlays <= OVERLAYS_MAX:
            raise InvalidParameterError(
                f"num_overlays must be in [1, {OVERLAYS_MAX}], got {self.num_overlays}"
            )
        return self


@dataclass
class RainParamRanges:
    """Per-triplet sampling ranges, (low, high) per field."""

    density: tuple[float, float] = (0.02, 0.12)
    streak_length: tuple[int, int] = (15, 45)
    angle_deg: tuple[float, float] = (-20.0, 20.0)
    intensity: tuple[float, float] = (0.6, 1.0)
    num_overlays: tuple[int, int] = (1, 3)

    def sample(self, rng: np.random.Generator, seed: int) -> RainParams:
        return RainParams(
            density=float(rng.uniform(*self.density)),
            streak_length=int(rng.integers(self.streak_length[0],
                                           self.streak_length[1] + 1)),
            angle_deg=float(rng.uniform(*self.angle_deg)),
            intensity=float(rng.uniform(*self.intensity)),
            num_overlays=int(rng.integers(self.num_overlays[0],
                                          self.num_overlays[1] + 1)),
            seed=seed,
        ).validate()


@dataclass
class Triplet:
    """One training record: rainy image, clean background, rain layer."""

    rainy: np.ndarray
    background: np.ndarray
    rain: np.ndarray
    mode: BlendMode
    seed: int


def _screen(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = a + b - a * b
    # float guard: screen can never darken below either layer or exceed white
    np.maximum(out, np.maximum(a, b), out=out)
    np.minimum(out, out.dtype.type(1.0), out=out)
    return out


def blend(background: np.ndarray, rain: np.ndarray, mode: BlendMode) -> np.ndarray:
    """Compose a rainy image from a background and a rain layer."""
    if background.shape != rain.shape:
        raise ShapeMismatchError(
            f"background {background.shape} vs rain {rain.shape}"
        )
    if mode is BlendMode.SCREEN:
        return _screen(background, rain)
    return np.clip(background + rain, 0.0, 1.0)


def _line_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Unit-mass motion-blur kernel along a line `angle_deg` from vertical."""
    k = length if length % 2 == 1 else length + 1
    pad = k + 2
    kern = np.zeros((pad, pad))
    c = pad // 2
    theta = math.radians(angle_deg)
    dy, dx = math.cos(theta), math.sin(theta)
    t = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 4 * length)
    ys = c + t * dy
    xs = c + t * dx
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    np.add.at(kern, (y0, x0), (1 - fy) * (1 - fx))
    np.add.at(kern, (y0, x0 + 1), (1 - fy) * fx)
    np.add.at(kern, (y0 + 1, x0), fy * (1 - fx))
    np.add.at(kern, (y0 + 1, x0 + 1), fy * fx)
    kern = kern[1:-1, 1:-1]
    return kern / kern.sum()


def _streak_field(h: int, w: int, density: float, length: int,
                  angle_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Single streak field with peak 1, or all zeros if no noise survived."""
    u = rng.random((h, w))
    # keep the top `density` quantile, rescaled to (0, 1] amplitudes
    sparse = np.clip((u - (1.0 - density)) / density, 0.0, 1.0)
    blurred = fftconvolve(sparse, _line_kernel(length, angle_deg), mode="same")
    np.clip(blurred, 0.0, None, out=blurred)
    peak = blurred.max()
    if peak > 0.0:
        blurred /= peak
    return blurred


def generate_rain_layer(h: int, w: int, params: RainParams,
                        channels: int = 1) -> np.ndarray:
    """Deterministic rain layer of shape (h, w, channels), values in [0, 1]."""
    params.validate()
    if channels not in (1, 3):
        raise InvalidParameterError(f"channels must be 1 or 3, got {channels}")
    if h < params.streak_length or w < params.streak_length:
        raise InvalidParameterError(
            f"image {h}x{w} smaller than streak_length {params.streak_length}"
        )
    rng = np.random.default_rng(params.seed)
    layer = np.zeros((h, w))
    for i in range(params.num_overlays):
        angle = params.angle_deg
        length = params.streak_length
        if i > 0:
            # secondary overlays jitter direction and length for variety
            angle = float(np.clip(angle + rng.uniform(-5.0, 5.0),
                                  -ANGLE_MAX, ANGLE_MAX))
            length = int(np.clip(round(length * rng.uniform(0.8, 1.25)),
                                 LENGTH_MIN, min(LENGTH_MAX, h, w)))
        sub = _streak_field(h, w, params.density, length, angle, rng)
        sub *= params.intensity
        layer = _screen(layer, sub)
    out = layer.astype(np.float32)[:, :, None]
    if channels == 3:
        out = np.repeat(out, 3, axis=2)
    return out


def synthesize_dataset(backgrounds: list[np.ndarray], count: int,
                       ranges: RainParamRanges, mode: BlendMode,
                       seed: int, crop: int = 224) -> list[Triplet]:
    """Build `count` triplets from cycled, randomly cropped backgrounds.

    Per-triplet seeds are derived from the master seed, so the same call
    always produces bitwise-identical triplets.
    """
    if not backgrounds:
        raise EmptyBackgroundsError("need at least one background image")
    if count < 1:
        raise InvalidParameterError(f"count must be >= 1, got {count}")
    if crop < ranges.streak_length[1]:
        raise InvalidParameterError(
            f"crop {crop} smaller than max streak length {ranges.streak_length[1]}"
        )
    triplets = []
    for i in range(count):
        child = np.random.SeedSequence(entropy=seed, spawn_key=(i,))
        triplet_seed = int(child.generate_state(1)[0])
        rng = np.random.default_rng(triplet_seed)
        full = backgrounds[i % len(backgrounds)]
        fh, fw, ch = full.shape
        if fh < crop or fw < crop:
            raise ImageSmallerThanPatchError(
                f"background {fh}x{fw} smaller than crop {crop}"
            )
        y = int(rng.integers(0, fh - crop + 1))
        x = int(rng.integers(0, fw - crop + 1))
        # snap both layers to the 8-bit grid before blending, so PNG storage
        # is lossless for them and the stored rainy image stays within half a
        # quantization step of re-blending the stored layers
        bg = quantize(np.ascontiguousarray(full[y:y + crop, x:x + crop, :],
                                           dtype=np.float32))
        params = ranges.sample(rng, seed=int(rng.integers(0, 2 ** 31)))
        rain = quantize(generate_rain_layer(crop, crop, params, channels=ch))
        rainy = blend(bg, rain, mode)
        triplets.append(Triplet(rainy=rainy, background=bg, rain=rain,
                                mode=mode, seed=triplet_seed))
    return triplets
