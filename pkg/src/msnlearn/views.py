"""View generation: augmentation, patchification, and anchor masking.

A view pipeline turns one image into an unmasked target view plus M anchor
views (one randomly masked global view and ``n_focal`` small crops). Masked
patches are dropped from the token sequence outright; their grid positions
travel with the surviving tokens so positional embeddings stay aligned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import ConfigError
from .rng import spawn_streams
from .validation import check_fraction, check_image


@dataclass(frozen=True)
class AugmentConfig:
    """Random-resized-crop, flip, color-jitter, and blur settings."""

    output_size: int = 64
    crop_scale: tuple[float, float] = (0.4, 1.0)
    color_jitter: bool = True
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    horizontal_flip: bool = True
    flip_probability: float = 0.5
    gaussian_blur: bool = True
    blur_probability: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.5)

    def __post_init__(self) -> None:
        if self.output_size < 1:
            raise ConfigError("output_size must be positive")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")
        for name in ("flip_probability", "blur_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} max-delta must be >= 0")
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ConfigError("blur_sigma must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class ViewConfig:
    """Full anchor/target view recipe for one image."""

    patch_size: int = 8
    keep_fraction: float = 0.5
    n_focal: int = 4
    focal_size: int = 32
    focal_scale: tuple[float, float] = (0.05, 0.4)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError("keep_fraction must be in (0, 1]")
        if self.n_focal < 0:
            raise ConfigError("n_focal must be >= 0")
        if self.focal_size >= self.augment.output_size:
            raise ConfigError("focal_size must be smaller than the global view size")

    def focal_augment(self) -> AugmentConfig:
        base = self.augment
        return AugmentConfig(
            output_size=self.focal_size,
            crop_scale=self.focal_scale,
            color_jitter=base.color_jitter,
            brightness=base.brightness,
            contrast=base.contrast,
            saturation=base.saturation,
            horizontal_flip=base.horizontal_flip,
            flip_probability=base.flip_probability,
            gaussian_blur=base.gaussian_blur,
            blur_probability=base.blur_probability,
            blur_sigma=base.blur_sigma,
        )


@dataclass
class TokenSequence:
    """Patch tokens of one view.

    ``tokens`` is L x (p*p*3); ``positions`` holds each token's raster index
    in the view's own ``grid_size`` x ``grid_size`` patch grid, strictly
    increasing; ``kept`` is a boolean mask over that full grid with exactly
    L True entries.
    """

    tokens: np.ndarray
    positions: np.ndarray
    kept: np.ndarray
    grid_size: int
    patch_size: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be 2-D (L, patch_dim)")
        if len(self.positions) != self.tokens.shape[0]:
            raise ValueError("positions must align with tokens")
        if self.kept.shape != (self.grid_size * self.grid_size,):
            raise ValueError("kept mask must cover the full view grid")
        if int(self.kept.sum()) != self.tokens.shape[0]:
            raise ValueError("kept count must equal the number of tokens")
        if np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly increasing (raster order)")

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ViewSet:
    """One target view plus M = 1 + n_focal anchor views of the same image."""

    target: TokenSequence
    anchors: list[TokenSequence]

    def __post_init__(self) -> None:
        if len(self.anchors) < 1:
            raise ValueError("a ViewSet needs at least one anchor view (M >= 1)")
        if not bool(self.target.kept.all()):
            raise ValueError("the target view must never be masked")

    @property
    def n_anchor_views(self) -> int:
        return len(self.anchors)


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def resize_bilinear(image: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize to out_size x out_size with half-pixel centers.

    Exact identity when the size is unchanged.
    """
    h, w = image.shape[:2]
    if h == out_size and w == out_size:
        return image.astype(np.float32, copy=True)

    def axis_coords(n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(out_size, dtype=np.float64) + 0.5) * (n_in / out_size) - 0.5
        lo = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
        hi = np.clip(lo + 1, 0, n_in - 1)
        frac = np.clip(src - lo, 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h)
    x0, x1, fx = axis_coords(w)
    img = image.astype(np.float32)
    fx = fx.astype(np.float32)[None, :, None]
    fy = fy.astype(np.float32)[:, None, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def _random_crop(image: np.ndarray, scale: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    area_frac = rng.uniform(scale[0], scale[1])
    side = int(round(math.sqrt(area_frac * h * w)))
    side = max(1, min(side, min(h, w)))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return image[top:top + side, left:left + side]


def _color_jitter(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    order = rng.permutation(3)
    factors = {
        0: 1.0 + rng.uniform(-config.brightness, config.brightness),
        1: 1.0 + rng.uniform(-config.contrast, config.contrast),
        2: 1.0 + rng.uniform(-config.saturation, config.saturation),
    }
    out = image
    for op in order:
        f = factors[int(op)]
        if op == 0:
            out = out * f
        elif op == 1:
            mean = out.mean()
            out = (out - mean) * f + mean
        else:
            gray = out @ np.array([0.299, 0.587, 0.114], dtype=out.dtype)
            out = gray[..., None] + (out - gray[..., None]) * f
    return out


def augment(
    image: np.ndarray, config: AugmentConfig, rng_stream: np.random.Generator
) -> np.ndarray:
    """Apply crop, flip, jitter, and blur; output is clamped to [0, 1].

    The draw order is fixed, so a given stream state fully determines the
    result.
    """
    image = check_image(image)
    out = _random_crop(image, config.crop_scale, rng_stream)
    out = resize_bilinear(out, config.output_size)
    if config.horizontal_flip and rng_stream.uniform() < config.flip_probability:
        out = out[:, ::-1, :].copy()
    if config.color_jitter:
        out = _color_jitter(out, config, rng_stream)
    if config.gaussian_blur and rng_stream.uniform() < config.blur_probability:
        sigma = rng_stream.uniform(*config.blur_sigma)
        out = gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def patchify(image: np.ndarray, patch_size: int) -> TokenSequence:
    """Cut an S x S x 3 image into (S/p)^2 non-overlapping patch tokens."""
    s = image.shape[0]
    if image.ndim != 3 or image.shape[0] != image.shape[1] or image.shape[2] != 3:
        raise ValueError(f"expected a square S x S x 3 image, got {image.shape}")
    if s % patch_size != 0:
        raise ValueError(f"patch size {patch_size} does not divide image size {s}")
    g = s // patch_size
    tokens = (
        image.reshape(g, patch_size, g, patch_size, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * g, patch_size * patch_size * 3)
    )
    return TokenSequence(
        tokens=np.ascontiguousarray(tokens, dtype=np.float32),
        positions=np.arange(g * g, dtype=np.int64),
        kept=np.ones(g * g, dtype=bool),
        grid_size=g,
        patch_size=patch_size,
    )


def unpatchify(seq: TokenSequence) -> np.ndarray:
    """Reassemble a full (unmasked) token sequence into its image."""
    g, p = seq.grid_size, seq.patch_size
    if not bool(seq.kept.all()):
        raise ValueError("cannot unpatchify a masked sequence")
    return (
        seq.tokens.reshape(g, g, p, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(g * p, g * p, 3)
    )


def random_mask(
    seq: TokenSequence, keep_fraction: float, rng_stream: np.random.Generator
) -> TokenSequence:
    """Keep exactly round(keep_fraction * L) tokens, uniformly without replacement."""
    check_fraction(keep_fraction, "keep_fraction")
    n = len(seq)
    n_keep = round_half_away(keep_fraction * n)
    if n_keep == 0:
        raise ValueError(
            f"keep_fraction {keep_fraction} keeps zero of {n} tokens"
        )
    if n_keep >= n:
        return TokenSequence(
            seq.tokens.copy(), seq.positions.copy(), seq.kept.copy(),
            seq.grid_size, seq.patch_size,
        )
    chosen = np.sort(rng_stream.choice(n, size=n_keep, replace=False))
    kept = np.zeros_like(seq.kept)
    kept[seq.positions[chosen]] = True
    return TokenSequence(
        tokens=seq.tokens[chosen],
        positions=seq.positions[chosen],
        kept=kept,
        grid_size=seq.grid_size,
        patch_size=seq.patch_size,
    )


def focal_views(
    image: np.ndarray,
    n_focal: int,
    crop_size: int,
    config: AugmentConfig,
    rng_stream: np.random.Generator,
    patch_size: int,
) -> list[TokenSequence]:
    """Produce ``n_focal`` independently cropped-and-augmented small views."""
    if n_focal < 0:
        raise ValueError("n_focal must be >= 0")
    if crop_size % patch_size != 0:
        raise ValueError(
            f"patch size {patch_size} does not divide focal crop size {crop_size}"
        )
    if crop_size >= image.shape[0]:
        raise ValueError("focal crop size must be smaller than the source image")
    views = []
    for _ in range(n_focal):
        small = augment(image, config, rng_stream)
        views.append(patchify(small, patch_size))
    return views


def make_viewset(
    image: np.ndarray, config: ViewConfig, rng_stream: np.random.Generator
) -> ViewSet:
    """Build the target view and all anchor views for one image.

    The target, the masked global anchor, and the focal crops each consume
    an independent child stream, so e.g. changing ``n_focal`` leaves the
    masked global anchor bit-identical.
    """
    target_rng, anchor_rng, focal_rng = spawn_streams(rng_stream, 3)

    target = patchify(augment(image, config.augment, target_rng), config.patch_size)

    global_anchor = patchify(
        augment(image, config.augment, anchor_rng), config.patch_size
    )
    global_anchor = random_mask(global_anchor, config.keep_fraction, anchor_rng)

    anchors = [global_anchor]
    if config.n_focal > 0:
        anchors.extend(
            focal_views(
                image, config.n_focal, config.focal_size,
                config.focal_augment(), focal_rng, config.patch_size,
            )
        )
    return ViewSet(target=target, anchors=anchors)
