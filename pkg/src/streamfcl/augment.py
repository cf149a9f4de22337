"""Image augmentations on ``[C, H, W]`` arrays or ``[B, C, H, W]`` batches.

The strong pipeline is random and drives contrastive training. Weak views are
deterministic so that importance scores depend on the image alone.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
WEAK_METHODS = ("hflip", "crop", "grayscale", "jitter")
WEAK_JITTER_FACTOR = 0.8


@dataclass
class AugmentationPipeline:
    crop_pad: int = 4
    hflip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_p: float = 0.1

    def __post_init__(self):
        if self.crop_pad < 0:
            raise ValueError("crop_pad must be nonnegative")
        for name in ("hflip_p", "jitter_p", "grayscale_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} strength must lie in [0, 1]")

    @classmethod
    def identity(cls) -> AugmentationPipeline:
        return cls(crop_pad=0, hflip_p=0.0, jitter_p=0.0, brightness=0.0, contrast=0.0, saturation=0.0, grayscale_p=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        single = x.ndim == 3
        batch = x[None] if single else x
        out = _strong(batch, self, rng)
        return out[0] if single else out


def _gray(x: np.ndarray) -> np.ndarray:
    if x.shape[1] != 3:
        return x.mean(axis=1, keepdims=True)
    # Elementwise weighted sum, so batched and single-image results agree bitwise.
    w = LUMA.astype(x.dtype)
    return (x[:, 0] * w[0] + x[:, 1] * w[1] + x[:, 2] * w[2])[:, None]


def _random_crop(x: np.ndarray, pad: int, offsets: np.ndarray) -> np.ndarray:
    b, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i in range(b):
        dy, dx = offsets[i]
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def _strong(x: np.ndarray, p: AugmentationPipeline, rng: np.random.Generator) -> np.ndarray:
    b = x.shape[0]
    # Fixed draw schedule: rng consumption does not depend on the settings.
    offsets = rng.integers(0, 2 * p.crop_pad + 1, size=(b, 2))
    flip_u = rng.random(b)
    jitter_u = rng.random(b)
    factors = rng.uniform(-1.0, 1.0, size=(b, 3))
    gray_u = rng.random(b)

    out = _random_crop(x, p.crop_pad, offsets) if p.crop_pad else x.copy()
    flip = flip_u < p.hflip_p
    if flip.any():
        out[flip] = out[flip][..., ::-1]
    jit = jitter_u < p.jitter_p
    if jit.any():
        y = out[jit]
        f = 1.0 + factors[jit] * np.array([p.brightness, p.contrast, p.saturation])
        y = np.clip(y * f[:, 0, None, None, None], 0.0, 1.0)
        m = _gray(y).mean(axis=(1, 2, 3), keepdims=True)
        y = np.clip((y - m) * f[:, 1, None, None, None] + m, 0.0, 1.0)
        if y.shape[1] == 3:
            g = _gray(y)
            y = np.clip((y - g) * f[:, 2, None, None, None] + g, 0.0, 1.0)
        out[jit] = y
    gray = gray_u < p.grayscale_p
    if gray.any() and out.shape[1] == 3:
        out[gray] = np.repeat(_gray(out[gray]), 3, axis=1)
    return out


def strong_views(x: np.ndarray, pipeline: AugmentationPipeline, rng: np.random.Generator):
    """Two independent draws from the pipeline applied to the same input(s)."""
    return pipeline(x, rng), pipeline(x, rng)


def weak_view(x: np.ndarray, method: str = "hflip") -> np.ndarray:
    """Deterministic weak augmentation used for importance scoring."""
    if method == "hflip":
        return x[..., ::-1].copy()
    batch = x[None] if x.ndim == 3 else x
    if method == "crop":
        h, w = batch.shape[-2:]
        m = max(1, min(h, w) // 8)
        out = np.zeros_like(batch)
        out[..., m:h - m, m:w - m] = batch[..., m:h - m, m:w - m]
    elif method == "grayscale":
        out = np.repeat(_gray(batch), batch.shape[1], axis=1) if batch.shape[1] == 3 else batch.copy()
    elif method == "jitter":
        out = np.clip(batch * WEAK_JITTER_FACTOR, 0.0, 1.0)
    else:
        raise ValueError(f"unknown weak augmentation {method!r}; expected one of {WEAK_METHODS}")
    return out[0] if x.ndim == 3 else out
