"""Per-visit feature encoders.

Two sinusoidal time encodings (absolute months since enrollment, and the
relative gap to the next visit) plus a small convolutional image encoder
that maps each visit image to a d-dimensional embedding. Visit times are
always in months here; year-to-month conversion happens at the CLI
boundary.
"""
from __future__ import annotations

import numpy as np

from . import diffgraph as dg
from .errors import ConfigError, DataError


def _sinusoid(values: np.ndarray, d: int) -> np.ndarray:
    """Rows of interleaved sin/cos at geometric frequencies 10000^(2i/d)."""
    if d % 2 != 0 or d <= 0:
        raise ConfigError(f"encoding width must be a positive even number, got {d}")
    v = np.asarray(values, dtype=float)
    i = np.arange(d // 2, dtype=float)
    angles = v[..., None] / np.power(10000.0, 2.0 * i / d)
    out = np.empty(v.shape + (d,), dtype=float)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def temporal_encode(v_months, d: int) -> np.ndarray:
    """Encode absolute visit time (months since enrollment) as a length-d row."""
    v = np.asarray(v_months, dtype=float)
    if np.any(v < 0):
        raise DataError("visit times must be nonnegative months")
    return _sinusoid(v, d)


def relative_encode(r_months, d: int) -> np.ndarray:
    """Encode the gap to the next visit (months) with the same sinusoid family."""
    r = np.asarray(r_months, dtype=float)
    if np.any(r < 0):
        raise DataError("negative inter-visit gap: visits out of order")
    return _sinusoid(r, d)


# ---------------------------------------------------------------------------
# convolutional image encoder
# ---------------------------------------------------------------------------

def conv_encoder_param_shapes(channels: int, image_size: int, d: int,
                              widths=(8, 16, 32)) -> dict:
    """Parameter name -> shape for the 3-block conv stack plus final linear map."""
    if image_size % 8 != 0:
        raise ConfigError(f"image size must be divisible by 8, got {image_size}")
    shapes = {}
    c_in = channels
    for i, c_out in enumerate(widths):
        shapes[f"enc.conv{i}.w"] = (c_out, c_in, 3, 3)
        shapes[f"enc.conv{i}.b"] = (c_out,)
        c_in = c_out
    flat = widths[-1] * (image_size // 8) ** 2
    shapes["enc.fc.w"] = (flat, d)
    shapes["enc.fc.b"] = (d,)
    return shapes


def encode_images(images: dg.Node, leaves: dict, n_blocks: int = 3) -> dg.Node:
    """Map a batch of images (N, C, H, W) to embeddings (N, d)."""
    x = images
    for i in range(n_blocks):
        x = dg.conv2d(x, leaves[f"enc.conv{i}.w"], leaves[f"enc.conv{i}.b"], pad=1)
        x = dg.relu(x)
        x = dg.avg_pool2(x)
    n = x.value.shape[0]
    x = dg.reshape(x, (n, -1))
    return dg.matmul(x, leaves["enc.fc.w"]) + leaves["enc.fc.b"]


# ---------------------------------------------------------------------------
# pixel pipeline: augmentation + standardization
# ---------------------------------------------------------------------------

AUG_NOISE_SIGMA = 0.02
AUG_MAX_SHIFT = 2


def augment_images(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Training-time augmentation: additive pixel noise and small translations.

    Each is applied independently with probability 0.5 per image; outputs
    are clipped back to [0, 1].
    """
    out = images.copy()
    n = out.shape[0]
    noise_on = rng.random(n) < 0.5
    shift_on = rng.random(n) < 0.5
    shifts = rng.integers(-AUG_MAX_SHIFT, AUG_MAX_SHIFT + 1, size=(n, 2))
    for k in range(n):
        if shift_on[k]:
            dy, dx = int(shifts[k, 0]), int(shifts[k, 1])
            out[k] = np.roll(out[k], (dy, dx), axis=(-2, -1))
        if noise_on[k]:
            out[k] = out[k] + rng.normal(0.0, AUG_NOISE_SIGMA, size=out[k].shape)
    return np.clip(out, 0.0, 1.0)


def pixel_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    """Channel-wise mean and std over a stack of training images (N, C, H, W)."""
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std < 1e-6, 1.0, std)
    return [float(m) for m in mean], [float(s) for s in std]


def standardize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=images.dtype).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=images.dtype).reshape(1, -1, 1, 1)
    return (images - mean) / std
