"""Batched, seeded two-view augmentation on (B, 3, H, W) tensors in [0, 1].

The recipe follows the MoCo-v3 ops (random resized crop, flip, color
jitter, grayscale, blur, solarize) with magnitudes halved for small
patches. Every draw comes from an explicit ``torch.Generator``.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
_GRAY = torch.tensor([0.299, 0.587, 0.114]).view(1, 3, 1, 1)


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_p: float = 1.0
    crop_scale: tuple = (0.5, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.1
    hue: float = 0.05
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 1.0)
    solarize_p: float = 0.1
    seed: int = 0

    @classmethod
    def identity(cls, seed=0):
        return cls(crop_p=0, flip_p=0, jitter_p=0, grayscale_p=0, blur_p=0, solarize_p=0, seed=seed)


def to_tensor(patches):
    """uint8 (B, H, W, 3) or (H, W, 3) array -> float (B, 3, H, W) in [0, 1]."""
    arr = np.asarray(patches)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float()
    return t / 255.0 if arr.dtype == np.uint8 else t


def resize(x, size):
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", antialias=True, align_corners=False)


def normalize(x):
    return (x - MEAN.to(x.dtype)) / STD.to(x.dtype)


def _uniform(g, n, lo, hi):
    return lo + (hi - lo) * torch.rand(n, generator=g)


def _mask(g, n, p):
    return torch.rand(n, generator=g) < p


def _select(mask, new, old):
    return torch.where(mask.view(-1, 1, 1, 1), new, old)


def _gray(x):
    return (x * _GRAY.to(x.dtype)).sum(1, keepdim=True)


def _random_resized_crop(x, g, policy):
    b = x.shape[0]
    scale = _uniform(g, b, *policy.crop_scale)
    log_r = _uniform(g, b, math.log(policy.crop_ratio[0]), math.log(policy.crop_ratio[1]))
    ratio = torch.exp(log_r)
    w = torch.sqrt(scale * ratio).clamp(max=1.0)
    h = torch.sqrt(scale / ratio).clamp(max=1.0)
    cx = (1 - w) * (2 * torch.rand(b, generator=g) - 1)
    cy = (1 - h) * (2 * torch.rand(b, generator=g) - 1)
    theta = torch.zeros(b, 2, 3)
    theta[:, 0, 0], theta[:, 0, 2] = w, cx
    theta[:, 1, 1], theta[:, 1, 2] = h, cy
    grid = F.affine_grid(theta.to(x.dtype), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def _hue_shift(x, shift):
    # rotate chroma in YIQ space
    yiq = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]],
                       dtype=x.dtype)
    inv = torch.linalg.inv(yiq)
    y = torch.einsum("ij,bjhw->bihw", yiq, x)
    ang = (2 * math.pi * shift).to(x.dtype).view(-1, 1, 1)
    cos, sin = torch.cos(ang), torch.sin(ang)
    i, q = y[:, 1], y[:, 2]
    y = torch.stack([y[:, 0], cos * i - sin * q, sin * i + cos * q], dim=1)
    return torch.einsum("ij,bjhw->bihw", inv, y)


def _color_jitter(x, g, policy):
    b = x.shape[0]
    view = (-1, 1, 1, 1)
    f = _uniform(g, b, 1 - policy.brightness, 1 + policy.brightness).to(x.dtype)
    x = (x * f.view(view)).clamp(0, 1)
    f = _uniform(g, b, 1 - policy.contrast, 1 + policy.contrast).to(x.dtype)
    mean = _gray(x).mean(dim=(2, 3), keepdim=True)
    x = ((x - mean) * f.view(view) + mean).clamp(0, 1)
    f = _uniform(g, b, 1 - policy.saturation, 1 + policy.saturation).to(x.dtype)
    gray = _gray(x)
    x = ((x - gray) * f.view(view) + gray).clamp(0, 1)
    shift = _uniform(g, b, -policy.hue, policy.hue)
    return _hue_shift(x, shift).clamp(0, 1)


def _gaussian_blur(x, g, policy):
    b, c, h, w = x.shape
    sigma = _uniform(g, b, *policy.blur_sigma).to(x.dtype)
    radius = max(1, int(math.ceil(3 * policy.blur_sigma[1])))
    offsets = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (offsets[None] / sigma[:, None]) ** 2)
    k = (k / k.sum(1, keepdim=True)).repeat_interleave(c, dim=0)
    flat = x.reshape(1, b * c, h, w)
    flat = F.pad(flat, (radius, radius, radius, radius), mode="reflect")
    flat = F.conv2d(flat, k.view(b * c, 1, 1, -1), groups=b * c)
    flat = F.conv2d(flat, k.view(b * c, 1, -1, 1), groups=b * c)
    return flat.view(b, c, h, w)


def augment(x, g, policy):
    """One augmentation draw for each image in the batch."""
    b = x.shape[0]
    if policy.crop_p > 0:
        x = _select(_mask(g, b, policy.crop_p), _random_resized_crop(x, g, policy), x)
    if policy.flip_p > 0:
        x = _select(_mask(g, b, policy.flip_p), torch.flip(x, dims=(3,)), x)
    if policy.jitter_p > 0:
        x = _select(_mask(g, b, policy.jitter_p), _color_jitter(x, g, policy), x)
    if policy.grayscale_p > 0:
        x = _select(_mask(g, b, policy.grayscale_p), _gray(x).expand_as(x), x)
    if policy.blur_p > 0:
        x = _select(_mask(g, b, policy.blur_p), _gaussian_blur(x, g, policy), x)
    if policy.solarize_p > 0:
        x = _select(_mask(g, b, policy.solarize_p), torch.where(x < 0.5, x, 1 - x), x)
    return x


def two_views(patches, policy, size=None, generator=None):
    """Return normalized (view_a, view_b, original) batches.

    ``original`` is resize + normalize only. Without an explicit generator
    the draws are seeded from ``policy.seed``.
    """
    x = patches if isinstance(patches, torch.Tensor) else to_tensor(patches)
    if x.ndim == 3:
        x = x[None]
    size = size or x.shape[-1]
    g = generator if generator is not None else torch.Generator().manual_seed(policy.seed)
    base = resize(x, size)
    view_a = augment(base, g, policy)
    view_b = augment(base, g, policy)
    return normalize(view_a), normalize(view_b), normalize(base)
