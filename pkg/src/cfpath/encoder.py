"""Hierarchical patch encoder with a convolutional stem.

A stage skeleton in the spirit of a tiny Swin Transformer: a stride-4 conv
stem, then stages of pre-norm transformer blocks where each transition
halves the grid and doubles the channels (2x2 patch merging). Any stage
can be pooled to a fixed-width vector for downstream use.
"""
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from .errors import IndivisibleChannels, ShapeMismatch

PAPER_CHANNELS = (96, 192, 384, 768)


@dataclass(frozen=True)
class StageEncoderConfig:
    input_size: int = 64
    width: float = 0.125
    depths: tuple = (1, 1, 2, 1)
    head_dim: int = 12
    mlp_ratio: float = 2.0
    window: int = 8
    num_stages: int = 4

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if len(self.depths) != 4:
            raise ValueError("depths must list four stages")
        if not 1 <= self.num_stages <= 4:
            raise ValueError("num_stages must be in 1..4")
        if self.input_size % (4 * 2 ** (self.num_stages - 1)):
            raise ValueError("input_size must be divisible by the total stride")
        for c in self.channels:
            if c % self.head_dim:
                raise ValueError(f"channels {c} not divisible by head_dim {self.head_dim}")

    @property
    def channels(self):
        return tuple(int(round(c * self.width)) for c in PAPER_CHANNELS)

    @property
    def feature_dim(self):
        """Width of one pooled stage vector (768 at full width)."""
        return self.channels[-1]

    def grid(self, stage):
        return self.input_size // (4 * 2 ** stage)

    def truncated(self, num_stages):
        return replace(self, num_stages=num_stages)


class ExtractMode(str, Enum):
    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"
    ALL_STAGES = "AllStages"
    LAST2 = "Last2"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).strip().lower():
                return m
        raise ValueError(f"unknown extract mode {value!r}")

    @property
    def stages(self):
        return {
            "S1": (0,), "S2": (1,), "S3": (2,), "S4": (3,),
            "AllStages": (0, 1, 2, 3), "Last2": (2, 3),
        }[self.value]


def init_weights(module):
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.LayerNorm, nn.BatchNorm1d)):
        if module.weight is not None:
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


def window_partition(x, side, window):
    b, _, c = x.shape
    n = side // window
    x = x.reshape(b, n, window, n, window, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b * n * n, window * window, c)


def window_merge(x, side, window):
    n = side // window
    c = x.shape[-1]
    x = x.reshape(-1, n, n, window, window, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, side * side, c)


class Block(nn.Module):
    """Pre-norm transformer block; attention runs inside non-overlapping windows."""

    def __init__(self, dim, heads, mlp_ratio, side, window):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        # grids no larger than the window fall back to global attention
        self.side = side
        self.window = window if side > window and side % window == 0 else side
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        if self.window < self.side:
            h = window_merge(self.attn(window_partition(h, self.side, self.window)),
                             self.side, self.window)
        else:
            h = self.attn(h)
        x = x + h
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate 2x2 neighbours, then project 4C -> 2C."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x, h, w):
        b, _, c = x.shape
        x = x.reshape(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 4, 2, 5)
        x = x.reshape(b, (h // 2) * (w // 2), 4 * c)
        return self.reduction(self.norm(x))


class ConvStem(nn.Module):
    """Two stride-2 convs: (B, 3, H, W) -> (B, H/4 * W/4, C1)."""

    def __init__(self, out_channels):
        super().__init__()
        mid = max(out_channels // 2, 1)
        self.conv1 = nn.Conv2d(3, mid, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(mid, out_channels, 3, stride=2, padding=1)
        self.norm = nn.LayerNorm(out_channels)

    def forward(self, x):
        x = self.conv2(F.gelu(self.conv1(x)))
        return self.norm(x.flatten(2).transpose(1, 2))


class StageEncoder(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config = config or StageEncoderConfig()
        chans = config.channels
        self.stem = ConvStem(chans[0])
        self.merges = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.stage_norms = nn.ModuleList()
        for s in range(config.num_stages):
            if s > 0:
                self.merges.append(PatchMerging(chans[s - 1]))
            heads = chans[s] // config.head_dim
            self.stages.append(nn.Sequential(
                *[Block(chans[s], heads, config.mlp_ratio, config.grid(s), config.window)
                  for _ in range(config.depths[s])]))
            self.stage_norms.append(nn.LayerNorm(chans[s]))
        self.apply(init_weights)

    def forward_all_stages(self, images):
        """Return per-stage activation maps, each (B, C_s, H_s, W_s)."""
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (cfg.input_size,) * 2:
            raise ShapeMismatch(
                f"expected (B, 3, {cfg.input_size}, {cfg.input_size}), got {tuple(images.shape)}")
        x = self.stem(images)
        side = cfg.grid(0)
        outputs = []
        for s, blocks in enumerate(self.stages):
            if s > 0:
                x = self.merges[s - 1](x, side, side)
                side //= 2
            x = blocks(x)
            out = self.stage_norms[s](x)
            outputs.append(out.transpose(1, 2).reshape(x.shape[0], -1, side, side))
        return outputs

    def forward(self, images):
        """Final-stage pooled feature, (B, feature_dim)."""
        return pool_stage(self.forward_all_stages(images)[-1], self.config.feature_dim)

    def extract_features(self, images, mode):
        mode = ExtractMode.parse(mode)
        if max(mode.stages) >= self.config.num_stages:
            raise ValueError(f"mode {mode.value} needs stages the encoder does not have")
        acts = self.forward_all_stages(images)
        return torch.cat([pool_stage(acts[s], self.config.feature_dim) for s in mode.stages], dim=1)


def pool_grid(channels, feature_dim):
    if feature_dim % channels:
        raise IndivisibleChannels(f"{feature_dim} is not a multiple of {channels} channels")
    cells = feature_dim // channels
    r = math.isqrt(cells)
    return (r, r) if r * r == cells else (1, cells)


def pool_stage(activation, feature_dim=768):
    """Adaptive-average-pool a (B, C, H, W) map to feature_dim/C cells, flatten channel-major."""
    grid = pool_grid(activation.shape[1], feature_dim)
    return F.adaptive_avg_pool2d(activation, grid).flatten(1)


def pool_stage_to_768(activation):
    return pool_stage(activation, 768)


def mode_width(config, mode):
    return config.feature_dim * len(ExtractMode.parse(mode).stages)


def load_truncated(encoder, num_stages):
    """Copy of ``encoder`` that keeps only its first ``num_stages`` stages."""
    small = StageEncoder(encoder.config.truncated(num_stages)).to(
        next(encoder.parameters()).dtype)
    own = encoder.state_dict()
    small.load_state_dict({k: own[k] for k in small.state_dict()})
    return small


@dataclass(frozen=True)
class MLPSpec:
    """Linear layers with BatchNorm+ReLU between; ``last_bn`` adds a plain BN at the end."""

    dims: tuple = field(default_factory=tuple)
    batch_norm: bool = True
    last_bn: bool = False
    bias: bool = False


def projection_spec(in_dim, hidden=256, out=256):
    return MLPSpec(dims=(in_dim, hidden, hidden, out), last_bn=True)


def prediction_spec(dim=256, hidden=256):
    return MLPSpec(dims=(dim, hidden, dim))


def projection_head(spec):
    """Build the MLP described by ``spec``; an empty spec is the identity."""
    if len(spec.dims) < 2:
        return nn.Identity()
    layers = []
    pairs = list(zip(spec.dims[:-1], spec.dims[1:]))
    for i, (a, b) in enumerate(pairs):
        last = i == len(pairs) - 1
        layers.append(nn.Linear(a, b, bias=spec.bias))
        if not last:
            if spec.batch_norm:
                layers.append(nn.BatchNorm1d(b))
            layers.append(nn.ReLU(inplace=True))
        elif spec.last_bn:
            layers.append(nn.BatchNorm1d(b, affine=False))
    head = nn.Sequential(*layers)
    head.apply(init_weights)
    return head


def parameter_report(encoder):
    """Parameter count kept when truncating after each stage."""
    report = {}
    for s in range(1, encoder.config.num_stages + 1):
        report[s] = sum(p.numel() for p in load_truncated(encoder, s).parameters())
    return report
