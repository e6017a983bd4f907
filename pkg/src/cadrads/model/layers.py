"""Building blocks of the MaxViT classifier.

Activations are ``N x C x H x W``; attention operates on token batches
``(B, T, C)``.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import DivisibilityError, ShapeMismatch


# --------------------------------------------------------------------------- #
# partitions
# --------------------------------------------------------------------------- #

def _check_divisible(h, w, p, what):
    if h % p or w % p:
        raise DivisibilityError(f"{what} size {p} does not tile a {h}x{w} feature map")


def window_partition(x: torch.Tensor, p: int) -> torch.Tensor:
    """Non-overlapping ``p x p`` windows: ``(N, C, H, W) -> (N * H*W/p^2, p^2, C)``.

    Windows are ordered row-major over the window grid, tokens row-major
    inside each window.
    """
    n, c, h, w = x.shape
    _check_divisible(h, w, p, "window")
    x = x.reshape(n, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(n * (h // p) * (w // p), p * p, c)


def window_reverse(tokens: torch.Tensor, p: int, n: int, h: int, w: int) -> torch.Tensor:
    c = tokens.shape[-1]
    x = tokens.reshape(n, h // p, w // p, p, p, c)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(n, c, h, w)


def grid_partition(x: torch.Tensor, g: int) -> torch.Tensor:
    """Dilated ``g x g`` groups: ``(N, C, H, W) -> (N * H*W/g^2, g^2, C)``.

    Group ``(a, b)`` holds the pixels ``(i * H/g + a, j * W/g + b)`` for
    ``i, j < g``; groups are ordered row-major in ``(a, b)``.
    """
    n, c, h, w = x.shape
    _check_divisible(h, w, g, "grid")
    x = x.reshape(n, c, g, h // g, g, w // g)          # (n, c, i, a, j, b)
    x = x.permute(0, 3, 5, 2, 4, 1)                     # (n, a, b, i, j, c)
    return x.reshape(n * (h // g) * (w // g), g * g, c)


def grid_reverse(tokens: torch.Tensor, g: int, n: int, h: int, w: int) -> torch.Tensor:
    c = tokens.shape[-1]
    x = tokens.reshape(n, h // g, w // g, g, g, c)     # (n, a, b, i, j, c)
    x = x.permute(0, 5, 3, 1, 4, 2)                     # (n, c, i, a, j, b)
    return x.reshape(n, c, h, w)


# --------------------------------------------------------------------------- #
# attention
# --------------------------------------------------------------------------- #

def relative_position_index(p: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(p), torch.arange(p), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :] + (p - 1)
    return rel[0] * (2 * p - 1) + rel[1]


class RelativeAttention(nn.Module):
    """Pre-norm multi-head self-attention with a 2-D relative position bias,
    followed by a pre-norm MLP; both with residual connections.

    Tokens are expected to come from a ``size x size`` window or grid group.
    """

    def __init__(self, dim: int, head_dim: int, size: int, mlp_ratio: int = 4):
        super().__init__()
        if dim % head_dim:
            raise ShapeMismatch(f"dim {dim} not divisible by head_dim {head_dim}")
        self.dim = dim
        self.heads = dim // head_dim
        self.head_dim = head_dim
        self.size = size
        self.scale = head_dim ** -0.5
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.relative_bias = nn.Parameter(torch.zeros(self.heads, (2 * size - 1) ** 2))
        self.register_buffer("rel_index", relative_position_index(size), persistent=False)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def bias(self) -> torch.Tensor:
        return self.relative_bias[:, self.rel_index]               # (heads, T, T)

    def attention_probs(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k, _ = self._qkv(self.norm1(tokens))
        return torch.softmax(q @ k.transpose(-2, -1) * self.scale + self.bias(), dim=-1)

    def _qkv(self, x):
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        """The attention sub-layer alone, including its residual."""
        b, t, c = tokens.shape
        if c != self.dim or t != self.size ** 2:
            raise ShapeMismatch(f"expected (*, {self.size ** 2}, {self.dim}) tokens, got {tuple(tokens.shape)}")
        q, k, v = self._qkv(self.norm1(tokens))
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale + self.bias(), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, c)
        return tokens + self.proj(out)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.attend(tokens)
        return x + self.mlp(self.norm2(x))


class BlockAttention(nn.Module):
    """Local mixing inside non-overlapping windows."""

    def __init__(self, dim, head_dim, window, mlp_ratio=4):
        super().__init__()
        self.window = window
        self.layer = RelativeAttention(dim, head_dim, window, mlp_ratio)

    def forward(self, x):
        n, _, h, w = x.shape
        return window_reverse(self.layer(window_partition(x, self.window)), self.window, n, h, w)


class GridAttention(nn.Module):
    """Global, sparse mixing across a dilated grid."""

    def __init__(self, dim, head_dim, grid, mlp_ratio=4):
        super().__init__()
        self.grid = grid
        self.layer = RelativeAttention(dim, head_dim, grid, mlp_ratio)

    def forward(self, x):
        n, _, h, w = x.shape
        return grid_reverse(self.layer(grid_partition(x, self.grid)), self.grid, n, h, w)


# --------------------------------------------------------------------------- #
# convolutional blocks
# --------------------------------------------------------------------------- #

class SqueezeExcitation(nn.Module):
    """Channel gate ``sigmoid(W2 relu(W1 avgpool(x)))``.

    ``hidden`` defaults to ``ceil(channels * reduction)``; MBConv passes a
    bottleneck sized from its block width instead of the expanded width.
    """

    def __init__(self, channels: int, reduction: float = 0.25, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, math.ceil(channels * reduction))
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def gate(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)


class MBConv(nn.Module):
    """Inverted residual: norm, 1x1 expand, depthwise 3x3, SE, 1x1 project.

    With ``stride == 2`` or a channel change the shortcut is a 3x3 average
    pool (stride 2 when downsampling) followed by a 1x1 projection.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1, expansion: int = 4, se_reduction: float = 0.25):
        super().__init__()
        mid = expansion * cin
        self.stride = stride
        self.norm = nn.BatchNorm2d(cin)
        self.expand = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.depthwise = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, groups=mid, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.se = SqueezeExcitation(mid, hidden=max(1, math.ceil(cin * se_reduction)))
        self.project = nn.Conv2d(mid, cout, 1)
        if stride != 1 or cin != cout:
            pool = nn.AvgPool2d(3, stride=stride, padding=1) if stride != 1 else nn.Identity()
            self.shortcut = nn.Sequential(pool, nn.Conv2d(cin, cout, 1))
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.norm.num_features:
            raise ShapeMismatch(f"MBConv expects {self.norm.num_features} input channels, got {tuple(x.shape)}")
        y = self.norm(x)
        y = F.gelu(self.bn1(self.expand(y)))
        y = F.gelu(self.bn2(self.depthwise(y)))
        y = self.project(self.se(y))
        return self.shortcut(x) + y


class MaxViTBlock(nn.Module):
    def __init__(self, cin, cout, stride, cfg):
        super().__init__()
        self.mbconv = MBConv(cin, cout, stride, cfg.mbconv_expansion, cfg.se_reduction)
        self.block_attn = BlockAttention(cout, cfg.head_dim, cfg.window_size, cfg.mlp_ratio)
        self.grid_attn = GridAttention(cout, cfg.head_dim, cfg.grid_size, cfg.mlp_ratio)

    def forward(self, x):
        return self.grid_attn(self.block_attn(self.mbconv(x)))


def init_weights(module: nn.Module) -> None:
    """Truncated normal (std 0.02) linear weights, He-normal convolutions,
    zero biases and relative-bias tables, unit norm scales."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.LayerNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, RelativeAttention):
            nn.init.zeros_(m.relative_bias)
