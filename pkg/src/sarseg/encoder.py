"""ViT image encoder with serial/parallel bottleneck adapters and optional low-frequency fusion."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig


class Adapter(nn.Module):
    """Down -> ReLU -> Up bottleneck. Up starts at zero so the adapter is a no-op at init."""

    def __init__(self, dim, hidden):
        super().__init__()
        self.down = nn.Linear(dim, hidden)
        self.up = nn.Linear(hidden, dim)
        nn.init.normal_(self.down.weight, std=0.02)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return self.up(F.relu(self.down(x)))


def adapter_forward(f, params: Adapter):
    return params(f)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        # x: (B, N, C)
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


def attention(x, params: Attention):
    """Multi-head self-attention over a (B, N, C) token set."""
    return params(x)


def window_partition(x, window):
    """(B, H, W, C) -> (B*nw, window*window, C), zero-padding H and W up to a multiple of window."""
    b, h, w, c = x.shape
    ph, pw = (-h) % window, (-w) % window
    if ph or pw:
        x = F.pad(x, (0, 0, 0, pw, 0, ph))
    hp, wp = h + ph, w + pw
    x = x.reshape(b, hp // window, window, wp // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c), (hp, wp)


def window_unpartition(windows, window, padded, size):
    hp, wp = padded
    h, w = size
    c = windows.shape[-1]
    b = windows.shape[0] // ((hp // window) * (wp // window))
    x = windows.reshape(b, hp // window, wp // window, window, window, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
    return x[:, :h, :w]


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4.0, window_size=0, adapter_hidden=None):
        super().__init__()
        self.window_size = window_size  # 0 means global attention
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        if adapter_hidden:
            self.adapter_serial = Adapter(dim, adapter_hidden)
            self.adapter_parallel = Adapter(dim, adapter_hidden)
        else:
            self.adapter_serial = self.adapter_parallel = None

    def _attend(self, x):
        b, h, w, c = x.shape
        if self.window_size:
            windows, padded = window_partition(x, self.window_size)
            out = self.attn(windows)
            return window_unpartition(out, self.window_size, padded, (h, w))
        return self.attn(x.reshape(b, h * w, c)).reshape(b, h, w, c)

    def forward(self, x, tsi_in=None):
        # x: (B, G, G, C)
        if tsi_in is not None:
            x = x + tsi_in
        a = self._attend(self.norm1(x))
        if self.adapter_serial is not None:
            # identity path keeps the frozen attention output; a zero adapter adds exactly 0
            a = a + self.adapter_serial(a)
        x = a + x
        y = self.norm2(x)
        out = self.mlp(y)
        if self.adapter_parallel is not None:
            out = out + self.adapter_parallel(y)
        return out + x


def block_forward(x_prev, params: Block, tsi_in=None):
    return params(x_prev, tsi_in)


class LayerNorm2d(nn.Module):
    """Channel LayerNorm for (B, C, H, W) maps."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class ImageEncoder(nn.Module):
    """Patch embedding, transformer blocks and the convolutional neck.

    Input is a (B, H, W) single-channel image; output is (B, neck_dim, G, G).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, g = cfg.embed_dim, cfg.grid_size
        self.patch_proj = nn.Conv2d(1, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, g, g, d))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        hidden = cfg.adapter_hidden_dim if cfg.adapters_enabled else None
        self.blocks = nn.ModuleList(
            Block(d, cfg.num_heads, cfg.mlp_ratio,
                  window_size=0 if i in cfg.global_attn_layers else cfg.window_size,
                  adapter_hidden=hidden)
            for i in range(cfg.depth)
        )
        self.neck = nn.Sequential(
            nn.Conv2d(d, cfg.neck_dim, kernel_size=1, bias=False),
            LayerNorm2d(cfg.neck_dim),
            nn.Conv2d(cfg.neck_dim, cfg.neck_dim, kernel_size=3, padding=1, bias=False),
            LayerNorm2d(cfg.neck_dim),
        )

    def patch_embed(self, image):
        size = self.cfg.image_size
        if tuple(image.shape[-2:]) != (size, size):
            raise ValueError(f"image is {tuple(image.shape[-2:])}, config expects {size}x{size}")
        x = self.patch_proj(image.unsqueeze(1)).permute(0, 2, 3, 1)
        return x + self.pos_embed

    def forward(self, image, tsi=None, tokens=None):
        x = self.patch_embed(image) if tokens is None else tokens
        if tsi is not None and len(tsi) != len(self.blocks):
            raise ValueError(f"got {len(tsi)} fusion features for {len(self.blocks)} blocks")
        for i, blk in enumerate(self.blocks):
            x = blk(x, None if tsi is None else tsi[i])
        return self.neck(x.permute(0, 3, 1, 2))


def patch_embed(image, params: ImageEncoder):
    return params.patch_embed(image)


def encoder_forward(image, tsi, params: ImageEncoder):
    return params(image, tsi)
