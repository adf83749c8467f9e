"""Classwise mask decoder: two-way transformer, upscaling paths and per-class logit maps."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .encoder import LayerNorm2d


class CrossAttention(nn.Module):
    """Attention with separate q/k/v projections and an optional internal downsample of channels."""

    def __init__(self, dim, num_heads, downsample=1):
        super().__init__()
        inner = dim // downsample
        if inner % num_heads:
            raise ValueError(f"inner dim {inner} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, inner)
        self.k_proj = nn.Linear(dim, inner)
        self.v_proj = nn.Linear(dim, inner)
        self.out_proj = nn.Linear(inner, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = attn.softmax(dim=-1) @ v
        b, h, n, d = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, h * d))


class TwoWayBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_dim):
        super().__init__()
        self.self_attn = CrossAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = CrossAttention(dim, num_heads, downsample=2)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.ReLU(), nn.Linear(mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = CrossAttention(dim, num_heads, downsample=2)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, queries, keys, query_pe, key_pe):
        q = queries + query_pe
        queries = self.norm1(queries + self.self_attn(q, q, queries))

        q, k = queries + query_pe, keys + key_pe
        queries = self.norm2(queries + self.cross_token_to_image(q, k, keys))

        queries = self.norm3(queries + self.mlp(queries))

        q, k = queries + query_pe, keys + key_pe
        keys = self.norm4(keys + self.cross_image_to_token(k, q, queries))
        return queries, keys


def upscaler(in_dim, hidden, out_dim):
    """Two stride-2 transposed convolutions, each followed by channel norm and GELU (4x spatial)."""
    return nn.Sequential(
        nn.ConvTranspose2d(in_dim, hidden, kernel_size=2, stride=2),
        LayerNorm2d(hidden),
        nn.GELU(),
        nn.ConvTranspose2d(hidden, out_dim, kernel_size=2, stride=2),
        LayerNorm2d(out_dim),
        nn.GELU(),
    )


class HyperMLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, num_layers=3):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class ClasswiseDecoder(nn.Module):
    """Maps an image embedding (B, neck_dim, G, G) to per-slot class logits (B, K, 4G, 4G)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dim, g = cfg.decoder_dim, cfg.grid_size
        _, u1, u2 = cfg.upscale_dims
        self.mask_tokens = nn.Parameter(torch.randn(cfg.num_mask_slots, dim) * 0.02)
        self.input_proj = nn.Identity() if cfg.neck_dim == dim else nn.Conv2d(cfg.neck_dim, dim, kernel_size=1)
        self.image_pe = nn.Parameter(torch.randn(1, g * g, dim) * 0.02)
        self.twoway_blocks = nn.ModuleList(
            TwoWayBlock(dim, cfg.decoder_heads, cfg.decoder_mlp_dim) for _ in range(2)
        )
        self.sam_upscaler = upscaler(dim, u1, u2)
        self.skip_upscaler = upscaler(cfg.neck_dim, u1, u2) if cfg.feature_enhance_enabled else None
        hidden = 2 * u2
        # the deconvolution doubles resolution; the strided conv brings it back to 4G
        self.classwise_upscaler = nn.Sequential(
            nn.ConvTranspose2d(2 * u2, hidden, kernel_size=2, stride=2),
            LayerNorm2d(hidden),
            nn.ReLU(),
            nn.Conv2d(hidden, cfg.classwise_channels * cfg.num_classes, kernel_size=3, stride=2, padding=1),
        )
        self.hyper_mlps = nn.ModuleList(
            HyperMLP(dim, dim, cfg.classwise_channels) for _ in range(cfg.num_mask_slots)
        )

    def two_way_refine(self, image_emb, tokens):
        """Returns refined tokens (B, S, dim) and the refined embedding (B, dim, G, G)."""
        b, c, h, w = image_emb.shape
        keys = image_emb.flatten(2).transpose(1, 2)
        if keys.shape[1] != self.image_pe.shape[1]:
            raise ValueError(f"embedding grid {h}x{w} does not match the configured token grid")
        queries = tokens
        for blk in self.twoway_blocks:
            queries, keys = blk(queries, keys, tokens, self.image_pe)
        return queries, keys.transpose(1, 2).reshape(b, c, h, w)

    def feature_enhance(self, raw_emb, refined_emb):
        if raw_emb.shape[-2:] != refined_emb.shape[-2:]:
            raise ValueError(f"raw {tuple(raw_emb.shape)} and refined {tuple(refined_emb.shape)} grids differ")
        up = self.sam_upscaler(refined_emb)
        skip = self.skip_upscaler(raw_emb) if self.skip_upscaler is not None else torch.zeros_like(up)
        return torch.cat([up, skip], dim=1)

    def classwise_embedding(self, feature):
        """(B, 2*u2, 4G, 4G) -> E of shape (B, classwise_channels, K, 4G, 4G)."""
        e = self.classwise_upscaler(feature)
        b, _, h, w = e.shape
        # channel index = class * classwise_channels + d, so appending classes keeps earlier filters in place
        return e.reshape(b, self.cfg.num_classes, self.cfg.classwise_channels, h, w).transpose(1, 2)

    def classwise_logits(self, feature, refined_tokens, slot=0):
        if not 0 <= slot < self.cfg.num_mask_slots:
            raise IndexError(f"slot {slot} outside [0, {self.cfg.num_mask_slots})")
        e = self.classwise_embedding(feature)
        t = self.hyper_mlps[slot](refined_tokens[:, slot])
        return torch.einsum("bdchw,bd->bchw", e, t)

    def forward(self, image_emb, slots=(0,)):
        b = image_emb.shape[0]
        tokens = self.mask_tokens.unsqueeze(0).expand(b, -1, -1)
        src = self.input_proj(image_emb)
        refined_tokens, refined_emb = self.two_way_refine(src, tokens)
        feature = self.feature_enhance(image_emb, refined_emb)
        e = self.classwise_embedding(feature)
        out = []
        for slot in slots:
            if not 0 <= slot < self.cfg.num_mask_slots:
                raise IndexError(f"slot {slot} outside [0, {self.cfg.num_mask_slots})")
            t = self.hyper_mlps[slot](refined_tokens[:, slot])
            out.append(torch.einsum("bdchw,bd->bchw", e, t))
        return torch.stack(out, dim=1)


def two_way_refine(image_emb, tokens, params: ClasswiseDecoder):
    return params.two_way_refine(image_emb, tokens)


def feature_enhance(raw_emb, refined_emb, params: ClasswiseDecoder):
    return params.feature_enhance(raw_emb, refined_emb)


def classwise_logits(feature, refined_tokens, params: ClasswiseDecoder, slot=0):
    return params.classwise_logits(feature, refined_tokens, slot)
