"""Centered 2D spectra, rectangular low-pass filtering and the low-frequency input branch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


@dataclass(frozen=True)
class LowPassSpec:
    """Rectangular pass band in the centered spectrum.

    ``width`` spans the row axis (M), ``height`` the column axis (N). A bin at
    centered index (u, v) passes when |u - M//2| <= width/2 and
    |v - N//2| <= height/2, so the band is symmetric about DC and a real image
    stays real after filtering.
    """

    width: int
    height: int

    @classmethod
    def from_fraction(cls, shape: tuple[int, int], fraction: float) -> "LowPassSpec":
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction {fraction} outside (0, 1]")
        m, n = shape
        return cls(_band(m, fraction), _band(n, fraction))

    def check(self, shape: tuple[int, int]) -> None:
        m, n = shape
        if not (1 <= self.width <= m and 1 <= self.height <= n):
            raise ValueError(f"low-pass {self.width}x{self.height} invalid for a {m}x{n} spectrum")


def _band(size: int, fraction: float) -> int:
    # nearest even bin count (halves round up), clamped to [1, size]
    return int(min(max(2 * math.floor(fraction * size / 2 + 0.5), 1), size))


def dft2(image: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D DFT with DC moved to index (M//2, N//2)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ValueError(f"expected a non-empty 2D grid, got shape {image.shape}")
    return np.fft.fftshift(np.fft.fft2(image))


def idft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2` (complex output)."""
    return np.fft.ifft2(np.fft.ifftshift(spectrum))


def lowpass_mask(shape: tuple[int, int], spec: LowPassSpec) -> np.ndarray:
    spec.check(shape)
    m, n = shape
    u = np.abs(np.arange(m) - m // 2)[:, None]
    v = np.abs(np.arange(n) - n // 2)[None, :]
    return (2 * u <= spec.width) & (2 * v <= spec.height)


def lowpass(spectrum: np.ndarray, spec: LowPassSpec) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    return np.where(lowpass_mask(spectrum.shape, spec), spectrum, 0)


def extract_low_frequency(image: np.ndarray, fraction: float) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    spec = LowPassSpec.from_fraction(image.shape, fraction)
    out = idft2(lowpass(dft2(image), spec))
    norm = np.linalg.norm(image)
    residue = np.abs(out.imag).max()
    assert residue <= 1e-9 * max(norm, 1.0), f"imaginary residue {residue:.3e} after low-pass"
    return out.real


def low_frequency_torch(images: torch.Tensor, fraction: float) -> torch.Tensor:
    """Batched :func:`extract_low_frequency` over the last two axes, for use inside the model."""
    shape = tuple(images.shape[-2:])
    mask = lowpass_mask(shape, LowPassSpec.from_fraction(shape, fraction))
    mask = torch.from_numpy(np.fft.ifftshift(mask)).to(images.device)
    spectrum = torch.fft.fft2(images) * mask
    return torch.fft.ifft2(spectrum).real.to(images.dtype)


def unfold_patches(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W) -> (B, H/p, W/p, p*p) non-overlapping row-major patches."""
    b, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} does not tile into {patch_size}-pixel patches")
    x = image.reshape(b, h // patch_size, patch_size, w // patch_size, patch_size)
    return x.permute(0, 1, 3, 2, 4).reshape(b, h // patch_size, w // patch_size, patch_size * patch_size)


class TaskSpecificInput(nn.Module):
    """Low-frequency side branch producing one additive feature map per encoder block."""

    def __init__(self, embed_dim, tsi_dim, patch_size, depth):
        super().__init__()
        self.patch_size = patch_size
        self.reduce = nn.Linear(embed_dim, tsi_dim)
        self.lf_project = nn.Linear(patch_size * patch_size, tsi_dim)
        self.per_block_mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(tsi_dim, tsi_dim), nn.ReLU()) for _ in range(depth)
        )
        self.shared_lift = nn.Linear(tsi_dim, embed_dim)

    def forward(self, lf_image, patch_tokens):
        patches = unfold_patches(lf_image, self.patch_size)
        if patches.shape[1:3] != patch_tokens.shape[1:3]:
            raise ValueError(
                f"low-frequency patch grid {tuple(patches.shape[1:3])} != token grid {tuple(patch_tokens.shape[1:3])}")
        base = self.reduce(patch_tokens) + self.lf_project(patches)
        return [self.shared_lift(mlp(base)) for mlp in self.per_block_mlps]


def tsi_features(lf_image, patch_tokens, params: TaskSpecificInput):
    return params(lf_image, patch_tokens)
