"""Full segmentation model: encoder + low-frequency branch + classwise decoder, with its freeze policy."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .decoder import ClasswiseDecoder
from .encoder import ImageEncoder
from .frequency import TaskSpecificInput, low_frequency_torch

# Decoder parameters stay trainable as a whole; the encoder backbone (patch/pos embedding,
# attention, MLP, neck) is frozen.
TRAINABLE_PREFIXES = ("tsi.", "decoder.")


def is_trainable(name: str) -> bool:
    return name.startswith(TRAINABLE_PREFIXES) or ".adapter_" in name


class SegmentationModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg)
        self.tsi = (TaskSpecificInput(cfg.embed_dim, cfg.tsi_dim, cfg.patch_size, cfg.depth)
                    if cfg.tsi_enabled else None)
        self.decoder = ClasswiseDecoder(cfg)

    def embed(self, image):
        """(B, H, W) image -> (B, neck_dim, G, G) embedding."""
        tokens = self.encoder.patch_embed(image)
        tsi = None
        if self.tsi is not None:
            lf = low_frequency_torch(image, self.cfg.lpf_fraction)
            tsi = self.tsi(lf, tokens)
        return self.encoder(image, tsi, tokens=tokens)

    def forward(self, image, slots=(0,)):
        """Class logits at mask resolution, shape (B, len(slots), K, 4G, 4G)."""
        return self.decoder(self.embed(image), slots=slots)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float64, device=None):
    """Initialize a model from a seed; returns (model, freeze_mask).

    Parameters outside the freeze mask's trainable set get ``requires_grad=False``.
    """
    cfg.validate()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = SegmentationModel(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    model = model.to(dtype=dtype, device=device)
    mask = freeze_mask(model)
    apply_freeze_mask(model, mask)
    return model, mask


def freeze_mask(model: nn.Module) -> dict[str, bool]:
    return {name: is_trainable(name) for name, _ in model.named_parameters()}


def apply_freeze_mask(model: nn.Module, mask: dict[str, bool]) -> None:
    for name, p in model.named_parameters():
        p.requires_grad_(mask[name])


def count_parameters(model: nn.Module, mask=None) -> tuple[int, int]:
    """Exact (total, trainable) element counts."""
    mask = mask if mask is not None else freeze_mask(model)
    total = trainable = 0
    for name, p in model.named_parameters():
        total += p.numel()
        if mask[name]:
            trainable += p.numel()
    return total, trainable


def resize_logits(logits, size):
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


@torch.no_grad()
def predict(model: SegmentationModel, image):
    """Slot-0 logits upsampled to image resolution and the argmax label map.

    ``image`` is (H, W) or (B, H, W); ties resolve to the lowest class index.
    """
    single = image.ndim == 2
    if single:
        image = image.unsqueeze(0)
    logits = model(image)[:, 0]
    logits = resize_logits(logits, tuple(image.shape[-2:]))
    labels = logits.argmax(dim=1)
    if single:
        return logits[0], labels[0]
    return logits, labels
