"""Toy referring-segmentation model and the training losses.

The model is the smallest architecture in which the referring embedding
provably influences every pixel: two stride-2 conv blocks, fusion by
broadcast-concatenating the embedding to every spatial cell followed by a
1x1 conv, and two transposed-conv blocks back to full resolution with a
single logit per pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .lrb import PromptBank, enhance
from .text import TextEncoder, tokenize


@dataclass
class LossConfig:
    weak_weight: float = 1.0  # lambda in the mixed objective

    def __post_init__(self):
        if not math.isfinite(self.weak_weight) or self.weak_weight < 0:
            raise ConfigError("weak_weight must be finite and >= 0")


class RefSegModel(torch.nn.Module):
    """f(image, referring embedding) -> per-pixel logits, same H x W."""

    def __init__(self, ref_dim: int = 32, channels: tuple[int, int] = (8, 16),
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c1, c2 = channels
        self.ref_dim = ref_dim
        self.enc1 = torch.nn.Conv2d(3, c1, 3, stride=2, padding=1).double()
        self.enc2 = torch.nn.Conv2d(c1, c2, 3, stride=2, padding=1).double()
        self.fuse = torch.nn.Conv2d(c2 + ref_dim, c2, 1).double()
        self.dec1 = torch.nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1).double()
        self.dec2 = torch.nn.ConvTranspose2d(c1, 1, 4, stride=2, padding=1).double()
        with torch.no_grad():
            for _, p in sorted(self.named_parameters()):
                fan_in = p.shape[1:].numel() if p.dim() > 1 else p.shape[0]
                std = 1.0 / math.sqrt(max(1, fan_in))
                p.copy_(torch.from_numpy(rng.normal(0.0, std, tuple(p.shape))))

    def forward_batch(self, images: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W) float64 images + (B,ref_dim) embeddings -> (B,H,W) logits."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ConfigError(f"expected images of shape (B,3,H,W), got {tuple(images.shape)}")
        if refs.dim() != 2 or refs.shape[1] != self.ref_dim:
            raise ConfigError(f"expected refs of shape (B,{self.ref_dim}), got {tuple(refs.shape)}")
        b, _, h, w = images.shape
        x = F.relu(self.enc1(images))
        x = F.relu(self.enc2(x))
        tiled = refs[:, :, None, None].expand(b, self.ref_dim, x.shape[2], x.shape[3])
        x = F.relu(self.fuse(torch.cat([x, tiled], dim=1)))
        x = F.relu(self.dec1(x))
        logits = self.dec2(x)[:, 0]
        # Transposed convs restore 4*ceil(ceil(H/2)/2); crop for sizes not divisible by 4.
        return logits[:, :h, :w]


def forward(model: RefSegModel, image, ref: torch.Tensor) -> torch.Tensor:
    """Single-sample forward; accepts an H x W x 3 array or a 3 x H x W tensor."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ConfigError(f"expected an HxWx3 image, got shape {image.shape}")
        image = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    return model.forward_batch(image.unsqueeze(0), ref.unsqueeze(0))[0]


def seg_loss(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy on logits."""
    if logits.shape != mask.shape:
        raise ConfigError(f"logits/mask shape mismatch: {tuple(logits.shape)} vs {tuple(mask.shape)}")
    return F.binary_cross_entropy_with_logits(logits, mask.to(torch.float64))


def mixed_loss(batch: list, model: RefSegModel, encoder: TextEncoder,
               bank: PromptBank | None, weak_weight: float,
               vocab=None, token_len: int = 16) -> torch.Tensor:
    """Joint objective: mean accurate loss + lambda * mean weak loss.

    `batch` holds prepared items (see `prepare_item`); weak items use
    prompt-enhanced embeddings when a bank is given, plain encoding
    otherwise. An empty side contributes zero and skips its normalizer.
    """
    accurate = [it for it in batch if not it["weak"]]
    weak = [it for it in batch if it["weak"]]
    if not accurate and not weak:
        raise ConfigError("mixed loss needs at least one sample")
    total = torch.zeros((), dtype=torch.float64)
    if accurate:
        total = total + _side_loss(accurate, model, encoder, None)
    if weak and weak_weight != 0.0:
        total = total + weak_weight * _side_loss(weak, model, encoder, bank)
    return total


def _side_loss(items: list, model: RefSegModel, encoder: TextEncoder,
               bank: PromptBank | None) -> torch.Tensor:
    images = torch.stack([it["image"] for it in items])
    masks = torch.stack([it["mask"] for it in items])
    if bank is None:
        x = []
        a = []
        for it in items:
            seq = encoder.embed(it["ids"], it["attn"])
            x.append(seq.x)
            a.append(torch.from_numpy(np.ascontiguousarray(it["attn"], dtype=np.int64)))
        refs = encoder.encode_batch(torch.stack(x), torch.stack(a))
    else:
        refs = torch.stack([
            enhance(encoder.embed(it["ids"], it["attn"]), bank.row(it["sample_id"]), encoder)
            for it in items
        ])
    logits = model.forward_batch(images, refs)
    return F.binary_cross_entropy_with_logits(logits, masks)


def prepare_item(sample, vocab, token_len: int) -> dict:
    """Precompute the tensors the loss and trainer consume for one sample."""
    ids, attn = tokenize(sample.expression, vocab, token_len)
    return {
        "sample_id": sample.sample_id,
        "image": torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1))),
        "mask": torch.from_numpy(sample.mask.astype(np.float64)),
        "ids": ids,
        "attn": attn,
        "weak": sample.annotation_kind == "weak",
        "category": sample.category,
    }
