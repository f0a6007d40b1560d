"""Learnable reference bank: per-sample prompt rows injected into padding slots.

The bank holds one trainable p x d prompt matrix per weak sample. `fill`
writes the k-th prompt row into the k-th smallest padding position and flips
the attention bit there; everything else is copied verbatim, so the op is an
identity on non-padding content and has identity Jacobian blocks at filled
positions. Calibration runs plain gradient descent on the selected rows
against a frozen model and encoder.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, WrelError
from .params import load_blob, rng_for, save_blob
from .text import TextEncoder, TokenSequence, tokenize


class PromptSlotsUnused(Warning):
    """Raised as a warning when a sequence has fewer padding slots than prompt rows."""

    def __init__(self, sample_slots: int, prompt_rows: int):
        super().__init__(
            f"only {sample_slots} padding slots available for {prompt_rows} prompt rows; "
            f"rows beyond {sample_slots} are unused")
        self.sample_slots = sample_slots
        self.prompt_rows = prompt_rows


@dataclass
class FillResult:
    x: torch.Tensor  # L x d
    attn: np.ndarray  # length L
    filled_positions: list[int]

    def as_sequence(self) -> TokenSequence:
        return TokenSequence(x=self.x, attn=self.attn)


def padding_set(attn: np.ndarray) -> list[int]:
    """Indices with attention 0, ascending."""
    return [int(i) for i in np.flatnonzero(np.asarray(attn) == 0)]


def fill(seq: TokenSequence, prompt: torch.Tensor) -> FillResult:
    """Inject prompt rows into the padding slots of a sequence.

    Writes min(p, |padding set|) rows; surplus padding stays untouched and
    surplus prompt rows trigger a structured warning.
    """
    omega = padding_set(seq.attn)
    p = int(prompt.shape[0])
    m = min(p, len(omega))
    if len(omega) < p:
        warnings.warn(PromptSlotsUnused(len(omega), p), stacklevel=2)
    x = seq.x.clone()
    attn = np.array(seq.attn, dtype=np.int8, copy=True)
    positions = omega[:m]
    if m:
        idx = torch.tensor(positions, dtype=torch.int64)
        x = torch.index_put(x, (idx,), prompt[:m])
        attn[positions] = 1
    return FillResult(x=x, attn=attn, filled_positions=positions)


def enhance(seq: TokenSequence, prompt: torch.Tensor, encoder: TextEncoder) -> torch.Tensor:
    """Referring embedding of the prompt-injected sequence."""
    return encoder.encode(fill(seq, prompt).as_sequence())


class PromptBank:
    """Trainable prompt matrix with a sample-id -> row index."""

    def __init__(self, prompts: torch.Tensor, index: dict[str, int]):
        if prompts.dim() != 3:
            raise ConfigError("prompt tensor must be N x p x d")
        if sorted(index.values()) != list(range(prompts.shape[0])):
            raise ConfigError("bank index must cover rows 0..N-1 exactly once")
        self.prompts = prompts.detach().clone()
        self.index = dict(index)

    @property
    def n_rows(self) -> int:
        return int(self.prompts.shape[0])

    @property
    def prompt_tokens(self) -> int:
        return int(self.prompts.shape[1])

    def row(self, sample_id: str) -> torch.Tensor:
        return self.prompts[self.row_index(sample_id)]

    def row_index(self, sample_id: str) -> int:
        if sample_id not in self.index:
            raise WrelError(f"sample {sample_id!r} has no bank row")
        return self.index[sample_id]

    def checksum_rows(self) -> list[str]:
        """Per-row content fingerprints, for isolation checks."""
        import hashlib

        flat = self.prompts.detach().numpy().reshape(self.n_rows, -1)
        return [hashlib.sha256(row.tobytes()).hexdigest() for row in flat]

    @classmethod
    def build(cls, weak_samples: list, vocab, token_len: int, prompt_tokens: int,
              dim: int, seed: int, init_std: float = 0.02) -> "PromptBank":
        """One Gaussian-initialized row per weak sample.

        Validates that every weak expression leaves at least `prompt_tokens`
        padding slots at the configured sequence length.
        """
        if prompt_tokens < 1:
            raise ConfigError("prompt_tokens must be >= 1")
        max_tokens = 0
        for s in weak_samples:
            max_tokens = max(max_tokens, len(s.expression.lower().split()))
        if prompt_tokens > token_len - (max_tokens + 2):
            raise ConfigError(
                f"prompt_tokens={prompt_tokens} exceeds the "
                f"{token_len - (max_tokens + 2)} padding slots left by the longest "
                f"weak expression ({max_tokens} tokens) at length {token_len}")
        rng = rng_for(seed, "prompt-bank-init")
        prompts = torch.from_numpy(
            rng.normal(0.0, init_std, (len(weak_samples), prompt_tokens, dim)))
        index = {s.sample_id: i for i, s in enumerate(weak_samples)}
        return cls(prompts, index)

    def save(self, path_stem: Path, dtype: str = "float32") -> None:
        save_blob(Path(path_stem), {"prompts": self.prompts.numpy()}, dtype=dtype,
                  extra={"index": self.index})

    @classmethod
    def load(cls, path_stem: Path) -> "PromptBank":
        arrays, extra = load_blob(Path(path_stem))
        index = {k: int(v) for k, v in extra["index"].items()}
        return cls(torch.from_numpy(arrays["prompts"].astype(np.float64)), index)


def calibrate(bank: PromptBank, batch: list[tuple[str, torch.Tensor, torch.Tensor, np.ndarray, np.ndarray]],
              model, encoder: TextEncoder, steps: int, lr: float) -> np.ndarray:
    """K gradient-descent steps on the bank rows of a weak batch.

    `batch` items are (sample_id, image 3xHxW, mask HxW, token ids, attn).
    Each row's update uses its own sample loss (summed batch loss keeps the
    per-row gradients independent). Model and encoder parameters are read
    only. Returns the per-sample mean pixel loss measured before the first
    update of this call.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    rows_idx = [bank.row_index(sid) for sid, *_ in batch]
    images = torch.stack([item[1] for item in batch])
    masks = torch.stack([item[2] for item in batch])
    with torch.no_grad():
        losses = _weak_losses(bank.prompts[rows_idx], batch, images, masks, model, encoder)
        initial = losses.numpy().copy()
    if steps == 0:
        return initial
    rows = bank.prompts[rows_idx].clone()
    for _ in range(steps):
        leaf = rows.detach().requires_grad_(True)
        loss = _weak_losses(leaf, batch, images, masks, model, encoder).sum()
        (grad,) = torch.autograd.grad(loss, leaf)
        rows = (leaf - lr * grad).detach()
    with torch.no_grad():
        bank.prompts[rows_idx] = rows
    return initial


def _weak_losses(rows: torch.Tensor, batch, images, masks, model, encoder) -> torch.Tensor:
    filled_x = []
    filled_a = []
    for i, (_, _, _, ids, attn) in enumerate(batch):
        seq = encoder.embed(ids, attn)
        fr = fill(seq, rows[i])
        filled_x.append(fr.x)
        filled_a.append(torch.from_numpy(np.ascontiguousarray(fr.attn, dtype=np.int64)))
    refs = encoder.encode_batch(torch.stack(filled_x), torch.stack(filled_a))
    logits = model.forward_batch(images, refs)
    per_pixel = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, masks, reduction="none")
    return per_pixel.mean(dim=(1, 2))


def stage2_metadata(bank: PromptBank) -> dict:
    return {"rows": bank.n_rows, "prompt_tokens": bank.prompt_tokens,
            "dim": int(bank.prompts.shape[2])}


def save_bank_json_index(bank: PromptBank, path: Path) -> None:
    Path(path).write_text(json.dumps(bank.index, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def prepare_weak_item(sample, vocab, token_len: int
                      ) -> tuple[str, torch.Tensor, torch.Tensor, np.ndarray, np.ndarray]:
    """Pack a weak sample into the tuple layout `calibrate` consumes."""
    ids, attn = tokenize(sample.expression, vocab, token_len)
    image = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1)))
    mask = torch.from_numpy(sample.mask.astype(np.float64))
    return sample.sample_id, image, mask, ids, attn
