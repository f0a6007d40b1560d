"""Tokenization, token embedding, and the toy text encoder.

The encoder is the smallest stack where padded slots are semantically
consequential: an embedding table, sinusoidal positions, one masked
single-head self-attention layer, masked mean-pooling, and a linear map to
the referring-embedding dimension. Positional encodings are applied inside
`encode` to every attended slot, so prompt rows injected into padding slots
pick up their slot's position without the injection op having to know about
positions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]

    def __post_init__(self):
        ids = list(self.token_to_id.values())
        if len(set(ids)) != len(ids):
            raise ConfigError("vocabulary mapping must be injective")
        if self.token_to_id.get(SPECIAL_TOKENS[PAD]) != PAD:
            raise ConfigError("PAD token must map to index 0")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    @classmethod
    def build(cls, expressions: list[str], extra_tokens: tuple[str, ...] = ()) -> "Vocabulary":
        tokens: set[str] = set()
        for text in expressions:
            tokens.update(text.lower().split())
        tokens.update(t.lower() for t in extra_tokens)
        mapping = {tok: i for i, tok in enumerate(SPECIAL_TOKENS)}
        for i, tok in enumerate(sorted(tokens)):
            mapping[tok] = len(SPECIAL_TOKENS) + i
        return cls(mapping)

    def save(self, path: Path) -> None:
        Path(path).write_text(
            json.dumps(self.token_to_id, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        try:
            return cls(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot load vocabulary from {path}: {exc}") from exc


@dataclass
class TokenSequence:
    """Embedded tokens plus the attention mask; rows with attn==0 are zero."""

    x: torch.Tensor  # L x d, float64
    attn: np.ndarray  # length L, {0,1}


def tokenize(expression: str, vocab: Vocabulary, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower-cased whitespace tokens with BOS/EOS framing and right padding."""
    if length < 3:
        raise ConfigError("token length must be >= 3")
    if not expression or not expression.strip():
        raise ConfigError("expressions must be nonempty")
    words = expression.lower().split()[: length - 2]
    ids = [BOS] + [vocab.lookup(w) for w in words] + [EOS]
    attn = np.zeros(length, dtype=np.int8)
    attn[: len(ids)] = 1
    out = np.full(length, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out, attn


@lru_cache(maxsize=8)
def _positions(length: int, dim: int) -> torch.Tensor:
    pos = np.zeros((length, dim), dtype=np.float64)
    idx = np.arange(length)[:, None]
    div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
    pos[:, 0::2] = np.sin(idx * div)
    pos[:, 1::2] = np.cos(idx * div[: dim // 2])
    return torch.from_numpy(pos)


class TextEncoder(torch.nn.Module):
    """Embedding table + one masked self-attention layer + pooled projection."""

    def __init__(self, vocab_size: int, dim: int = 32, out_dim: int = 32,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = 1.0 / math.sqrt(dim)

        def par(shape, std):
            return torch.nn.Parameter(torch.from_numpy(rng.normal(0.0, std, shape)))

        self.dim = dim
        self.out_dim = out_dim
        self.emb = par((vocab_size, dim), 0.5)
        self.wq = par((dim, dim), scale)
        self.wk = par((dim, dim), scale)
        self.wv = par((dim, dim), scale)
        self.wo = par((dim, out_dim), scale)
        self.bo = torch.nn.Parameter(torch.zeros(out_dim, dtype=torch.float64))

    def embed(self, ids: np.ndarray, attn: np.ndarray) -> TokenSequence:
        """Content embeddings; padded rows are exact zero vectors."""
        if np.any(ids < 0) or np.any(ids >= self.emb.shape[0]):
            raise ConfigError("token id out of vocabulary range")
        idx = torch.from_numpy(np.ascontiguousarray(ids, dtype=np.int64))
        mask = torch.from_numpy(np.ascontiguousarray(attn, dtype=np.float64)).unsqueeze(-1)
        return TokenSequence(x=self.emb[idx] * mask, attn=np.asarray(attn, dtype=np.int8))

    def encode_batch(self, x: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
        """Referring embeddings for a batch: (B,L,d), (B,L) -> (B,out_dim).

        Attention logits at masked key positions are -inf, so masked slots
        contribute exactly zero; pooling averages only attended slots.
        """
        if attn.dim() != 2 or x.shape[:2] != attn.shape:
            raise ConfigError("encode: x and attn shapes disagree")
        counts = attn.sum(dim=1)
        if torch.any(counts == 0):
            raise ConfigError("encode requires at least one attended position")
        length = x.shape[1]
        a = attn.to(torch.float64)
        xp = x + a.unsqueeze(-1) * _positions(length, self.dim).unsqueeze(0)
        q = xp @ self.wq
        k = xp @ self.wk
        v = xp @ self.wv
        logits = (q @ k.transpose(1, 2)) / math.sqrt(self.dim)
        logits = logits.masked_fill(attn.unsqueeze(1) == 0, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        heads = weights @ v
        pooled = (heads * a.unsqueeze(-1)).sum(dim=1) / counts.to(torch.float64).unsqueeze(-1)
        return pooled @ self.wo + self.bo

    def encode(self, seq: TokenSequence) -> torch.Tensor:
        attn = torch.from_numpy(np.ascontiguousarray(seq.attn, dtype=np.int64))
        return self.encode_batch(seq.x.unsqueeze(0), attn.unsqueeze(0))[0]


def embed(ids: np.ndarray, attn: np.ndarray, encoder: TextEncoder) -> TokenSequence:
    return encoder.embed(ids, attn)


def encode(seq: TokenSequence, encoder: TextEncoder) -> torch.Tensor:
    return encoder.encode(seq)
