"""Image and text token encoders.

Every encoder maps a batch to features of shape ``(B, L, d)``: one row per
token, the class token at row 0, content tokens after it. Downstream code
(PFM, EKFR, losses) only relies on that contract, so a pretrained ViT/BERT
can replace the toy transformers here as long as its ``forward`` returns
the same layout (text encoders also take the padding mask).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

UNK_ID = 0
PAD_ID = 1
UNK_TOKEN = "<unk>"
PAD_TOKEN = "<pad>"

_WORD = re.compile(r"[a-z0-9]+")


class EmptyInputError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    identity: int = 0


@dataclass
class TextSample:
    token_ids: list[int]
    identity: int = 0

    @property
    def length(self) -> int:
        return sum(1 for t in self.token_ids if t != PAD_ID)


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Vocab:
    """Word-level vocabulary. Ids 0 and 1 are reserved for UNK and PAD."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != [UNK_TOKEN, PAD_TOKEN]:
            raise ValueError("vocabulary must start with <unk>, <pad>")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = sorted({w for t in texts for w in split_words(t)})
        return cls([UNK_TOKEN, PAD_TOKEN] + words)

    @classmethod
    def from_mapping(cls, mapping: dict[str, int]) -> "Vocab":
        size = max(max(mapping.values()) + 1, 2)
        tokens = [f"<unused{i}>" for i in range(size)]
        tokens[UNK_ID], tokens[PAD_ID] = UNK_TOKEN, PAD_TOKEN
        for word, i in mapping.items():
            tokens[i] = word
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, word: str) -> int:
        return self.index.get(word, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def tokenize(text: str, vocab: Vocab, max_len: int, identity: int = 0) -> TextSample:
    """Lowercase, split into words, map to ids, then truncate/pad to ``max_len``."""
    words = split_words(text)
    if not words:
        raise EmptyInputError("cannot tokenize an empty caption")
    ids = [vocab[w] for w in words[:max_len]]
    ids += [PAD_ID] * (max_len - len(ids))
    return TextSample(ids, identity)


def patchify(pixels, patch_size: int):
    """Split ``(..., H, W, C)`` pixels into ``(..., n, p*p*C)`` patches, row-major."""
    x = torch.as_tensor(pixels)
    *lead, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} is not divisible by patch size {p}")
    x = x.reshape(*lead, h // p, p, w // p, p, c)
    x = x.movedim(-4, -3)  # (..., H/p, W/p, p, p, C)
    return x.reshape(*lead, (h // p) * (w // p), p * p * c)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / (d // h) ** 0.5
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(y)


class TransformerBlock(nn.Module):
    """Pre-norm encoder layer: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int = 1, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        x = x + self.mlp(self.norm2(x))
        return x


class ImageEncoder(nn.Module):
    """Patch embedding + class token + learned positions + transformer layers."""

    def __init__(
        self,
        dim: int,
        image_size: int,
        patch_size: int,
        layers: int = 2,
        heads: int = 1,
        mlp_ratio: int = 4,
        pixel_mean: Sequence[float] = (),
        pixel_std: Sequence[float] = (),
    ):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        self.patch_size = patch_size
        self.num_patches = (image_size // patch_size) ** 2
        self.patch_embed = nn.Linear(patch_size * patch_size * 3, dim)
        self.cls_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, self.num_patches + 1, dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        if pixel_mean:
            self.register_buffer("pixel_mean", torch.tensor(pixel_mean), persistent=False)
            self.register_buffer("pixel_std", torch.tensor(pixel_std), persistent=False)
        else:
            self.pixel_mean = self.pixel_std = None

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``images``: (B, H, W, 3) in [0, 1] -> (B, n+1, d)."""
        if self.pixel_mean is not None:
            images = (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)
        x = self.patch_embed(patchify(images, self.patch_size))
        if x.shape[1] != self.num_patches:
            raise ValueError(f"expected {self.num_patches} patches, got {x.shape[1]}")
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class TextEncoder(nn.Module):
    """Word embedding + class token + learned positions + masked transformer layers."""

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        max_len: int,
        layers: int = 2,
        heads: int = 1,
        mlp_ratio: int = 4,
    ):
        super().__init__()
        self.max_len = max_len
        self.word_embed = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.word_embed.weight, std=0.02)
        self.cls_token = nn.Parameter(torch.randn(1, 1, dim) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, max_len + 1, dim) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``token_ids``: (B, m) -> features (B, m+1, d) and key mask (B, m+1)."""
        b, m = token_ids.shape
        if m > self.max_len:
            raise ValueError(f"sequence length {m} exceeds max_len {self.max_len}")
        mask = token_ids != PAD_ID
        if not bool(mask.any(dim=1).all()):
            raise EmptyInputError("every caption needs at least one non-padding token")
        mask = torch.cat([mask.new_ones(b, 1), mask], dim=1)
        x = self.word_embed(token_ids)
        cls = self.cls_token.expand(b, -1, -1).to(x.dtype)
        x = torch.cat([cls, x], dim=1) + self.pos_embed[:, : m + 1]
        for blk in self.blocks:
            x = blk(x, mask)
        return self.norm(x), mask


def encode_image(encoder: ImageEncoder, image: ImageSample) -> torch.Tensor:
    """Single-image convenience wrapper: (H, W, 3) -> (n+1, d)."""
    dtype = next(encoder.parameters()).dtype
    pixels = torch.as_tensor(image.pixels, dtype=dtype)
    return encoder(pixels[None])[0]


def encode_text(encoder: TextEncoder, text: TextSample) -> torch.Tensor:
    """Single-caption convenience wrapper: ids -> (m+1, d)."""
    if text.length == 0:
        raise EmptyInputError("cannot encode an empty token sequence")
    ids = torch.as_tensor(text.token_ids, dtype=torch.long)
    return encoder(ids[None])[0][0]


def masked_mean(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Average over the token axis of (B, L, d), skipping masked-out rows."""
    if mask is None:
        return x.mean(dim=1)
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=1) / w.sum(dim=1)


__all__ = [
    "EmptyInputError",
    "ImageEncoder",
    "ImageSample",
    "PAD_ID",
    "TextEncoder",
    "TextSample",
    "TransformerBlock",
    "UNK_ID",
    "Vocab",
    "encode_image",
    "encode_text",
    "masked_mean",
    "patchify",
    "split_words",
    "tokenize",
]
