"""Tiny full-model setup shared by the training tests and the acceptance suite."""
from __future__ import annotations

import torch

from textreid.config import TrainConfig, load_config
from textreid.encoders import PAD_ID
from textreid.model import build_model

TINY = [
    "model.dim=8", "model.image_size=16", "model.patch_size=8", "model.max_len=8",
    "model.encoder_layers=1", "model.encoder_heads=2", "model.mlp_ratio=2",
    "model.vocab_size=12",
    "train.batch_size=4", "train.P=2", "train.K=2",
]


def tiny_config(*extra: str) -> TrainConfig:
    return load_config(None, TINY + list(extra))


def tiny_model(*extra: str, seed: int = 0, dtype=torch.float64, num_classes: int = 4):
    torch.manual_seed(seed)
    return build_model(tiny_config(*extra), num_classes).to(dtype)


def tiny_batch(seed: int = 0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(4, 16, 16, 3, generator=g, dtype=dtype)
    tokens = torch.randint(2, 12, (4, 8), generator=g)
    tokens[0, 5:] = PAD_ID
    tokens[3, 3:] = PAD_ID
    labels = torch.tensor([1, 1, 3, 3])
    return images, tokens, labels
