"""Joint-loss training loop, LR schedule and the on-disk checkpoint format.

Checkpoint directory layout::

    manifest.json   parameter table (name, shape, dtype, byte offset), config,
                    epoch, seed, RNG states, class count
    params.bin      little-endian float32 arrays concatenated in table order
    vocab.txt       one token per line, line number = id
"""
from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import OptimConfig, TrainConfig
from .data import RetrievalSplit, pk_sample
from .encoders import Vocab
from .losses import LossBreakdown
from .model import RetrievalModel, build_model

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, parts: dict[str, float]):
        self.parts = parts
        detail = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        super().__init__(f"non-finite training loss: {detail}")


class CheckpointError(ValueError):
    pass


def lr_at(step: int, epoch: int, cfg: OptimConfig, group: str, steps_per_epoch: int = 1) -> float:
    """Linear warmup from ``warmup_start * base`` over the warmup epochs, then step decay."""
    if group == "encoders":
        base = cfg.lr_encoders
    elif group == "other":
        base = cfg.lr_other
    else:
        raise ValueError(f"unknown parameter group {group!r}")
    if epoch < cfg.warmup_epochs:
        frac = (epoch * steps_per_epoch + step) / (cfg.warmup_epochs * steps_per_epoch)
        return base * (cfg.warmup_start + (1.0 - cfg.warmup_start) * frac)
    passed = sum(epoch >= e for e in cfg.decay_epochs)
    return base * cfg.decay_factor**passed


def make_optimizer(model: RetrievalModel, cfg: OptimConfig) -> torch.optim.Adam:
    enc, other = model.param_groups()
    groups = [
        {"params": enc, "lr": cfg.lr_encoders, "name": "encoders"},
        {"params": other, "lr": cfg.lr_other, "name": "other"},
    ]
    return torch.optim.Adam(groups, betas=(cfg.beta1, cfg.beta2), weight_decay=0.0)


def set_lrs(optimizer: torch.optim.Optimizer, step: int, epoch: int, cfg: OptimConfig, steps_per_epoch: int) -> dict[str, float]:
    lrs = {}
    for g in optimizer.param_groups:
        g["lr"] = lrs[g["name"]] = lr_at(step, epoch, cfg, g["name"], steps_per_epoch)
    return lrs


def train_step(model: RetrievalModel, optimizer: torch.optim.Optimizer, images, token_ids, labels) -> LossBreakdown:
    """One forward, one backward of the weighted total, one optimizer update."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    parts = model(images, token_ids, labels)
    values = parts.as_floats()
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError(values)
    parts.total.backward()
    optimizer.step()
    return LossBreakdown(**values)


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    config: dict
    vocab: list[str]
    num_classes: int
    epoch: int = 0
    seed: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: RetrievalModel, cfg: TrainConfig, vocab: Vocab, epoch: int, rng_state=None):
        params = OrderedDict(
            (k, v.detach().cpu().to(torch.float32).numpy().copy()) for k, v in model.state_dict().items()
        )
        return cls(params, cfg.to_dict(), list(vocab.tokens), model.num_classes, epoch,
                   cfg.train.seed, rng_state or {})

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def build_model(self, dtype=torch.float32) -> RetrievalModel:
        model = build_model(self.train_config(), self.num_classes)
        self.load_into(model)
        return model.to(dtype)

    def load_into(self, model: RetrievalModel) -> None:
        own = model.state_dict()
        missing = sorted(set(own) - set(self.params))
        unexpected = sorted(set(self.params) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"checkpoint does not fit model: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for k, v in self.params.items():
            if tuple(own[k].shape) != v.shape:
                raise CheckpointError(f"shape mismatch for {k}: checkpoint {v.shape}, model {tuple(own[k].shape)}")
        model.load_state_dict({k: torch.from_numpy(v) for k, v in self.params.items()})

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        table, offset = [], 0
        with open(directory / "params.bin", "wb") as f:
            for name, arr in self.params.items():
                raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
                table.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
                f.write(raw)
                offset += len(raw)
        manifest = {
            "format": FORMAT_VERSION,
            "params": table,
            "config": self.config,
            "epoch": self.epoch,
            "seed": self.seed,
            "num_classes": self.num_classes,
            "rng_state": self.rng_state,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        Vocab(self.vocab).save(directory / "vocab.txt")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        try:
            manifest = json.loads((directory / "manifest.json").read_text())
            blob = (directory / "params.bin").read_bytes()
            vocab = Vocab.load(directory / "vocab.txt")
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"cannot read checkpoint {directory}: {e}") from None
        if manifest.get("format") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
        params = OrderedDict()
        for entry in manifest["params"]:
            n = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + 4 * n
            if end > len(blob):
                raise CheckpointError(f"params.bin is truncated at {entry['name']}")
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"])
            params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        return cls(params, manifest["config"], vocab.tokens, manifest["num_classes"],
                   manifest["epoch"], manifest["seed"], manifest.get("rng_state", {}))


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state().numpy().tobytes().hex()}


def materialize(split: RetrievalSplit, batch, rng: np.random.Generator | None = None, flip: bool = False, dtype=torch.float32):
    images = split.images[batch.image_idx]
    if flip and rng is not None:
        mask = rng.random(len(images)) < 0.5
        images = images.copy()
        images[mask] = images[mask, :, ::-1]
    return (
        torch.as_tensor(images, dtype=dtype),
        torch.as_tensor(split.tokens[batch.caption_idx]),
        torch.as_tensor(batch.labels),
    )


def train(
    split: RetrievalSplit,
    cfg: TrainConfig,
    vocab: Vocab,
    out_dir: str | Path | None = None,
    history: list | None = None,
    on_epoch_end: Callable[[int, RetrievalModel], None] | None = None,
) -> Checkpoint:
    """Run ``cfg.train.epochs`` epochs of PK-sampled joint updates; deterministic given the seed."""
    cfg.validate()
    t = cfg.train
    torch.manual_seed(t.seed)
    rng = np.random.default_rng(t.seed)
    num_classes = int(split.caption_labels.max()) + 1
    cfg.model.vocab_size = len(vocab)
    model = build_model(cfg, num_classes)
    optimizer = make_optimizer(model, t)
    spe = t.steps_per_epoch or math.ceil(len(split) / t.batch_size)
    out = Path(out_dir) if out_dir else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")
    global_step = 0
    try:
        for epoch in range(t.epochs):
            for step in range(spe):
                lrs = set_lrs(optimizer, step, epoch, t, spe)
                batch = pk_sample(split.caption_labels, t.P, t.K, rng, split.caption_image)
                images, tokens, labels = materialize(split, batch, rng, t.flip)
                parts = train_step(model, optimizer, images, tokens, labels)
                entry = {"step": global_step, "epoch": epoch,
                         **{f"lr_{k}": v for k, v in lrs.items()}, **parts.as_floats()}
                if history is not None:
                    history.append(entry)
                if log_file is not None and global_step % t.log_every == 0:
                    log_file.write(json.dumps(entry) + "\n")
                global_step += 1
            if on_epoch_end is not None:
                on_epoch_end(epoch, model)
            if out is not None and t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0 and epoch + 1 < t.epochs:
                Checkpoint.from_model(model, cfg, vocab, epoch + 1, _rng_state(rng)).save(
                    out / "checkpoints" / f"epoch_{epoch + 1:04d}")
    finally:
        if log_file is not None:
            log_file.close()
    ckpt = Checkpoint.from_model(model, cfg, vocab, t.epochs, _rng_state(rng))
    if out is not None:
        ckpt.save(out / "final")
    return ckpt
