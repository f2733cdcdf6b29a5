"""Training objectives.

CMPM: for each image i, p_i = softmax_j(x_i . z_j/|z_j|) over the batch texts;
target q_ij = 1[y_i == y_j] / sum_k 1[y_i == y_k]; loss = mean_i KL(p_i || q_i).
The text direction swaps roles. CMPC: cross-entropy of a norm-softmax
classifier on each embedding projected onto its partner's unit direction.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ekfr import DegenerateInputError
from .encoders import masked_mean


class NormClassifier(nn.Module):
    """C x d weight used with unit-normalized rows (no bias)."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num_classes, dim) * 0.02)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ F.normalize(self.weight, dim=1).T


def _unit(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateInputError("zero-norm embedding in cross-modal loss")
    return x / norm


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")


def _matching_kl(x: torch.Tensor, z: torch.Tensor, target: torch.Tensor, eps: float) -> torch.Tensor:
    logits = x @ _unit(z).T
    log_p = logits.log_softmax(dim=1)
    # target smoothed by eps and renormalized so the KL stays >= 0
    q = (target + eps) / (1.0 + eps * target.shape[1])
    return (log_p.exp() * (log_p - q.log())).sum(dim=1).mean()


def cmpm_loss(img: torch.Tensor, txt: torch.Tensor, labels: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Image->text plus text->image matching KL."""
    same = (labels[:, None] == labels[None, :]).to(img.dtype)
    target = same / same.sum(dim=1, keepdim=True)
    return _matching_kl(img, txt, target, eps) + _matching_kl(txt, img, target, eps)


def cmpc_loss(img: torch.Tensor, txt: torch.Tensor, labels: torch.Tensor, classifier: NormClassifier) -> torch.Tensor:
    _check_labels(labels, classifier.num_classes)
    img_u, txt_u = _unit(img), _unit(txt)
    img_proj = (img * txt_u).sum(1, keepdim=True) * txt_u
    txt_proj = (txt * img_u).sum(1, keepdim=True) * img_u
    return F.cross_entropy(classifier(img_proj), labels) + F.cross_entropy(classifier(txt_proj), labels)


def cross_modal_loss(img, txt, labels, classifier: NormClassifier, eps: float = 1e-8) -> torch.Tensor:
    """CMPM + CMPC, both directions."""
    return cmpm_loss(img, txt, labels, eps) + cmpc_loss(img, txt, labels, classifier)


def id_loss(img_tokens: torch.Tensor, txt_tokens: torch.Tensor, labels: torch.Tensor, classifier: nn.Linear) -> torch.Tensor:
    """Summed (not averaged) cross-entropy over the batch, image term plus text term."""
    _check_labels(labels, classifier.out_features)
    return (F.cross_entropy(classifier(img_tokens), labels, reduction="sum")
            + F.cross_entropy(classifier(txt_tokens), labels, reduction="sum"))


def l2_consistency_loss(shared_vt: torch.Tensor, shared_tv: torch.Tensor, text_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over the batch of |avgpool(shared_vt) - avgpool(shared_tv)|_2.

    ``shared_vt`` has text-length rows, so padding is skipped when pooling it.
    """
    a = masked_mean(shared_vt, text_mask)
    b = shared_tv.mean(dim=1)
    if a.shape != b.shape:
        raise ValueError(f"pooled shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.linalg.vector_norm(a - b, dim=1).sum()


@dataclass
class LossBreakdown:
    cm1: torch.Tensor | float = 0.0
    cm2: torch.Tensor | float = 0.0
    id1: torch.Tensor | float = 0.0
    id2: torch.Tensor | float = 0.0
    l2: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            # plain floats must not round-trip through a float32 tensor
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


def total_loss(parts: LossBreakdown, lambda1: float = 1.8, lambda2: float = 0.2):
    """(cm1 + cm2) + lambda1 (id1 + id2) + lambda2 l2."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    return (parts.cm1 + parts.cm2) + lambda1 * (parts.id1 + parts.id2) + lambda2 * parts.l2
