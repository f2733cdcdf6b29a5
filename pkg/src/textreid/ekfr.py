"""Batch-level knowledge aggregation over class tokens (one modality at a time).

Text tokens only borrow from same-identity captions in the batch; image
tokens borrow from every image. Both paths use one shared projection.
"""
from __future__ import annotations

import torch
import torch.nn as nn


class DegenerateInputError(ValueError):
    """A projected class token has zero norm, so its cosine similarity is undefined."""


class EkfrProjection(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateInputError(f"zero-norm {what} projection")
    return x / norm


def cosine_sim(a: torch.Tensor, b: torch.Tensor, proj: EkfrProjection) -> torch.Tensor:
    """Cosine between W_Q a and W_K b."""
    return (_unit(proj.w_q(a), "query") * _unit(proj.w_k(b), "key")).sum(-1)


def similarity_matrix(tokens: torch.Tensor, proj: EkfrProjection) -> torch.Tensor:
    """s[j, i] = cos(W_Q f_j, W_K f_i) for (N, d) tokens."""
    q = _unit(proj.w_q(tokens), "query")
    k = _unit(proj.w_k(tokens), "key")
    return q @ k.T


def _aggregate(tokens: torch.Tensor, alpha: torch.Tensor, proj: EkfrProjection) -> torch.Tensor:
    off_diag = 1.0 - torch.eye(len(tokens), dtype=alpha.dtype, device=alpha.device)
    return (alpha * off_diag) @ proj.w_v(tokens) + tokens


def text_weights(sim: torch.Tensor, labels: torch.Tensor, renormalize: bool = False) -> torch.Tensor:
    same = labels[:, None] == labels[None, :]
    if renormalize:
        return sim.masked_fill(~same, float("-inf")).softmax(dim=1)
    # softmax over the whole batch, then zero other identities (no renormalization)
    return sim.softmax(dim=1) * same.to(sim.dtype)


def ekfr_text(
    tokens: torch.Tensor,
    labels: torch.Tensor,
    proj: EkfrProjection,
    renormalize: bool = False,
    return_weights: bool = False,
):
    """f'_j = sum_{i != j} alpha_ji W_V f_i + f_j with identity-masked alpha."""
    if tokens.dim() != 2 or len(tokens) != len(labels):
        raise ValueError("expected (N, d) tokens and N labels")
    alpha = text_weights(similarity_matrix(tokens, proj), labels, renormalize)
    out = _aggregate(tokens, alpha, proj)
    return (out, alpha) if return_weights else out


def ekfr_image(tokens: torch.Tensor, proj: EkfrProjection, return_weights: bool = False):
    """Same aggregation as :func:`ekfr_text` but over every image in the batch."""
    if tokens.dim() != 2:
        raise ValueError("expected (N, d) tokens")
    if len(tokens) < 2:
        raise ValueError("image aggregation needs at least 2 samples")
    alpha = similarity_matrix(tokens, proj).softmax(dim=1)
    out = _aggregate(tokens, alpha, proj)
    return (out, alpha) if return_weights else out
