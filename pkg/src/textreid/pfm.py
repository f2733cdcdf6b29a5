"""Progressive feature mining: dual reverse attention, tied refiners, single reverse attention.

Feature tensors are ``(B, L, d)`` with the class token at row 0. Attention
outputs always carry the query's token count, so the image-side shared /
complement features computed with text queries have the text length.

Padded text tokens are excluded as keys: they get zero weight in both the
forward softmax and its complement, which makes each reverse-weight row sum
to (number of valid keys - 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoders import TransformerBlock


class ShapeError(ValueError):
    pass


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 2:
        return x.unsqueeze(0), True
    if x.dim() != 3:
        raise ShapeError(f"expected (L, d) or (B, L, d) features, got shape {tuple(x.shape)}")
    return x, False


class AttentionProjection(nn.Module):
    """Bias-free query/key/value maps, each d x d."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)

    def check(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"feature dim {x.shape[-1]} does not match projection dim {self.dim}")


def attention_weights(
    q: torch.Tensor, k: torch.Tensor, heads: int = 1, key_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_head)) per head -> (B, h, Lq, Lk). Masked keys get weight 0."""
    b, lq, d = q.shape
    lk = k.shape[1]
    dh = d // heads
    qh = q.reshape(b, lq, heads, dh).transpose(1, 2)
    kh = k.reshape(b, lk, heads, dh).transpose(1, 2)
    logits = qh @ kh.transpose(-1, -2) / dh**0.5
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    return logits.softmax(dim=-1)


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int = 1,
    key_mask: torch.Tensor | None = None,
    reverse: bool = False,
) -> torch.Tensor:
    """Weighted sum of value rows; ``reverse`` swaps each weight a_ij for (1 - a_ij)."""
    a = attention_weights(q, k, heads, key_mask)
    if reverse:
        a = 1.0 - a
        if key_mask is not None:
            a = a * key_mask[:, None, None, :].to(a.dtype)
    return _apply(a, v)


def _project_and_attend(f_q, f_kv, proj, key_mask, reverse):
    proj.check(f_q)
    proj.check(f_kv)
    f_q, squeeze = _batched(f_q)
    f_kv, _ = _batched(f_kv)
    if key_mask is not None and key_mask.dim() == 1:
        key_mask = key_mask.unsqueeze(0)
    out = attend(proj.w_q(f_q), proj.w_k(f_kv), proj.w_v(f_kv), proj.heads, key_mask, reverse)
    return out[0] if squeeze else out


def cross_attention(f_q, f_kv, proj: AttentionProjection, key_mask=None) -> torch.Tensor:
    """Queries from ``f_q``, keys and values from ``f_kv``; output has f_q's token count."""
    return _project_and_attend(f_q, f_kv, proj, key_mask, reverse=False)


def reverse_cross_attention(f_q, f_kv, proj: AttentionProjection, key_mask=None) -> torch.Tensor:
    """Like :func:`cross_attention` but with complemented weights (1 - a_ij)."""
    return _project_and_attend(f_q, f_kv, proj, key_mask, reverse=True)


class DualReverseAttention(nn.Module):
    """Stage I. Each modality owns its Q/K/V maps; queries of one side read the other side."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.proj_v = AttentionProjection(dim, heads)
        self.proj_t = AttentionProjection(dim, heads)

    def forward(self, f_v, f_t, text_mask=None):
        """Returns (shared_vt, shared_tv, complement_vt, complement_tv).

        ``*_vt`` use text queries over image values (text length);
        ``*_tv`` use image queries over text values (image length).
        """
        pv, pt = self.proj_v, self.proj_t
        for x in (f_v, f_t):
            pv.check(x)
        h = pv.heads
        q_v, k_v, v_v = pv.w_q(f_v), pv.w_k(f_v), pv.w_v(f_v)
        q_t, k_t, v_t = pt.w_q(f_t), pt.w_k(f_t), pt.w_v(f_t)
        a_vt = attention_weights(q_t, k_v, h)
        a_tv = attention_weights(q_v, k_t, h, text_mask)
        rev_tv = 1.0 - a_tv
        if text_mask is not None:
            rev_tv = rev_tv * text_mask[:, None, None, :].to(rev_tv.dtype)
        shared_vt = _apply(a_vt, v_v)
        shared_tv = _apply(a_tv, v_t)
        comp_vt = _apply(1.0 - a_vt, v_v)
        comp_tv = _apply(rev_tv, v_t)
        return shared_vt, shared_tv, comp_vt, comp_tv


def _apply(a: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    b, h, lq, lk = a.shape
    d = v.shape[-1]
    vh = v.reshape(b, lk, h, d // h).transpose(1, 2)
    return (a @ vh).transpose(1, 2).reshape(b, lq, d)


def dram_forward(f_v, f_t, dram: DualReverseAttention, text_mask=None):
    f_v, squeeze = _batched(f_v)
    f_t, _ = _batched(f_t)
    if text_mask is not None and text_mask.dim() == 1:
        text_mask = text_mask.unsqueeze(0)
    outs = dram(f_v, f_t, text_mask)
    return tuple(o[0] for o in outs) if squeeze else outs


class RefinementEncoder(nn.Module):
    """Position-free transformer layer(s) followed by a d x d output projection.

    One instance serves both modalities (weight tying). Zeroing the output
    projection makes the encoder return exact zeros.
    """

    def __init__(self, dim: int, layers: int = 1, heads: int = 1, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, mlp_ratio) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.out = nn.Linear(dim, dim)

    def zero_output(self) -> None:
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        x, squeeze = _batched(x)
        if key_mask is not None and key_mask.dim() == 1:
            key_mask = key_mask.unsqueeze(0)
        for blk in self.blocks:
            x = blk(x, key_mask)
        y = self.out(self.norm(x))
        return y[0] if squeeze else y


def refine_complement(f_sm, f_s, encoder: RefinementEncoder, key_mask=None) -> torch.Tensor:
    """E(complement) + shared, keeping the shared information."""
    if f_sm.shape != f_s.shape:
        raise ShapeError(f"complement {tuple(f_sm.shape)} and shared {tuple(f_s.shape)} differ")
    return encoder(f_sm, key_mask) + f_s


def refine_original(f, encoder: RefinementEncoder, key_mask=None) -> torch.Tensor:
    """E(F) + F with the same tied encoder used for the complements."""
    return encoder(f, key_mask) + f


def sram_forward(f_c, f_o, proj: AttentionProjection, key_mask=None) -> torch.Tensor:
    """Stage II: queries from F^c, keys/values from F^o, complemented weights."""
    return reverse_cross_attention(f_c, f_o, proj, key_mask)


@dataclass
class PfmOutputs:
    shared_vt: torch.Tensor
    shared_tv: torch.Tensor
    comp_vt: torch.Tensor
    comp_tv: torch.Tensor
    c_v: torch.Tensor
    c_t: torch.Tensor
    o_v: torch.Tensor
    o_t: torch.Tensor
    r_v: torch.Tensor | None = None
    r_t: torch.Tensor | None = None


class PfmBlock(nn.Module):
    """One pass of stage I (+ stage II when ``stages == 2``)."""

    def __init__(self, dim: int, heads: int = 1, refine_layers: int = 1, mlp_ratio: int = 4, stages: int = 2):
        super().__init__()
        if stages not in (1, 2):
            raise ValueError("stages must be 1 or 2")
        self.stages = stages
        self.dram = DualReverseAttention(dim, heads)
        self.refiner = RefinementEncoder(dim, refine_layers, heads, mlp_ratio)
        if stages == 2:
            self.sram_v = AttentionProjection(dim, heads)
            self.sram_t = AttentionProjection(dim, heads)

    def forward(self, f_v, f_t, text_mask=None) -> PfmOutputs:
        s_vt, s_tv, sm_vt, sm_tv = self.dram(f_v, f_t, text_mask)
        # text-length rows: shared_vt, comp_vt, c_v, o_t, r_v
        c_v = refine_complement(sm_vt, s_vt, self.refiner, text_mask)
        c_t = refine_complement(sm_tv, s_tv, self.refiner)
        o_v = refine_original(f_v, self.refiner)
        o_t = refine_original(f_t, self.refiner, text_mask)
        out = PfmOutputs(s_vt, s_tv, sm_vt, sm_tv, c_v, c_t, o_v, o_t)
        if self.stages == 2:
            out.r_v = sram_forward(c_v, o_v, self.sram_v)
            out.r_t = sram_forward(c_t, o_t, self.sram_t, text_mask)
        return out


class ProgressiveFeatureMining(nn.Module):
    """``depth`` stacked passes; F^o of one pass feeds the next."""

    def __init__(self, dim: int, depth: int = 1, **kw):
        super().__init__()
        if depth < 1:
            raise ValueError("PFM depth must be >= 1")
        self.passes = nn.ModuleList(PfmBlock(dim, **kw) for _ in range(depth))

    @property
    def depth(self) -> int:
        return len(self.passes)

    def forward(self, f_v, f_t, text_mask=None) -> list[PfmOutputs]:
        outs = []
        for blk in self.passes:
            o = blk(f_v, f_t, text_mask)
            outs.append(o)
            f_v, f_t = o.o_v, o.o_t
        return outs

    def refine_only(self, f: torch.Tensor, text_mask=None) -> torch.Tensor:
        """Inference path for one modality: chain of E(F) + F over all passes."""
        for blk in self.passes:
            f = refine_original(f, blk.refiner, text_mask)
        return f


def pfm_stack(f_v, f_t, pfm: ProgressiveFeatureMining, depth: int | None = None, text_mask=None):
    if depth is not None and depth != pfm.depth:
        raise ValueError(f"module was built with depth {pfm.depth}, asked for {depth}")
    if depth is not None and depth < 1:
        raise ValueError("PFM depth must be >= 1")
    return pfm(f_v, f_t, text_mask)
