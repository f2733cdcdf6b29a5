"""Full retrieval model: encoders, PFM, EKFR and the classifier heads."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EkfrConfig, LossConfig, ModelConfig
from .ekfr import EkfrProjection, ekfr_image, ekfr_text
from .encoders import ImageEncoder, TextEncoder
from .losses import (
    LossBreakdown,
    NormClassifier,
    cross_modal_loss,
    id_loss,
    l2_consistency_loss,
    total_loss,
)
from .pfm import ProgressiveFeatureMining

ENCODER_PREFIXES = ("image_encoder.", "text_encoder.")


class RetrievalModel(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        num_classes: int,
        loss_cfg: LossConfig | None = None,
        ekfr_cfg: EkfrConfig | None = None,
    ):
        super().__init__()
        if cfg.vocab_size < 2:
            raise ValueError("model.vocab_size must be set from the vocabulary")
        self.cfg = cfg
        self.loss_cfg = loss_cfg or LossConfig()
        self.ekfr_cfg = ekfr_cfg or EkfrConfig()
        self.num_classes = num_classes
        d = cfg.dim
        self.image_encoder = ImageEncoder(
            d, cfg.image_size, cfg.patch_size, cfg.encoder_layers, cfg.encoder_heads,
            cfg.mlp_ratio, cfg.pixel_mean, cfg.pixel_std,
        )
        self.text_encoder = TextEncoder(
            cfg.vocab_size, d, cfg.max_len, cfg.encoder_layers, cfg.encoder_heads, cfg.mlp_ratio
        )
        self.cmpc_classifier = NormClassifier(d, num_classes)
        self.pfm = None
        if cfg.pfm_stages > 0:
            self.pfm = ProgressiveFeatureMining(
                d, cfg.pfm_depth, heads=cfg.pfm_heads, refine_layers=cfg.refine_layers,
                mlp_ratio=cfg.mlp_ratio, stages=cfg.pfm_stages,
            )
            self.id1_classifier = nn.Linear(d, num_classes, bias=False)
            if cfg.pfm_stages == 2:
                if self.loss_cfg.share_id_classifier:
                    self.id2_classifier = self.id1_classifier
                else:
                    self.id2_classifier = nn.Linear(d, num_classes, bias=False)
        self.ekfr = EkfrProjection(d) if cfg.ekfr else None

    @property
    def is_baseline(self) -> bool:
        return self.pfm is None and self.ekfr is None

    def param_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        enc, other = [], []
        for name, p in self.named_parameters():
            (enc if name.startswith(ENCODER_PREFIXES) else other).append(p)
        return enc, other

    def encode(self, images: torch.Tensor, token_ids: torch.Tensor):
        f_v = self.image_encoder(images)
        f_t, mask = self.text_encoder(token_ids)
        return f_v, f_t, mask

    def compute_losses(self, images, token_ids, labels) -> tuple[LossBreakdown, dict]:
        lc = self.loss_cfg
        f_v, f_t, mask = self.encode(images, token_ids)
        parts = LossBreakdown()
        parts.cm1 = cross_modal_loss(f_v[:, 0], f_t[:, 0], labels, self.cmpc_classifier, lc.eps)
        o_v, o_t = f_v, f_t
        pfm_outs = []
        if self.pfm is not None:
            pfm_outs = self.pfm(f_v, f_t, mask)
            zero = f_v.new_zeros(())
            parts.l2, parts.id1, parts.id2 = zero, zero, zero
            for o in pfm_outs:
                parts.l2 = parts.l2 + l2_consistency_loss(o.shared_vt, o.shared_tv, mask)
                parts.id1 = parts.id1 + id_loss(o.c_v[:, 0], o.c_t[:, 0], labels, self.id1_classifier)
                if o.r_v is not None:
                    parts.id2 = parts.id2 + id_loss(o.r_v[:, 0], o.r_t[:, 0], labels, self.id2_classifier)
            o_v, o_t = pfm_outs[-1].o_v, pfm_outs[-1].o_t
        if self.ekfr is not None:
            emb_v = ekfr_image(o_v[:, 0], self.ekfr)
            emb_t = ekfr_text(o_t[:, 0], labels, self.ekfr, self.ekfr_cfg.renormalize_same_id)
            parts.cm2 = cross_modal_loss(emb_v, emb_t, labels, self.cmpc_classifier, lc.eps)
        elif self.pfm is not None:
            # no aggregation: the refined class tokens still need a matching signal
            parts.cm2 = cross_modal_loss(o_v[:, 0], o_t[:, 0], labels, self.cmpc_classifier, lc.eps)
        else:
            parts.cm2 = f_v.new_zeros(())
        for name in ("id1", "id2", "l2"):
            if not torch.is_tensor(getattr(parts, name)):
                setattr(parts, name, f_v.new_zeros(()))
        # weighted sum accumulated in float64 so the logged total matches its parts exactly
        wide = LossBreakdown(parts.cm1.double(), parts.cm2.double(), parts.id1.double(),
                             parts.id2.double(), parts.l2.double())
        parts.total = total_loss(wide, lc.lambda1, lc.lambda2)
        return parts, {"features": (f_v, f_t, mask), "pfm": pfm_outs}

    def forward(self, images, token_ids, labels) -> LossBreakdown:
        return self.compute_losses(images, token_ids, labels)[0]

    # test-time path: F^o class tokens, aggregation bypassed for both modalities
    def image_features(self, images: torch.Tensor) -> torch.Tensor:
        f = self.image_encoder(images)
        if self.pfm is not None:
            f = self.pfm.refine_only(f)
        return f[:, 0]

    def text_features(self, token_ids: torch.Tensor) -> torch.Tensor:
        f, mask = self.text_encoder(token_ids)
        if self.pfm is not None:
            f = self.pfm.refine_only(f, mask)
        return f[:, 0]

    def embed_images(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image_features(images), dim=1)

    def embed_texts(self, token_ids: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.text_features(token_ids), dim=1)


def build_model(cfg, num_classes: int) -> RetrievalModel:
    """Build from a full :class:`~textreid.config.TrainConfig`."""
    return RetrievalModel(cfg.model, num_classes, cfg.loss, cfg.ekfr)
