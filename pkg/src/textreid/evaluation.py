"""Text-to-image ranking: CMC Rank-K and mAP over a cosine similarity matrix."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


def tie_break(row: np.ndarray) -> np.ndarray:
    """Gallery order by descending similarity; equal scores keep ascending index."""
    return np.argsort(-np.asarray(row), kind="stable")


def ranked_matches(similarity: np.ndarray, query_labels, gallery_labels):
    """Boolean (Q, G) matrix: does the gallery item at each rank share the query identity?

    Queries without any relevant gallery item are dropped; returns (matches, dropped).
    """
    sim = np.asarray(similarity, dtype=np.float64)
    q = np.asarray(query_labels)
    g = np.asarray(gallery_labels)
    if sim.shape != (len(q), len(g)):
        raise ValueError(f"similarity shape {sim.shape} does not match {len(q)} queries x {len(g)} gallery")
    order = np.argsort(-sim, axis=1, kind="stable")
    matches = g[order] == q[:, None]
    keep = matches.any(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.warning("%d queries have no matching gallery identity and were dropped", dropped)
    return matches[keep], dropped


def _rank_k(matches: np.ndarray, ks) -> dict[int, float]:
    if len(matches) == 0:
        return {k: 0.0 for k in ks}
    first_hit = matches.argmax(axis=1)
    g = matches.shape[1]
    return {k: float((first_hit < min(k, g)).mean()) for k in ks}


def _map(matches: np.ndarray) -> float:
    if len(matches) == 0:
        return 0.0
    return float(np.mean([average_precision(m) for m in matches]))


def cmc(similarity, query_labels, gallery_labels, ks=DEFAULT_KS) -> dict[int, float]:
    """Fraction of queries with a correct match within the top K (K clamped to G)."""
    return _rank_k(ranked_matches(similarity, query_labels, gallery_labels)[0], ks)


def average_precision(match_row: np.ndarray) -> float:
    hits = np.flatnonzero(match_row)
    if len(hits) == 0:
        return 0.0
    precision_at_hit = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision_at_hit.mean())


def mean_average_precision(similarity, query_labels, gallery_labels) -> float:
    """Mean over queries of the precision averaged at each relevant item's rank."""
    return _map(ranked_matches(similarity, query_labels, gallery_labels)[0])


@dataclass
class RankingResult:
    similarity: np.ndarray
    query_labels: np.ndarray
    gallery_labels: np.ndarray
    rank_k: dict[int, float] = field(default_factory=dict)
    map_score: float = 0.0
    dropped_queries: int = 0

    @classmethod
    def compute(cls, similarity, query_labels, gallery_labels, ks=DEFAULT_KS) -> "RankingResult":
        sim = np.asarray(similarity, dtype=np.float64)
        q, g = np.asarray(query_labels), np.asarray(gallery_labels)
        matches, dropped = ranked_matches(sim, q, g)
        return cls(sim, q, g, _rank_k(matches, ks), _map(matches), dropped)

    def metrics(self) -> dict:
        out = {f"rank{k}": v for k, v in self.rank_k.items()}
        out.update(
            mAP=self.map_score,
            num_queries=int(len(self.query_labels)),
            num_gallery=int(len(self.gallery_labels)),
            dropped_queries=self.dropped_queries,
        )
        return out


@torch.no_grad()
def compute_embeddings(model, images=None, token_ids=None, batch_size: int = 256) -> np.ndarray:
    """Unit-norm test-time embeddings for either images (B,H,W,3) or token ids (B,m)."""
    if (images is None) == (token_ids is None):
        raise ValueError("pass exactly one of images / token_ids")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    src = images if images is not None else token_ids
    chunks = []
    for s in range(0, len(src), batch_size):
        if images is not None:
            x = torch.as_tensor(np.asarray(images[s:s + batch_size]), dtype=dtype)
            chunks.append(model.embed_images(x))
        else:
            x = torch.as_tensor(np.asarray(token_ids[s:s + batch_size]), dtype=torch.long)
            chunks.append(model.embed_texts(x))
    model.train(was_training)
    return torch.cat(chunks).cpu().numpy()


def evaluate_split(model, split, ks=DEFAULT_KS) -> RankingResult:
    """Every caption of the split queries every image of the split."""
    img = compute_embeddings(model, images=split.images)
    txt = compute_embeddings(model, token_ids=split.tokens)
    sim = txt.astype(np.float64) @ img.astype(np.float64).T
    return RankingResult.compute(sim, split.caption_labels, split.image_labels, ks)
