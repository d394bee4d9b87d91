"""Cross-camera retrieval metrics and camera-alignment diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import Network, forward_discriminator, forward_extractor
from .data import Dataset, write_table
from .objectives import pairwise_distances

CROSS_CAMERA = "cross-camera"


@dataclass
class RankingResult:
    order: np.ndarray  # (nq, ng) gallery indices, excluded entries pushed to the end
    distances: np.ndarray  # (nq, ng) distances in ranked order (inf for excluded)
    relevant: np.ndarray  # (nq, ng) bool, ranked order
    n_valid: np.ndarray  # (nq,) number of ranked (non-excluded) gallery entries
    query_ok: np.ndarray  # (nq,) bool: query has >= 1 relevant entry
    protocol: str = CROSS_CAMERA

    @property
    def num_excluded(self) -> int:
        return int((~self.query_ok).sum())

    def ranking(self, q: int) -> np.ndarray:
        return self.order[q, : self.n_valid[q]]


def rank_queries(query_emb, gallery_emb, query_ids, query_cams, gallery_ids, gallery_cams,
                 protocol: str = CROSS_CAMERA) -> RankingResult:
    """Rank the gallery for every query by ascending Euclidean distance.

    Under the cross-camera protocol, gallery entries sharing both identity and
    camera with the query are removed from its ranking. Ties go to the lower
    gallery index.
    """
    if protocol != CROSS_CAMERA:
        raise ValueError(f"unsupported protocol {protocol!r}")
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    dist = pairwise_distances(query_emb, gallery_emb)
    same_id = query_ids[:, None] == gallery_ids[None, :]
    excluded = same_id & (query_cams[:, None] == gallery_cams[None, :])
    masked = np.where(excluded, np.inf, dist)
    order = np.argsort(masked, axis=1, kind="stable")
    rows = np.arange(order.shape[0])[:, None]
    relevant = (same_id & ~excluded)[rows, order]
    n_valid = (~excluded).sum(axis=1)
    return RankingResult(order, masked[rows, order], relevant, n_valid, relevant.any(axis=1), protocol)


def cmc_map(rr: RankingResult, max_rank: int | None = None):
    """CMC curve (ranks 1..max_rank) and mAP over queries with a true match."""
    keep = rr.query_ok
    if not keep.any():
        raise ValueError("no query has a relevant gallery entry")
    first_hit, n_rel, precision_sum = _kernels.hit_statistics(rr.relevant[keep], rr.n_valid[keep])
    nq = int(keep.sum())
    if max_rank is None:
        max_rank = rr.order.shape[1]
    counts = np.bincount(first_hit, minlength=max(max_rank, rr.order.shape[1]))
    cmc = np.cumsum(counts)[:max_rank] / nq
    aps = precision_sum / n_rel
    return cmc, math.fsum(aps) / nq


def inter_camera_discrepancy(embeddings, cameras, num_cameras: int | None = None) -> float:
    """Mean distance between each camera's centroid and the global centroid."""
    emb = np.asarray(embeddings, dtype=np.float64)
    cameras = np.asarray(cameras)
    C = int(cameras.max()) + 1 if num_cameras is None else num_cameras
    centre = emb.mean(axis=0)
    dists = []
    for c in range(C):
        sel = cameras == c
        if not sel.any():
            raise ValueError(f"camera {c} has no samples")
        dists.append(np.linalg.norm(emb[sel].mean(axis=0) - centre))
    return float(np.mean(dists))


def confusion_from_probs(probs, cameras, num_cameras: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    cameras = np.asarray(cameras)
    rows = []
    for c in range(num_cameras):
        sel = cameras == c
        if not sel.any():
            raise ValueError(f"camera {c} has no samples")
        row = probs[sel].mean(axis=0)
        rows.append(row / row.sum())
    return np.vstack(rows)


def camera_confusion(net: Network, ds: Dataset, indices=None) -> np.ndarray:
    """Row c: average discriminator output over samples from camera c."""
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
    emb, _ = forward_extractor(net, ds.features[idx])
    _, probs = forward_discriminator(net, emb)
    return confusion_from_probs(probs, ds.cameras[idx], ds.num_cameras)


def off_diagonal_uniformity(confusion) -> float:
    """Mean L1 gap between off-diagonal-renormalised rows and uniform over C-1.

    0 means every camera spreads its mass evenly over the other cameras.
    """
    m = np.asarray(confusion, dtype=np.float64)
    C = m.shape[0]
    gaps = []
    for c in range(C):
        off = np.delete(m[c], c)
        off = off / off.sum()
        gaps.append(np.abs(off - 1.0 / (C - 1)).sum())
    return float(np.mean(gaps))


def embed(net: Network, ds: Dataset, indices=None) -> np.ndarray:
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
    emb, _ = forward_extractor(net, ds.features[idx])
    return emb


def export_embeddings(net: Network, ds: Dataset, path) -> None:
    write_table(path, ds.cameras, ds.identities, ds.splits, embed(net, ds), "e")


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    d_inter_camera: float
    confusion: np.ndarray
    num_queries: int
    excluded_queries: int
    discrepancy_split: str = "test"
    protocol: str = CROSS_CAMERA
    headline: dict | None = None  # R1/R5/R10 even when cmc is shorter than 10

    @property
    def uniformity(self) -> float:
        return off_diagonal_uniformity(self.confusion)

    def rank(self, r: int) -> float:
        if self.headline and r in self.headline:
            return self.headline[r]
        return float(self.cmc[min(r, len(self.cmc)) - 1])

    def summary_line(self) -> str:
        return f"mAP={self.map:.4f} R1={self.rank(1):.4f} R5={self.rank(5):.4f} R10={self.rank(10):.4f}"

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "num_queries": self.num_queries,
            "map": float(self.map),
            "cmc": [float(v) for v in self.cmc],
            "d_inter_camera": float(self.d_inter_camera),
            "discrepancy_split": self.discrepancy_split,
            "num_cameras": int(self.confusion.shape[0]),
            "confusion": [float(v) for v in self.confusion.reshape(-1)],
            "excluded_queries": self.excluded_queries,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate(net: Network, ds: Dataset, max_rank: int = 50, split: str = "test") -> EvalReport:
    """Retrieval on query/gallery plus discrepancy and confusion on ``split``.

    ``split`` is ``"test"`` (query + gallery samples) or ``"train"``.
    """
    if ds.input_dim != net.input_dim:
        raise ValueError(f"dataset has {ds.input_dim} features, model expects {net.input_dim}")
    if ds.num_cameras != net.num_cameras:
        raise ValueError(f"dataset has {ds.num_cameras} cameras, model expects {net.num_cameras}")
    q, g = ds.indices("query"), ds.indices("gallery")
    if q.size == 0 or g.size == 0:
        raise ValueError("dataset has no query/gallery samples")
    emb = embed(net, ds)
    rr = rank_queries(emb[q], emb[g], ds.identities[q], ds.cameras[q], ds.identities[g], ds.cameras[g])
    cmc_full, mean_ap = cmc_map(rr, max(max_rank, 10))

    if split == "test":
        sel = ds.test_indices()
    elif split == "train":
        sel = ds.indices("train")
    else:
        raise ValueError(f"split must be 'test' or 'train', got {split!r}")
    _, probs = forward_discriminator(net, emb[sel])
    return EvalReport(
        cmc=cmc_full[:max_rank],
        map=mean_ap,
        d_inter_camera=inter_camera_discrepancy(emb[sel], ds.cameras[sel], ds.num_cameras),
        confusion=confusion_from_probs(probs, ds.cameras[sel], ds.num_cameras),
        num_queries=int(rr.query_ok.sum()),
        excluded_queries=rr.num_excluded,
        discrepancy_split=split,
        headline={r: float(cmc_full[r - 1]) for r in (1, 5, 10)},
    )
