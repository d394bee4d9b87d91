"""Loss functions for camera alignment and intra-camera metric learning.

Every loss returns its value together with the analytic gradient. Losses
on discriminator outputs take the softmax probabilities and return the
gradient with respect to the *logits* that produced them.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _kernels

LOG_FLOOR = 1e-12


class Scheme(str, enum.Enum):
    GRL = "grl"
    OCE = "oce"
    ACE = "ace"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown scheme {value!r}; expected one of {[s.value for s in cls]}"
            ) from None


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    persons: int = 32
    images_per_person: int = 4

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("triplet margin must be positive")
        if self.persons < 2 or self.images_per_person < 2:
            raise ValueError("P and K must both be at least 2")


def _check_probs(probs, labels=None):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probabilities must be N x C, got shape {probs.shape}")
    if labels is None:
        return probs, None
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != probs.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {probs.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"camera label out of range [0, {probs.shape[1]})")
    return probs, labels


def _soft_target_ce(probs, target):
    """Mean cross-entropy against soft targets and its logit gradient.

    For softmax outputs, d/dlogits of ``-sum_i t_i log p_i`` equals
    ``p - t`` whenever ``sum_i t_i = 1``.
    """
    n = probs.shape[0]
    logp = np.log(np.maximum(probs, LOG_FLOOR))
    per_sample = -(target * logp).sum(axis=1)
    return float(per_sample.mean()), (probs - target) / n


def discriminator_loss(probs, labels):
    """Cross-entropy of the camera classifier against the true camera."""
    probs, labels = _check_probs(probs, labels)
    target = np.zeros_like(probs)
    target[np.arange(len(labels)), labels] = 1.0
    return _soft_target_ce(probs, target)


def oce_loss(probs, labels):
    """Other-camera equiprobability: mass 1/(C-1) on every camera but the true one."""
    probs, labels = _check_probs(probs, labels)
    c = probs.shape[1]
    if c < 2:
        raise ValueError("OCE needs at least two cameras")
    target = np.full_like(probs, 1.0 / (c - 1))
    target[np.arange(len(labels)), labels] = 0.0
    return _soft_target_ce(probs, target)


def ace_loss(probs, labels=None):
    """All-camera equiprobability: mass 1/C on every camera. Labels are ignored."""
    probs, _ = _check_probs(probs)
    target = np.full_like(probs, 1.0 / probs.shape[1])
    return _soft_target_ce(probs, target)


def grl_forward(x):
    return x


def grl_backward(upstream_grad, lam: float = 1.0):
    if lam <= 0:
        raise ValueError(f"gradient reversal constant must be positive, got {lam}")
    return -lam * np.asarray(upstream_grad, dtype=np.float64)


@dataclass
class AdversarialTerm:
    """Generator-side objective on a camera-balanced batch.

    ``grad_logits`` is what to push back through the (frozen) discriminator.
    When ``reverse_lambda`` is set the embedding gradient must additionally
    go through :func:`grl_backward` with that constant.
    """

    loss: float
    grad_logits: np.ndarray
    reverse_lambda: float | None = None


def generator_adversarial_loss(scheme, probs, labels, lam: float) -> AdversarialTerm:
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.OCE:
        loss, grad = oce_loss(probs, labels)
    elif scheme is Scheme.ACE:
        loss, grad = ace_loss(probs, labels)
    elif scheme is Scheme.GRL:
        loss, grad = discriminator_loss(probs, labels)
        # F minimises -L_D; the sign flip happens in grl_backward
        return AdversarialTerm(-lam * loss, grad, reverse_lambda=lam)
    else:
        raise ValueError("scheme NONE has no adversarial term")
    return AdversarialTerm(lam * loss, lam * grad)


# -- metric learning ------------------------------------------------------------

def pairwise_distances(embeddings, other=None):
    """Euclidean distance matrix via the clamped ``|a|^2 + |b|^2 - 2ab`` form."""
    a = np.asarray(embeddings, dtype=np.float64)
    b = a if other is None else np.asarray(other, dtype=np.float64)
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    d = np.sqrt(np.maximum(sq, 0.0))
    if other is None:
        d = 0.5 * (d + d.T)
        np.fill_diagonal(d, 0.0)
    return d


class NoValidAnchorsError(ValueError):
    pass


@dataclass
class TripletResult:
    loss: float
    grad: np.ndarray
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    active: np.ndarray  # bool per valid anchor: hinge > 0
    num_invalid: int

    @property
    def active_fraction(self) -> float:
        return float(self.active.mean()) if self.active.size else 0.0


def mine_hardest(embeddings, identities, cameras):
    """Hardest positive and negative for every anchor within its own camera."""
    dist = pairwise_distances(embeddings)
    pos, neg = _kernels.hardest_pairs(dist, identities, cameras)
    return pos, neg, dist


def batch_hard_triplet(embeddings, identities, cameras, margin: float = 0.3) -> TripletResult:
    emb = np.asarray(embeddings, dtype=np.float64)
    identities = np.asarray(identities, dtype=np.int64)
    cameras = np.asarray(cameras, dtype=np.int64)
    pos, neg, _ = mine_hardest(emb, identities, cameras)
    valid = (pos >= 0) & (neg >= 0)
    anchors = np.flatnonzero(valid)
    if anchors.size == 0:
        raise NoValidAnchorsError("no anchor has both a same-camera positive and negative")
    p, n = pos[anchors], neg[anchors]

    diff_ap = emb[anchors] - emb[p]
    diff_an = emb[anchors] - emb[n]
    d_ap = np.sqrt((diff_ap * diff_ap).sum(axis=1))
    d_an = np.sqrt((diff_an * diff_an).sum(axis=1))
    hinge = margin + d_ap - d_an
    active = hinge > 0.0
    loss = float(np.where(active, hinge, 0.0).mean())

    grad = np.zeros_like(emb)
    if active.any():
        a_idx, p_idx, n_idx = anchors[active], p[active], n[active]
        unit_ap = _unit(diff_ap[active], d_ap[active])
        unit_an = _unit(diff_an[active], d_an[active])
        _kernels.scatter_triplet(grad, a_idx, p_idx, n_idx, unit_ap, unit_an, 1.0 / anchors.size)
    return TripletResult(loss, grad, anchors, p, n, active, int((~valid).sum()))


def _unit(diff, norm):
    # gradient of |x| at x = 0 taken as 0
    safe = np.where(norm > 0.0, norm, 1.0)
    return np.where((norm > 0.0)[:, None], diff / safe[:, None], 0.0)


def mean_triplet_over_cameras(embeddings, identities, cameras, margin: float = 0.3) -> TripletResult:
    """Average the per-camera batch-hard losses over the cameras present."""
    cams = np.unique(np.asarray(cameras))
    if cams.size == 1:
        return batch_hard_triplet(embeddings, identities, cameras, margin)
    emb = np.asarray(embeddings, dtype=np.float64)
    grad = np.zeros_like(emb)
    total = 0.0
    parts = []
    for c in cams:
        idx = np.flatnonzero(np.asarray(cameras) == c)
        r = batch_hard_triplet(emb[idx], np.asarray(identities)[idx], np.asarray(cameras)[idx], margin)
        total += r.loss
        grad[idx] += r.grad / cams.size
        parts.append((idx, r))
    anchors = np.concatenate([idx[r.anchors] for idx, r in parts])
    positives = np.concatenate([idx[r.positives] for idx, r in parts])
    negatives = np.concatenate([idx[r.negatives] for idx, r in parts])
    active = np.concatenate([r.active for _, r in parts])
    invalid = sum(r.num_invalid for _, r in parts)
    return TripletResult(total / cams.size, grad, anchors, positives, negatives, active, invalid)
