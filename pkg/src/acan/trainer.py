"""Alternating discriminator / feature-extractor training.

Each iteration:

1. draw a camera-balanced batch and take one SGD step on the discriminator
   cross-entropy;
2. draw a PK batch from the next camera in round-robin order, compute the
   batch-hard triplet loss on it, add the scheme's adversarial term on the
   camera-balanced batch (recomputed against the updated discriminator) and
   take one SGD step on the extractor.

Scheme ``none`` skips step 1 and the adversarial term. PK sampling and
camera-balanced sampling draw from independent RNG streams, so the extractor
trajectory of ``none`` and of any scheme with ``lam=0`` coincide exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Callable

import numpy as np

from .core import (
    Network,
    backward_discriminator,
    backward_extractor,
    forward_discriminator,
    forward_extractor,
)
from .data import Dataset, camera_quota, sample_camera_balanced, sample_pk_batch
from .objectives import Scheme, batch_hard_triplet, discriminator_loss, generator_adversarial_loss, grl_backward

CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    """A loss went non-finite. ``snapshot`` holds the state at that iteration."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    scheme: Scheme = Scheme.OCE
    lam: float = 1.0
    margin: float = 0.3
    P: int = 32
    K: int = 4
    adversarial_batch_base: int = 64
    epochs: int = 300
    lr: float = 0.1
    lr_decay_epochs: tuple = (100, 200)
    lr_decay_factor: float = 0.1
    seed: int = 0
    hidden: tuple = (64, 64)
    embedding_dim: int = 128

    def __post_init__(self):
        self.scheme = Scheme.parse(self.scheme)
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self, ds: Dataset | None = None) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.scheme is Scheme.GRL and self.lam == 0:
            raise ValueError("GRL needs a positive lambda (reversal constant)")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.P < 2 or self.K < 2:
            raise ValueError("P and K must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        d = self.lr_decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing, got {list(d)}")
        if d and (d[0] < 1 or d[-1] >= self.epochs):
            raise ValueError(f"lr_decay_epochs {list(d)} must lie in [1, epochs={self.epochs})")
        if self.embedding_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if ds is None:
            return
        train = ds.splits == "train"
        for c in range(ds.num_cameras):
            n_ids = np.unique(ds.identities[train & (ds.cameras == c)]).size
            if n_ids < self.P:
                raise ValueError(f"camera {c} has {n_ids} training identities, fewer than P={self.P}")
            if self.scheme is not Scheme.NONE:
                q = camera_quota(self.adversarial_batch_base, ds.num_cameras)
                if q < 1 or (train & (ds.cameras == c)).sum() < q:
                    raise ValueError(f"camera-balanced quota {q} infeasible for camera {c}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["hidden"] = list(self.hidden)
        return d


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule. Factor powers go through Decimal so 0.1 * 0.1 is 0.01."""
    k = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * float(Decimal(repr(cfg.lr_decay_factor)) ** k)


@dataclass
class TrainLogEntry:
    epoch: int
    iteration: int
    triplet_loss: float
    learning_rate: float
    active_anchor_fraction: float
    discriminator_loss: float | None = None
    adversarial_loss: float | None = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d)


@dataclass
class TrainState:
    net: Network
    epoch: int  # next epoch to run
    iteration: int  # global iteration counter
    rng_pk: np.random.Generator
    rng_balanced: np.random.Generator
    log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "model": self.net.to_dict(),
            "epoch": self.epoch,
            "iteration": self.iteration,
            "rng": {
                "pk": self.rng_pk.bit_generator.state,
                "balanced": self.rng_balanced.bit_generator.state,
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainState":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        rng_pk, rng_bal = np.random.default_rng(), np.random.default_rng()
        rng_pk.bit_generator.state = doc["rng"]["pk"]
        rng_bal.bit_generator.state = doc["rng"]["balanced"]
        return cls(Network.from_dict(doc["model"]), doc["epoch"], doc["iteration"], rng_pk, rng_bal)


def initial_state(ds: Dataset, cfg: TrainConfig) -> TrainState:
    init_seq, pk_seq, bal_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    net = Network.init(
        np.random.default_rng(init_seq),
        ds.input_dim,
        ds.num_cameras,
        hidden=cfg.hidden,
        embedding_dim=cfg.embedding_dim,
        seed=cfg.seed,
        scheme=cfg.scheme.value,
    )
    return TrainState(net, 0, 0, np.random.default_rng(pk_seq), np.random.default_rng(bal_seq))


def iterations_per_epoch(ds: Dataset, cfg: TrainConfig) -> int:
    return math.ceil(int((ds.splits == "train").sum()) / (cfg.P * cfg.K))


def _snapshot(state: TrainState, **extra) -> dict:
    return {"state": state.to_dict(), **extra}


def train_step(ds: Dataset, cfg: TrainConfig, state: TrainState, lr: float) -> TrainLogEntry:
    net = state.net
    disc_loss = adv_loss = None

    adv_batch = None
    if cfg.scheme is not Scheme.NONE:
        adv_batch = sample_camera_balanced(ds, cfg.adversarial_batch_base, state.rng_balanced).indices
        x_adv, z_adv = ds.features[adv_batch], ds.cameras[adv_batch]
        emb_adv, _ = forward_extractor(net, x_adv)
        _, probs = forward_discriminator(net, emb_adv)
        disc_loss, g_logits = discriminator_loss(probs, z_adv)
        if not math.isfinite(disc_loss):
            raise DivergenceError(f"discriminator loss is {disc_loss} at iteration {state.iteration}",
                                  _snapshot(state, discriminator_loss=disc_loss))
        d_grads, _ = backward_discriminator(net, emb_adv, g_logits)
        net.apply_sgd("discriminator", d_grads, lr)

    camera = state.iteration % ds.num_cameras
    pk = sample_pk_batch(ds, cfg.P, cfg.K, camera, state.rng_pk).indices
    emb, cache = forward_extractor(net, ds.features[pk])
    trip = batch_hard_triplet(emb, ds.identities[pk], ds.cameras[pk], cfg.margin)
    if not math.isfinite(trip.loss):
        raise DivergenceError(f"triplet loss is {trip.loss} at iteration {state.iteration}",
                              _snapshot(state, triplet_loss=trip.loss))
    f_grads, _ = backward_extractor(net, cache, trip.grad)

    if adv_batch is not None:
        emb_adv, adv_cache = forward_extractor(net, x_adv)
        _, probs = forward_discriminator(net, emb_adv)
        term = generator_adversarial_loss(cfg.scheme, probs, z_adv, cfg.lam)
        adv_loss = term.loss
        if not math.isfinite(adv_loss):
            raise DivergenceError(f"adversarial loss is {adv_loss} at iteration {state.iteration}",
                                  _snapshot(state, adversarial_loss=adv_loss))
        # the discriminator is frozen here: only the embedding gradient is used
        _, g_emb = backward_discriminator(net, emb_adv, term.grad_logits)
        if term.reverse_lambda is not None:
            g_emb = grl_backward(g_emb, term.reverse_lambda)
        a_grads, _ = backward_extractor(net, adv_cache, g_emb)
        f_grads = [g + a for g, a in zip(f_grads, a_grads)]

    net.apply_sgd("extractor", f_grads, lr)
    for p in net.extractor_params():
        if not np.isfinite(p).all():
            raise DivergenceError(f"extractor parameters went non-finite at iteration {state.iteration}",
                                  _snapshot(state))

    entry = TrainLogEntry(
        epoch=state.epoch,
        iteration=state.iteration,
        triplet_loss=trip.loss,
        learning_rate=lr,
        active_anchor_fraction=trip.active_fraction,
        discriminator_loss=disc_loss,
        adversarial_loss=adv_loss,
    )
    state.iteration += 1
    return entry


def train(
    ds: Dataset,
    cfg: TrainConfig,
    state: TrainState | None = None,
    stop_epoch: int | None = None,
    log_path=None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
):
    """Run (or resume) training. Returns ``(network, log_entries)``.

    ``stop_epoch`` halts before that epoch index, leaving ``state`` ready to
    resume; ``log_path`` streams the log as JSON Lines (appending on resume).
    """
    cfg.validate(ds)
    if state is None:
        state = initial_state(ds, cfg)
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    n_iter = iterations_per_epoch(ds, cfg)
    fh = open(log_path, "a" if state.epoch else "w", encoding="utf-8") if log_path else None
    try:
        while state.epoch < end:
            lr = learning_rate(cfg, state.epoch)
            for _ in range(n_iter):
                entry = train_step(ds, cfg, state, lr)
                state.log.append(entry)
                if fh:
                    fh.write(entry.to_json() + "\n")
            state.epoch += 1
            if on_epoch_end:
                on_epoch_end(state)
    finally:
        if fh:
            fh.close()
    return state.net, state.log


def dumps_checkpoint(state: TrainState) -> str:
    return json.dumps(state.to_dict(), separators=(",", ":")) + "\n"


def save_checkpoint(state: TrainState, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(state))


def load_checkpoint(path) -> TrainState:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"cannot parse checkpoint {path}: {exc}") from None
    return TrainState.from_dict(doc)
