"""Multi-camera datasets: synthetic generation, CSV storage and batch sampling.

Identities in the ``train`` split are local to their camera: the pair
``(camera, identity)`` is the key and no link between cameras exists.
Identities in the ``query``/``gallery`` splits are global evaluation
identities, shared across cameras so that cross-camera matches can be scored.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

GENERATOR_ID = "numpy.random.Generator(PCG64)"
SPLITS = ("train", "query", "gallery")

# Scale of identity prototypes and strength of the per-camera mixing matrix.
PROTOTYPE_SCALE = 1.0
MIXING_STRENGTH = 0.1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    camera_id: int
    local_identity: int
    split_tag: str


@dataclass
class Dataset:
    """Column-oriented sample store. Treat as immutable once built."""

    features: np.ndarray  # (N, d) float64
    cameras: np.ndarray  # (N,) int64
    identities: np.ndarray  # (N,) int64
    splits: np.ndarray  # (N,) str
    num_cameras: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=str)
        for arr in (self.features, self.cameras, self.identities, self.splits):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.cameras[i]), int(self.identities[i]), str(self.splits[i]))

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.splits != "train")

    def validate(self) -> None:
        n = len(self)
        if n == 0:
            raise DatasetError("dataset has no samples")
        if self.num_cameras < 2:
            raise DatasetError(f"need at least 2 cameras, got {self.num_cameras}")
        if not (self.cameras.shape == self.identities.shape == self.splits.shape == (n,)):
            raise DatasetError("column lengths disagree")
        if not np.isfinite(self.features).all():
            raise DatasetError("features contain NaN or Inf")
        if self.cameras.min() < 0 or self.cameras.max() >= self.num_cameras:
            raise DatasetError(f"camera id outside [0, {self.num_cameras})")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise DatasetError(f"unknown split tags {sorted(bad)}")
        train = self.splits == "train"
        for c in range(self.num_cameras):
            ids, counts = np.unique(self.identities[train & (self.cameras == c)], return_counts=True)
            if ids.size < 2:
                raise DatasetError(f"camera {c} has {ids.size} training identities; need >= 2")
            if counts.min() < 2:
                raise DatasetError(
                    f"camera {c} identity {ids[counts.argmin()]} has a single training sample"
                )

    def equals(self, other: "Dataset") -> bool:
        return (
            self.num_cameras == other.num_cameras
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.cameras, other.cameras)
            and np.array_equal(self.identities, other.identities)
            and np.array_equal(self.splits, other.splits)
        )


@dataclass(frozen=True)
class SynthConfig:
    cameras: int = 4
    identities_per_camera: int = 32
    samples_per_identity: int = 8
    input_dim: int = 16
    identity_spread: float = 0.5
    camera_shift_scale: float = 3.0
    cross_camera_overlap: int = 16
    seed: int = 7

    def validate(self) -> None:
        for name in ("cameras", "identities_per_camera", "samples_per_identity", "input_dim"):
            if getattr(self, name) < 2:
                raise DatasetError(f"{name} must be >= 2, got {getattr(self, name)}")
        if self.cross_camera_overlap < 1:
            raise DatasetError("cross_camera_overlap must be >= 1")
        if not self.identity_spread > 0:
            raise DatasetError("identity_spread must be > 0")
        if not self.camera_shift_scale >= 0:
            raise DatasetError("camera_shift_scale must be >= 0")


def _random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Identity prototypes seen through per-camera affine distortions.

    Camera ``c`` maps a clean sample ``x`` to ``A_c x + t_c`` where ``A_c``
    is an identity matrix blended with a random rotation and ``t_c`` is a
    translation of norm ``camera_shift_scale``. Evaluation identities are
    drawn once and observed by every camera; within each (identity, camera)
    cell the first sample is a query and the rest go to the gallery.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, C, per = cfg.input_dim, cfg.cameras, cfg.samples_per_identity

    mixes, shifts = [], []
    for _ in range(C):
        rot = _random_rotation(rng, d)
        mixes.append((1.0 - MIXING_STRENGTH) * np.eye(d) + MIXING_STRENGTH * rot)
        direction = rng.standard_normal(d)
        shifts.append(cfg.camera_shift_scale * direction / np.linalg.norm(direction))

    def observe(c, proto, count):
        clean = proto + cfg.identity_spread * rng.standard_normal((count, d))
        return clean @ mixes[c].T + shifts[c]

    feats, cams, ids, splits = [], [], [], []
    for c in range(C):
        protos = PROTOTYPE_SCALE * rng.standard_normal((cfg.identities_per_camera, d))
        for i, proto in enumerate(protos):
            feats.append(observe(c, proto, per))
            cams += [c] * per
            ids += [i] * per
            splits += ["train"] * per

    eval_protos = PROTOTYPE_SCALE * rng.standard_normal((cfg.cross_camera_overlap, d))
    first_eval_id = cfg.identities_per_camera
    for k, proto in enumerate(eval_protos):
        for c in range(C):
            feats.append(observe(c, proto, per))
            cams += [c] * per
            ids += [first_eval_id + k] * per
            splits += ["query"] + ["gallery"] * (per - 1)

    ds = Dataset(
        np.vstack(feats),
        np.array(cams),
        np.array(ids),
        np.array(splits),
        C,
        provenance={"synth": asdict(cfg), "seed": cfg.seed, "generator_id": GENERATOR_ID},
    )
    ds.validate()
    return ds


# -- CSV ------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_table(path, cameras, identities, splits, values, prefix: str) -> None:
    values = np.asarray(values, dtype=np.float64)
    header = ["camera", "identity", "split"] + [f"{prefix}{j}" for j in range(values.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for c, i, s, row in zip(cameras, identities, splits, values):
            w.writerow([int(c), int(i), s, *(_fmt(v) for v in row)])


def metadata_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def save_csv(ds: Dataset, path) -> None:
    write_table(path, ds.cameras, ds.identities, ds.splits, ds.features, "f")
    meta = {
        "num_cameras": ds.num_cameras,
        "input_dim": ds.input_dim,
        "seed": ds.provenance.get("seed"),
        "generator_id": ds.provenance.get("generator_id", GENERATOR_ID),
    }
    if "synth" in ds.provenance:
        meta["synth"] = ds.provenance["synth"]
    with open(metadata_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_csv(path, num_cameras: int | None = None) -> Dataset:
    """Read a dataset CSV; ``num_cameras`` defaults to the sidecar metadata.

    Without either, the camera count is inferred as ``max(camera) + 1``.
    """
    path = Path(path)
    meta = {}
    mpath = metadata_path(path)
    if mpath.exists():
        with open(mpath, encoding="utf-8") as fh:
            meta = json.load(fh)
    if num_cameras is None:
        num_cameras = meta.get("num_cameras")

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: no samples (file is empty)")
    header = rows[0]
    if header[:3] != ["camera", "identity", "split"] or len(header) < 4:
        raise DatasetError(f"{path}:1: header must start with camera,identity,split and list features")
    dim = len(header) - 3
    if "input_dim" in meta and meta["input_dim"] != dim:
        raise DatasetError(f"{path}:1: header has {dim} features but metadata says {meta['input_dim']}")

    feats = np.empty((len(rows) - 1, dim))
    cams = np.empty(len(rows) - 1, dtype=np.int64)
    ids = np.empty(len(rows) - 1, dtype=np.int64)
    splits = []
    for k, row in enumerate(rows[1:]):
        line = k + 2
        if len(row) != dim + 3:
            raise DatasetError(f"{path}:{line}: expected {dim} features, found {len(row) - 3}")
        try:
            cams[k] = int(row[0])
            ids[k] = int(row[1])
            feats[k] = [float(v) for v in row[3:]]
        except ValueError as exc:
            raise DatasetError(f"{path}:{line}: malformed value ({exc})") from None
        if row[2] not in SPLITS:
            raise DatasetError(f"{path}:{line}: unknown split {row[2]!r}")
        if cams[k] < 0 or (num_cameras is not None and cams[k] >= num_cameras):
            raise DatasetError(f"{path}:{line}: camera {cams[k]} outside [0, {num_cameras})")
        splits.append(row[2])
    if not splits:
        raise DatasetError(f"{path}: no samples")
    if num_cameras is None:
        num_cameras = int(cams.max()) + 1

    provenance = {"path": str(path), "seed": meta.get("seed"), "generator_id": meta.get("generator_id")}
    if "synth" in meta:
        provenance["synth"] = meta["synth"]
    ds = Dataset(feats, cams, ids, np.array(splits), int(num_cameras), provenance)
    ds.validate()
    return ds


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# -- sampling -------------------------------------------------------------------

@dataclass
class PKBatch:
    indices: np.ndarray
    camera_id: int
    persons: int
    images_per_person: int
    with_replacement: list  # identities that had fewer than K samples


@dataclass
class CameraBalancedBatch:
    indices: np.ndarray
    quota: int


def sample_pk_batch(ds: Dataset, P: int, K: int, camera_id: int, rng: np.random.Generator) -> PKBatch:
    """P identities of one camera, K training samples each."""
    in_cam = np.flatnonzero((ds.cameras == camera_id) & (ds.splits == "train"))
    ids = np.unique(ds.identities[in_cam])
    if ids.size < P:
        raise DatasetError(f"camera {camera_id} has {ids.size} identities, fewer than P={P}")
    chosen = rng.choice(ids, size=P, replace=False)
    out, replaced = [], []
    for pid in chosen:
        pool = in_cam[ds.identities[in_cam] == pid]
        short = pool.size < K
        if short:
            replaced.append(int(pid))
        out.append(rng.choice(pool, size=K, replace=short))
    return PKBatch(np.concatenate(out), camera_id, P, K, replaced)


def camera_quota(base: int, num_cameras: int) -> int:
    return base // num_cameras


def sample_camera_balanced(ds: Dataset, base: int, rng: np.random.Generator) -> CameraBalancedBatch:
    """floor(base / C) training samples from every camera, without replacement."""
    q = camera_quota(base, ds.num_cameras)
    if q < 1:
        raise DatasetError(f"base {base} gives an empty quota for {ds.num_cameras} cameras")
    out = []
    for c in range(ds.num_cameras):
        pool = np.flatnonzero((ds.cameras == c) & (ds.splits == "train"))
        if pool.size < q:
            raise DatasetError(f"camera {c} has {pool.size} training samples, quota is {q}")
        out.append(rng.choice(pool, size=q, replace=False))
    return CameraBalancedBatch(np.concatenate(out), q)
