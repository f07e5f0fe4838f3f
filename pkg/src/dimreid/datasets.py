"""Synthetic identity datasets with camera offsets and optional domain shift.

Each identity is a Gaussian cluster; each camera adds a fixed offset. Files
are CSV with a ``#``-prefixed header carrying the generating spec, a content
hash and the nearest-centroid difficulty score.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng

FORMAT_TAG = "dimreid-dataset v1"
SPLITS = ("train", "query", "gallery")


class DatasetError(ValueError):
    pass


@dataclass
class DomainShift:
    """Whole-dataset transform: rotate consecutive coordinate pairs by
    ``rotation_angle`` degrees, scale within-identity deviations by
    ``spread_scale`` and add ``mean_shift`` to every coordinate."""

    rotation_angle: float = 30.0
    mean_shift: float = 0.5
    spread_scale: float = 1.2


@dataclass
class DatasetSpec:
    num_identities: int = 50
    samples_per_identity: int = 12
    num_cameras: int = 3
    input_dim: int = 32
    cluster_spread: float = 0.5
    camera_offset_scale: float = 0.3
    domain_shift: DomainShift | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.domain_shift, dict):
            self.domain_shift = DomainShift(**self.domain_shift)
        self.validate()

    def validate(self) -> None:
        if self.num_identities < 2:
            raise DatasetError("num_identities must be >= 2")
        if self.samples_per_identity < 2:
            raise DatasetError("samples_per_identity must be >= 2")
        if self.num_cameras < 2:
            raise DatasetError("num_cameras must be >= 2")
        if self.input_dim < 1:
            raise DatasetError("input_dim must be >= 1")
        if self.cluster_spread < 0 or self.camera_offset_scale < 0:
            raise DatasetError("spreads and offsets must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UnlabeledDataset:
    """Features only: there is deliberately no way to reach identity labels."""

    features: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    features: np.ndarray
    ids: np.ndarray
    cams: np.ndarray
    split: np.ndarray
    spec: dict = field(default_factory=dict)
    difficulty: float = float("nan")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_identities(self) -> int:
        return int(self.ids.max()) + 1

    def subset(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        m = self.split == name
        return Dataset(self.features[m], self.ids[m], self.cams[m], self.split[m], self.spec, self.difficulty)

    def unlabeled(self, name: str = "train") -> UnlabeledDataset:
        return UnlabeledDataset(self.subset(name).features.copy())

    def rows(self) -> list[str]:
        out = []
        for i in range(len(self)):
            feats = ",".join(repr(float(v)) for v in self.features[i])
            out.append(f"{i},{int(self.ids[i])},{int(self.cams[i])},{self.split[i]},{feats}")
        return out

    @property
    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.rows()).encode()).hexdigest()


def _rotation(dim: int, degrees: float) -> np.ndarray:
    c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
    R = np.eye(dim)
    for a in range(0, dim - 1, 2):
        R[a, a], R[a, a + 1], R[a + 1, a], R[a + 1, a + 1] = c, -s, s, c
    return R


def nearest_centroid_accuracy(features: np.ndarray, ids: np.ndarray) -> float:
    """Training accuracy of a nearest-class-mean classifier."""
    classes = np.unique(ids)
    centroids = np.stack([features[ids == c].mean(0) for c in classes])
    d = ((features[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((classes[d.argmin(1)] == ids).mean())


def synth_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    rng = make_rng(spec.seed)
    d = spec.input_dim
    centers = rng.standard_normal((spec.num_identities, d))
    cam_offsets = spec.camera_offset_scale * rng.standard_normal((spec.num_cameras, d))
    n_per = spec.samples_per_identity
    ids = np.repeat(np.arange(spec.num_identities), n_per)
    cams = np.tile(np.arange(n_per) % spec.num_cameras, spec.num_identities)
    deviation = spec.cluster_spread * rng.standard_normal((ids.size, d))
    shift = spec.domain_shift
    if shift is not None:
        deviation = deviation * shift.spread_scale
    features = centers[ids] + deviation + cam_offsets[cams]
    if shift is not None:
        features = features @ _rotation(d, shift.rotation_angle).T + shift.mean_shift

    split = np.empty(ids.size, dtype=object)
    n_train = n_per // 2
    for k in range(spec.num_identities):
        members = k * n_per + rng.permutation(n_per)
        split[members[:n_train]] = "train"
        seen = set()
        for i in members[n_train:]:
            if cams[i] in seen:
                split[i] = "gallery"
            else:
                seen.add(cams[i])
                split[i] = "query"
    split = split.astype(str)
    train = split == "train"
    difficulty = nearest_centroid_accuracy(features[train], ids[train])
    return Dataset(features, ids, cams, split, spec.to_dict(), difficulty)


def save_dataset(ds: Dataset, path) -> str:
    """Write ``ds`` as CSV and return its content hash."""
    rows = ds.rows()
    digest = hashlib.sha256("\n".join(rows).encode()).hexdigest()
    buf = io.StringIO()
    buf.write(f"# {FORMAT_TAG}\n")
    buf.write(f"# spec: {json.dumps(ds.spec, sort_keys=True)}\n")
    buf.write(f"# sha256: {digest}\n")
    buf.write(f"# difficulty: {ds.difficulty!r}\n")
    buf.write("index,identity,camera,split," + ",".join(f"f{j}" for j in range(ds.input_dim)) + "\n")
    for r in rows:
        buf.write(r + "\n")
    Path(path).write_text(buf.getvalue())
    return digest


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    meta = {}
    body_start = 0
    for n, line in enumerate(lines):
        if not line.startswith("#"):
            body_start = n
            break
        key, _, value = line[1:].strip().partition(":")
        meta[key.strip()] = value.strip()
    if lines[0][1:].strip() != FORMAT_TAG:
        raise DatasetError(f"{path}: not a {FORMAT_TAG} file")
    rows = lines[body_start + 1:]
    ids, cams, split, feats = [], [], [], []
    for n, row in enumerate(rows, start=body_start + 2):
        cells = row.split(",")
        if len(cells) < 5:
            raise DatasetError(f"{path}:{n}: malformed row")
        ids.append(int(cells[1]))
        cams.append(int(cells[2]))
        split.append(cells[3])
        feats.append([float(c) for c in cells[4:]])
    digest = hashlib.sha256("\n".join(rows).encode()).hexdigest()
    if meta.get("sha256") and meta["sha256"] != digest:
        raise DatasetError(f"{path}: content hash mismatch")
    spec = json.loads(meta.get("spec", "{}"))
    return Dataset(
        np.array(feats, dtype=np.float64),
        np.array(ids, dtype=np.int64),
        np.array(cams, dtype=np.int64),
        np.array(split),
        spec,
        float(meta.get("difficulty", "nan")),
    )
