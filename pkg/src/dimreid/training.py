"""Training loops for the global and part-based models, label-free transfer
finetuning, and checkpoint persistence."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datasets import Dataset, UnlabeledDataset
from .models import ConfigError, DimModel, ModelConfig, build_discriminator, init_params
from .objectives import (
    LN2,
    ObjectiveConfig,
    PairBatch,
    cross_entropy,
    dim_loss,
    jsd_estimate,
    make_pairs,
    part_cross_entropy,
)

GLOBAL_LR = 0.3
LOCAL_LR = 0.02
TRANSFER_LR = 0.00005
TRANSFER_DISC_STREAM = 2


@dataclass
class TrainConfig:
    epochs: int = 60
    base_lr: float = GLOBAL_LR
    decay_factor: float = 10.0
    decay_epoch: int = 40
    batch_size: int = 32
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.base_lr <= 0 or self.decay_factor <= 0:
            raise ConfigError("base_lr and decay_factor must be positive")
        if self.epochs and not 0 <= self.decay_epoch < self.epochs:
            raise ConfigError(f"decay_epoch ({self.decay_epoch}) must be < epochs ({self.epochs})")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Step schedule: ``base_lr`` for epochs ``0..decay_epoch-1``, then
    ``base_lr / decay_factor``."""
    return nx.SgdState(config.base_lr, config.decay_factor, config.decay_epoch, epoch).lr


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    dim_loss: float
    jsd_estimate: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f.name for f in fields(EpochRecord)])
        for r in self.records:
            w.writerow([r.epoch, repr(r.ce_loss), repr(r.dim_loss), repr(r.jsd_estimate), repr(r.lr)])
        return buf.getvalue()

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows: list[dict]) -> "TrainHistory":
        return cls([EpochRecord(**r) for r in rows])


@dataclass
class Checkpoint:
    model: DimModel
    config: TrainConfig
    epoch: int
    rng_state: dict
    history: TrainHistory = field(default_factory=TrainHistory)
    meta: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# loop
# ----------------------------------------------------------------------------


def _dim_terms(model: DimModel, enc, rng, obj: ObjectiveConfig, labels) -> list:
    side = enc.u if model.config.pair_input == "summary" else None
    first = enc.z[0]
    base_pairs = make_pairs(side if side is not None else first, first, rng, obj.sampling, labels)
    idx = base_pairs.neg_index
    losses = []
    for m, z in enumerate(enc.z):
        u = side if side is not None else z
        if obj.adversarial_discriminator:
            u, z = nx.reverse_grad(u), nx.reverse_grad(z)
        pairs = PairBatch(u, z, nx.take_rows(u, idx), z, idx)
        losses.append(dim_loss(model.discriminator_for(m), pairs, obj.alpha))
    return losses, base_pairs


def _jsd_from_losses(model, enc, pairs_idx, losses, obj) -> float:
    if obj.alpha > 0:
        return float(np.mean([LN2 - float(l.data) / (2 * obj.alpha) for l in losses]))
    vals = []
    with nx.no_tape():
        for m, z in enumerate(enc.z):
            u = enc.u if model.config.pair_input == "summary" else z
            vals.append(jsd_estimate(model.discriminator_for(m), PairBatch(u, z, nx.take_rows(u, pairs_idx), z, pairs_idx)))
    return float(np.mean(vals))


def _fit(
    model: DimModel,
    features: np.ndarray,
    labels: np.ndarray | None,
    config: TrainConfig,
    kind: str,
    resume: Checkpoint | None = None,
    until_epoch: int | None = None,
    meta: dict | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    obj = config.objective
    if kind == "transfer":
        weight = 1.0
    else:
        weight = obj.beta if model.config.architecture == "global" else obj.lam
    use_dim = weight > 0
    if use_dim and not model.discriminators:
        raise ConfigError("a non-zero DIM weight needs a discriminator")
    if kind == "transfer" and obj.sampling == "labeled":
        raise ConfigError("labeled sampling is unavailable without labels")
    n = features.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if n < 2:
        raise ValueError("need at least 2 training samples")

    rng = nx.make_rng(config.seed, 3)
    history = TrainHistory()
    start = 0
    if resume is not None:
        rng.bit_generator.state = resume.rng_state
        history = TrainHistory(list(resume.history.records))
        start = resume.epoch
    stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)

    params = model.parameters() if use_dim else model.encoder_parameters()
    if kind == "transfer":
        params = model.parameters()
    state = nx.SgdState(config.base_lr, config.decay_factor, config.decay_epoch)
    arch = model.config.architecture

    for epoch in range(start, stop):
        state.current_epoch = epoch
        order = rng.permutation(n)
        ce_sum, dim_sum, jsd_sum, batches = 0.0, 0.0, 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            if idx.size < 2:
                continue
            y = labels[idx] if labels is not None else None
            with nx.Tape() as tape:
                enc = model.encode(features[idx], "train", rng)
                if kind == "transfer":
                    ce = None
                else:
                    ce = cross_entropy(enc.logits[0], y) if arch == "global" else part_cross_entropy(enc.logits, y)
                if use_dim:
                    losses, pairs = _dim_terms(model, enc, rng, obj, y)
                    dim_total = losses[0]
                    for extra in losses[1:]:
                        dim_total = dim_total + extra
                    loss = dim_total if ce is None else ce + nx.mul(dim_total, float(weight))
                else:
                    loss = ce
            try:
                grads = nx.backward(loss, tape)
                nx.sgd_step(params, grads, state)
            except nx.NumericError as exc:
                raise nx.NumericError(f"epoch {epoch}, batch {batches}: {exc}") from exc
            ce_sum += float(ce.data) if ce is not None else float("nan")
            if use_dim:
                dim_sum += float(dim_total.data) / len(losses)
                jsd_sum += _jsd_from_losses(model, enc, pairs.neg_index, losses, obj)
            batches += 1
        nan = float("nan")
        history.records.append(
            EpochRecord(
                epoch=epoch,
                ce_loss=ce_sum / batches if kind != "transfer" else nan,
                dim_loss=dim_sum / batches if use_dim else nan,
                jsd_estimate=jsd_sum / batches if use_dim else nan,
                lr=state.lr,
            )
        )

    ckpt = Checkpoint(model, config, stop if stop > start else start, rng.bit_generator.state, history, dict(meta or {}))
    ckpt.meta.setdefault("kind", kind)
    return ckpt, history


def _labeled_train(dataset: Dataset):
    if not isinstance(dataset, Dataset):
        raise TypeError("supervised training needs a labeled Dataset")
    train = dataset.subset("train")
    if len(train) == 0:
        raise ValueError("dataset has no training samples")
    return train.features, train.ids


def default_model_config(dataset: Dataset, architecture: str = "global", **overrides) -> ModelConfig:
    return ModelConfig(
        input_dim=dataset.input_dim,
        num_identities=dataset.num_identities,
        architecture=architecture,
        **overrides,
    )


def _prepare(dataset, config, model_config, architecture, resume):
    if resume is not None:
        return resume.model
    model_config = model_config or default_model_config(dataset, architecture)
    if model_config.architecture != architecture:
        raise ConfigError(f"expected a {architecture} architecture, got {model_config.architecture}")
    return init_params(model_config, config.seed)


def train_global_dim(
    dataset: Dataset,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    resume: Checkpoint | None = None,
    until_epoch: int | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Cross-entropy plus ``beta`` times the DIM loss, one SGD optimiser over
    encoder and discriminator. ``beta = 0`` trains the encoder alone."""
    x, y = _labeled_train(dataset)
    model = _prepare(dataset, config, model_config, "global", resume)
    return _fit(model, x, y, config, "global", resume, until_epoch)


def train_local_dim(
    dataset: Dataset,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    resume: Checkpoint | None = None,
    until_epoch: int | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Summed per-part cross-entropy plus ``lam`` times the summed per-part
    DIM losses; parts share one discriminator unless configured otherwise."""
    x, y = _labeled_train(dataset)
    model = _prepare(dataset, config, model_config, "part", resume)
    return _fit(model, x, y, config, "local", resume, until_epoch)


def transfer_model(source: Checkpoint, input_dim: int, seed: int) -> DimModel:
    """Copy the source encoder and attach freshly initialised discriminators."""
    cfg = ModelConfig(**{**source.model.config.to_dict(), "with_discriminator": True})
    if cfg.input_dim != input_dim:
        raise ConfigError(
            f"architecture mismatch: encoder input expects [*, {cfg.input_dim}], target data is [*, {input_dim}]"
        )
    model = init_params(cfg, seed)
    encoder_arrays = {n: a for n, a in source.model.state_arrays() if n.startswith("encoder.")}
    model.load_state_arrays(encoder_arrays, strict=False)
    own = {n for n, _ in model.state_arrays() if n.startswith("encoder.")}
    if own != set(encoder_arrays):
        raise ConfigError("architecture mismatch: encoder blocks differ from the source checkpoint")
    model.discriminators = [
        build_discriminator(cfg, seed, k, stream=TRANSFER_DISC_STREAM) for k in range(cfg.num_discriminators)
    ]
    return model


def tf_dim(
    source: Checkpoint,
    target: UnlabeledDataset,
    config: TrainConfig,
    resume: Checkpoint | None = None,
    until_epoch: int | None = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Label-free transfer: load the source encoder, re-initialise the
    discriminator(s), and finetune on the target with the DIM loss alone."""
    if not isinstance(target, UnlabeledDataset):
        raise TypeError("tf_dim takes an UnlabeledDataset")
    model = resume.model if resume is not None else transfer_model(source, target.features.shape[1], config.seed)
    return _fit(model, target.features, None, config, "transfer", resume, until_epoch)


# ----------------------------------------------------------------------------
# checkpoint file
# ----------------------------------------------------------------------------
#
# offset  size  content
# 0       8     magic b"DIMRCKPT"
# 8       4     format version, uint32 little-endian
# 12      8     header length H, uint64 little-endian
# 20      H     header, UTF-8 JSON: {"architecture": ModelConfig, "blocks": [[name, shape], ...]}
# 20+H    8*K   parameter and buffer blocks, float64 little-endian, in header order
# ...     8     trailer length T, uint64 little-endian
# ...     T     trailer, UTF-8 JSON: {"config", "epoch", "history", "meta", "rng_state"}
# The file ends exactly after the trailer.

MAGIC = b"DIMRCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = ckpt.model.state_arrays()
    header = _dumps(
        {
            "architecture": ckpt.model.config.to_dict(),
            "blocks": [[name, list(arr.shape)] for name, arr in arrays],
            "num_discriminators": len(ckpt.model.discriminators),
        }
    )
    trailer = _dumps(
        {
            "config": ckpt.config.to_dict(),
            "epoch": ckpt.epoch,
            "history": ckpt.history.to_list(),
            "meta": ckpt.meta,
            "rng_state": ckpt.rng_state,
        }
    )
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
    out.write(header)
    for _, arr in arrays:
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    out.write(struct.pack("<Q", len(trailer)))
    out.write(trailer)
    return out.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _read(buf: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(buf):
        raise CheckpointError(f"corrupt length: {what} needs {n} bytes at offset {pos}, file has {len(buf)}")
    return buf[pos : pos + n]


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if _read(buf, 0, 8, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", _read(buf, 8, 12, "version/header length"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    pos = 20
    header = json.loads(_read(buf, pos, hlen, "header"))
    pos += hlen
    arch = header["architecture"]
    cfg = ModelConfig(**arch)
    model = init_params(cfg, 0)
    if len(model.discriminators) != header.get("num_discriminators", len(model.discriminators)):
        raise CheckpointError("discriminator count disagrees with architecture")
    arrays = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        raw = _read(buf, pos, 8 * count, f"block {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        pos += 8 * count
    (tlen,) = struct.unpack("<Q", _read(buf, pos, 8, "trailer length"))
    pos += 8
    trailer = json.loads(_read(buf, pos, tlen, "trailer"))
    pos += tlen
    if pos != len(buf):
        raise CheckpointError(f"corrupt length: {len(buf) - pos} unexpected trailing bytes")
    try:
        model.load_state_arrays(arrays)
    except ConfigError as exc:
        raise CheckpointError(f"shape disagreement: {exc}") from exc
    return Checkpoint(
        model=model,
        config=TrainConfig.from_dict(trailer["config"]),
        epoch=int(trailer["epoch"]),
        rng_state=trailer["rng_state"],
        history=TrainHistory.from_list(trailer["history"]),
        meta=trailer["meta"],
    )


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
