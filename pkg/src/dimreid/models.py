"""Encoders and the pair-scoring discriminator, sized for CPU experiments."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import BatchNormState, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture descriptor.

    ``architecture`` is ``"global"`` (single embedding head) or ``"part"``
    (``num_parts`` striped heads over a ``positions x summary_dim`` map).
    Full-scale reference values are an embedding of 512 and six parts.
    """

    input_dim: int = 32
    num_identities: int = 50
    architecture: str = "global"
    backbone_hidden: int = 64
    summary_dim: int = 32
    embed_dim: int = 64
    num_parts: int = 6
    positions: int = 12
    dropout: float = nx.DROPOUT_RATE
    disc_hidden: tuple[int, int, int] = (128, 128, 64)
    share_discriminators: bool = True
    pair_input: str = "summary"
    with_discriminator: bool = True

    def __post_init__(self):
        self.disc_hidden = tuple(int(h) for h in self.disc_hidden)
        self.validate()

    def validate(self) -> None:
        dims = {
            "input_dim": self.input_dim,
            "num_identities": self.num_identities,
            "backbone_hidden": self.backbone_hidden,
            "summary_dim": self.summary_dim,
            "embed_dim": self.embed_dim,
            "num_parts": self.num_parts,
            "positions": self.positions,
        }
        for name, value in dims.items():
            if int(value) != value or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if len(self.disc_hidden) != 3 or min(self.disc_hidden) <= 0:
            raise ConfigError(f"disc_hidden needs three positive widths, got {self.disc_hidden}")
        if self.architecture not in ("global", "part"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "part" and self.positions % self.num_parts:
            raise ConfigError(f"positions ({self.positions}) not divisible by num_parts ({self.num_parts})")
        if self.pair_input not in ("summary", "embedding"):
            raise ConfigError(f"pair_input must be 'summary' or 'embedding', got {self.pair_input!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def parts(self) -> int:
        return self.num_parts if self.architecture == "part" else 1

    @property
    def disc_input_dim(self) -> int:
        side = self.summary_dim if self.pair_input == "summary" else self.embed_dim
        return side + self.embed_dim

    @property
    def num_discriminators(self) -> int:
        if not self.with_discriminator:
            return 0
        return 1 if self.share_discriminators else self.parts

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_hidden"] = list(self.disc_hidden)
        return d


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True):
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = nx.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class EmbeddingHead:
    """fc1 -> batchnorm -> leaky_relu (= embedding) -> dropout -> fc2 (logits).

    fc1 carries no bias: the batchnorm shift makes it redundant and its
    gradient would be identically zero.
    """

    def __init__(self, in_dim: int, embed_dim: int, num_classes: int, dropout: float, rng):
        self.fc1 = Linear(in_dim, embed_dim, rng, bias=False)
        self.bn = BatchNormState.create(embed_dim)
        self.fc2 = Linear(embed_dim, num_classes, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, mode: str, rng) -> tuple[Tensor, Tensor]:
        z = nx.leaky_relu(nx.batchnorm(self.fc1(x), self.bn, mode))
        logits = self.fc2(nx.dropout(z, self.dropout, mode, rng))
        return z, logits

    def named_parameters(self, prefix: str):
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield f"{prefix}.bn.gamma", self.bn.gamma
        yield f"{prefix}.bn.beta", self.bn.beta
        yield from self.fc2.named_parameters(f"{prefix}.fc2")

    def named_buffers(self, prefix: str):
        yield f"{prefix}.bn.running_mean", self.bn, "running_mean"
        yield f"{prefix}.bn.running_var", self.bn, "running_var"


@dataclass
class Encoding:
    u: Tensor
    z: list[Tensor]
    logits: list[Tensor]

    @property
    def embedding(self) -> np.ndarray:
        """Retrieval embedding: the part embeddings concatenated."""
        return np.concatenate([z.data for z in self.z], axis=1)


class GlobalEncoder:
    """Two-layer ReLU backbone producing the summary ``u``, then one head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = [
            Linear(cfg.input_dim, cfg.backbone_hidden, rng),
            Linear(cfg.backbone_hidden, cfg.summary_dim, rng),
        ]
        self.heads = [EmbeddingHead(cfg.summary_dim, cfg.embed_dim, cfg.num_identities, cfg.dropout, rng)]

    def summarize(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.backbone:
            h = nx.relu(layer(h))
        return h

    def __call__(self, x: Tensor, mode: str, rng=None) -> Encoding:
        _check_input(x, self.cfg.input_dim)
        u = self.summarize(x)
        z, logits = self.heads[0](u, mode, rng)
        return Encoding(u, [z], [logits])

    def named_parameters(self):
        for i, layer in enumerate(self.backbone):
            yield from layer.named_parameters(f"encoder.backbone{i}")
        for m, head in enumerate(self.heads):
            yield from head.named_parameters(f"encoder.head{m}")

    def named_buffers(self):
        for m, head in enumerate(self.heads):
            yield from head.named_buffers(f"encoder.head{m}")


class PartEncoder(GlobalEncoder):
    """Backbone emits a ``positions x summary_dim`` map; stripe ``m`` averages
    positions ``[m P / M, (m + 1) P / M)`` and feeds head ``m``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbone = [
            Linear(cfg.input_dim, cfg.backbone_hidden, rng),
            Linear(cfg.backbone_hidden, cfg.positions * cfg.summary_dim, rng),
        ]
        self.heads = [
            EmbeddingHead(cfg.summary_dim, cfg.embed_dim, cfg.num_identities, cfg.dropout, rng)
            for _ in range(cfg.num_parts)
        ]

    def feature_map(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.backbone:
            h = nx.relu(layer(h))
        return nx.reshape(h, (x.shape[0], self.cfg.positions, self.cfg.summary_dim))

    def stripes(self, fmap: Tensor) -> list[Tensor]:
        width = self.cfg.positions // self.cfg.num_parts
        return [
            nx.reduce_mean(nx.slice_axis(fmap, 1, m * width, (m + 1) * width), axis=1)
            for m in range(self.cfg.num_parts)
        ]

    def __call__(self, x: Tensor, mode: str, rng=None) -> Encoding:
        _check_input(x, self.cfg.input_dim)
        fmap = self.feature_map(x)
        u = nx.reduce_mean(fmap, axis=1)
        zs, logits = [], []
        for head, stripe in zip(self.heads, self.stripes(fmap)):
            z, lg = head(stripe, mode, rng)
            zs.append(z)
            logits.append(lg)
        return Encoding(u, zs, logits)


def _check_input(x: Tensor, dim: int) -> None:
    if x.ndim != 2 or x.shape[1] != dim:
        raise nx.DimensionError(f"encoder expects [batch, {dim}] input, got {x.shape}")


class DimDiscriminator:
    """Four fully connected layers: ReLU after the first three, sigmoid last.

    Scores a batch of ``(input_side, embedding)`` rows; no batchnorm or
    dropout, so train and eval scores coincide.
    """

    def __init__(self, in_dim: int, hidden: tuple[int, int, int], rng: np.random.Generator):
        dims = [in_dim, *hidden, 1]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def logits(self, u: Tensor, z: Tensor) -> Tensor:
        if u.shape[0] != z.shape[0]:
            raise nx.DimensionError(f"batch mismatch between inputs {u.shape} and embeddings {z.shape}")
        h = nx.concat(u, z, axis=1)
        for layer in self.layers[:-1]:
            h = nx.relu(layer(h))
        return nx.reshape(self.layers[-1](h), (u.shape[0],))

    def __call__(self, u: Tensor, z: Tensor) -> Tensor:
        return nx.sigmoid(self.logits(u, z))

    def named_parameters(self, prefix: str = "disc"):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.fc{i}")

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())


def discriminate(D: DimDiscriminator, u: Tensor, z: Tensor) -> Tensor:
    return D(u, z)


@dataclass
class DimModel:
    """Encoder plus zero, one (shared) or ``num_parts`` discriminators."""

    config: ModelConfig
    encoder: GlobalEncoder
    discriminators: list[DimDiscriminator] = field(default_factory=list)

    def discriminator_for(self, part: int) -> DimDiscriminator:
        if not self.discriminators:
            raise ConfigError("model was built without a discriminator")
        return self.discriminators[0 if len(self.discriminators) == 1 else part]

    def named_parameters(self):
        yield from self.encoder.named_parameters()
        for k, D in enumerate(self.discriminators):
            yield from D.named_parameters(f"disc{k}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def encoder_parameters(self) -> list[Tensor]:
        return [p for _, p in self.encoder.named_parameters()]

    def discriminator_parameters(self) -> list[Tensor]:
        return [p for k, D in enumerate(self.discriminators) for _, p in D.named_parameters(f"disc{k}")]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every array that defines the model, in declaration order."""
        out = [(name, p.data) for name, p in self.named_parameters()]
        out += [(name, getattr(bn, attr)) for name, bn, attr in self.encoder.named_buffers()]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        problems = []
        own = dict(self.named_parameters())
        buffers = {name: (bn, attr) for name, bn, attr in self.encoder.named_buffers()}
        for name, arr in arrays.items():
            if name in own:
                target_shape = own[name].shape
            elif name in buffers:
                target_shape = getattr(*buffers[name]).shape
            else:
                if strict:
                    problems.append(f"{name}: not in model")
                continue
            if arr.shape != target_shape:
                problems.append(f"{name}: checkpoint {arr.shape} vs model {target_shape}")
        if strict:
            missing = (set(own) | set(buffers)) - set(arrays)
            problems += [f"{name}: missing from checkpoint" for name in sorted(missing)]
        if problems:
            raise ConfigError("architecture mismatch: " + "; ".join(problems))
        for name, arr in arrays.items():
            if name in own:
                own[name].data = np.array(arr, dtype=np.float64)
            elif name in buffers:
                bn, attr = buffers[name]
                setattr(bn, attr, np.array(arr, dtype=np.float64))

    def encode(self, x, mode: str = "eval", rng=None) -> Encoding:
        return self.encoder(nx.as_tensor(x), mode, rng)

    def discriminator_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.discriminator_parameters():
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


def build_discriminator(cfg: ModelConfig, seed: int, index: int, stream: int = 1) -> DimDiscriminator:
    return DimDiscriminator(cfg.disc_input_dim, cfg.disc_hidden, nx.make_rng(seed, stream, index))


def init_params(cfg: ModelConfig, seed: int) -> DimModel:
    """He-normal weights, zero biases; encoder and each discriminator draw
    from separate child streams of ``seed``."""
    cfg.validate()
    enc_cls = PartEncoder if cfg.architecture == "part" else GlobalEncoder
    encoder = enc_cls(cfg, nx.make_rng(seed, 0))
    discs = [build_discriminator(cfg, seed, k) for k in range(cfg.num_discriminators)]
    return DimModel(cfg, encoder, discs)


def encode_global(model: DimModel, x, mode: str, rng=None) -> Encoding:
    if model.config.architecture != "global":
        raise ConfigError("encode_global needs a global encoder")
    return model.encode(x, mode, rng)


def encode_parts(model: DimModel, x, mode: str, rng=None) -> Encoding:
    if model.config.architecture != "part":
        raise ConfigError("encode_parts needs a part encoder")
    return model.encode(x, mode, rng)
