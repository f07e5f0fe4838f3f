"""Experiment configs, the run/sweep/export pipelines, and their artifacts.

Config files are flat ``key = value`` lines with dotted sections, e.g.::

    mode = global_dim
    dataset.num_identities = 50
    train.epochs = 60
    objective.beta = 0.02

Unknown keys are rejected with the offending line number.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datasets import Dataset, DatasetSpec, DomainShift, load_dataset, save_dataset, synth_dataset
from .eval import cmc_map, discrete_sampler, estimate_convergence, gaussian_sampler, jsd_discrete_oracle
from .eval.retrieval import EvalResult
from .models import DimModel, ModelConfig
from .objectives import ObjectiveConfig, PairBatch, jsd_estimate, pair_random
from .training import (
    GLOBAL_LR,
    LOCAL_LR,
    TRANSFER_LR,
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    tf_dim,
    train_global_dim,
    train_local_dim,
    transfer_model,
)

MODES = ("global_dim", "local_dim", "tf_dim", "estimator_bench", "baseline")
METRICS_FILE = "metrics.csv"
REPORT_FILE = "result.json"
CKPT_FILE = "final.ckpt"
DATASET_FILE = "dataset.csv"


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


_SCHEMA = {
    "mode": str,
    "output_dir": str,
    "source_checkpoint": str,
    "dataset.path": str,
    "dataset.num_identities": int,
    "dataset.samples_per_identity": int,
    "dataset.num_cameras": int,
    "dataset.input_dim": int,
    "dataset.cluster_spread": float,
    "dataset.camera_offset_scale": float,
    "dataset.seed": int,
    "dataset.shift.rotation_angle": float,
    "dataset.shift.mean_shift": float,
    "dataset.shift.spread_scale": float,
    "model.architecture": str,
    "model.backbone_hidden": int,
    "model.summary_dim": int,
    "model.embed_dim": int,
    "model.num_parts": int,
    "model.positions": int,
    "model.dropout": float,
    "model.disc_hidden": _int_tuple,
    "model.share_discriminators": _bool,
    "model.pair_input": str,
    "train.epochs": int,
    "train.base_lr": float,
    "train.decay_factor": float,
    "train.decay_epoch": int,
    "train.batch_size": int,
    "train.seed": int,
    "objective.alpha": float,
    "objective.beta": float,
    "objective.lambda": float,
    "objective.sampling": str,
    "objective.adversarial_discriminator": _bool,
    "estimator.steps": int,
    "estimator.batch": int,
    "estimator.lr": float,
    "estimator.joint": str,
    "estimator.rho": float,
    "estimator.eval_samples": int,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a typed flat dict."""
    values: dict = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigParseError(f"expected 'key = value', got {raw.strip()!r}", n, source)
        if key not in _SCHEMA:
            raise ConfigParseError(f"unknown key {key!r}", n, source)
        if key in values:
            raise ConfigParseError(f"duplicate key {key!r}", n, source)
        try:
            values[key] = _SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigParseError(f"bad value for {key}: {exc}", n, source) from None
    return values


@dataclass
class EstimatorSettings:
    steps: int = 2000
    batch: int = 256
    lr: float = 0.5
    joint: str = "0.4,0.1;0.1,0.4"
    rho: float | None = None
    eval_samples: int = 32768

    def joint_matrix(self) -> np.ndarray:
        return np.array([[float(v) for v in row.split(",")] for row in self.joint.split(";")])


@dataclass
class ExperimentConfig:
    mode: str
    dataset: DatasetSpec | str = field(default_factory=DatasetSpec)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"
    source_checkpoint: str | None = None
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)

    @property
    def architecture(self) -> str:
        if self.mode == "local_dim":
            return "part"
        if self.mode == "global_dim":
            return "global"
        return self.model.get("architecture", "global")

    def to_dict(self) -> dict:
        ds = self.dataset if isinstance(self.dataset, str) else self.dataset.to_dict()
        return {
            "mode": self.mode,
            "dataset": ds,
            "model": dict(self.model, architecture=self.architecture),
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
            "source_checkpoint": self.source_checkpoint,
            "estimator": vars(self.estimator).copy(),
        }


def build_config(values: dict, source: str = "<config>") -> ExperimentConfig:
    """Resolve a parsed flat dict into an :class:`ExperimentConfig`, filling
    mode-dependent defaults."""

    def section(prefix: str) -> dict:
        return {k[len(prefix) :]: v for k, v in values.items() if k.startswith(prefix)}

    mode = values.get("mode")
    if mode not in MODES:
        raise ConfigParseError(f"mode must be one of {', '.join(MODES)}; got {mode!r}", None, source)
    try:
        if "dataset.path" in values:
            dataset: DatasetSpec | str = values["dataset.path"]
        else:
            ds = {k: v for k, v in section("dataset.").items() if not k.startswith("shift.")}
            shift = section("dataset.shift.")
            dataset = DatasetSpec(**ds, domain_shift=DomainShift(**shift) if shift else None)
        obj = section("objective.")
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        train = section("train.")
        if "base_lr" not in train:
            train["base_lr"] = {"local_dim": LOCAL_LR, "tf_dim": TRANSFER_LR}.get(mode, GLOBAL_LR)
            if mode == "baseline" and values.get("model.architecture") == "part":
                train["base_lr"] = LOCAL_LR
        if mode == "baseline":
            obj["beta"], obj["lam"] = 0.0, 0.0
        train_cfg = TrainConfig(**train, objective=ObjectiveConfig(**obj))
        model = section("model.")
        if mode in ("global_dim", "local_dim") and "architecture" in model:
            want = "part" if mode == "local_dim" else "global"
            if model["architecture"] != want:
                raise ValueError(f"mode {mode} requires model.architecture = {want}")
        estimator = EstimatorSettings(**section("estimator."))
    except (TypeError, ValueError) as exc:
        raise ConfigParseError(str(exc), None, source) from None
    cfg = ExperimentConfig(
        mode=mode,
        dataset=dataset,
        model=model,
        train=train_cfg,
        output_dir=values.get("output_dir", "runs/default"),
        source_checkpoint=values.get("source_checkpoint"),
        estimator=estimator,
    )
    if mode == "tf_dim" and not cfg.source_checkpoint:
        raise ConfigParseError("tf_dim mode requires source_checkpoint", None, source)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return build_config(parse_config_text(path.read_text(), str(path)), str(path))


# ----------------------------------------------------------------------------
# evaluation helpers
# ----------------------------------------------------------------------------


def evaluate_model(model: DimModel, dataset: Dataset) -> EvalResult:
    """CMC/mAP of eval-mode embeddings, query split against gallery split."""
    q, g = dataset.subset("query"), dataset.subset("gallery")
    return cmc_map(
        model.encode(q.features).embedding, q.ids, q.cams, model.encode(g.features).embedding, g.ids, g.cams
    )


def eval_jsd(model: DimModel, features: np.ndarray, seed: int = 0) -> float:
    """Mean over parts of the model's own Jensen-Shannon estimate on
    eval-mode encodings, with a fixed random pairing."""
    if not model.discriminators:
        return float("nan")
    with nx.no_tape():
        enc = model.encode(features)
        side = enc.u if model.config.pair_input == "summary" else enc.z[0]
        idx = pair_random(side, enc.z[0], nx.make_rng(seed, 9)).neg_index
        vals = []
        for m, z in enumerate(enc.z):
            u = enc.u if model.config.pair_input == "summary" else z
            vals.append(jsd_estimate(model.discriminator_for(m), PairBatch(u, z, nx.take_rows(u, idx), z, idx)))
    return float(np.mean(vals))


def held_out_features(dataset: Dataset) -> np.ndarray:
    return dataset.features[dataset.split != "train"]


def resolve_dataset(cfg: ExperimentConfig) -> Dataset:
    if isinstance(cfg.dataset, str):
        return load_dataset(cfg.dataset)
    return synth_dataset(cfg.dataset)


def model_config_for(cfg: ExperimentConfig, dataset: Dataset) -> ModelConfig:
    extra = {k: v for k, v in cfg.model.items() if k != "architecture"}
    return ModelConfig(
        input_dim=dataset.input_dim,
        num_identities=dataset.num_identities,
        architecture=cfg.architecture,
        **extra,
    )


# ----------------------------------------------------------------------------
# pipelines
# ----------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir=None, log=print) -> dict:
    """Execute ``cfg.mode``; write metrics.csv, result.json and final.ckpt."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report: dict = {"mode": cfg.mode, "seed": cfg.train.seed}

    if cfg.mode == "estimator_bench":
        report.update(_run_estimator(cfg, out))
    else:
        dataset = resolve_dataset(cfg)
        digest = save_dataset(dataset, out / DATASET_FILE)
        report.update(dataset_hash=digest, dataset_difficulty=dataset.difficulty)
        mcfg = model_config_for(cfg, dataset)
        if cfg.mode == "tf_dim":
            source = load_checkpoint(cfg.source_checkpoint)
            before = transfer_model(source, dataset.input_dim, cfg.train.seed)
            report["direct_transfer"] = evaluate_model(source.model, dataset).to_record()
            report["jsd_before"] = eval_jsd(before, held_out_features(dataset), cfg.train.seed)
            ckpt, history = tf_dim(source, dataset.unlabeled("train"), cfg.train)
            report["jsd_after"] = eval_jsd(ckpt.model, held_out_features(dataset), cfg.train.seed)
        elif cfg.architecture == "part":
            ckpt, history = train_local_dim(dataset, cfg.train, mcfg)
        else:
            ckpt, history = train_global_dim(dataset, cfg.train, mcfg)
        report["eval"] = evaluate_model(ckpt.model, dataset).to_record()
        report["eval_jsd_estimate"] = eval_jsd(ckpt.model, held_out_features(dataset), cfg.train.seed)
        report["num_parameters"] = ckpt.model.num_parameters()
        report["discriminator_hash"] = ckpt.model.discriminator_hash()
        ckpt.meta.update(mode=cfg.mode, dataset_hash=digest)
        save_checkpoint(ckpt, out / CKPT_FILE)
        (out / METRICS_FILE).write_text(history.to_csv())
        log(f"[{cfg.mode}] rank1={report['eval']['rank1']:.4f} mAP={report['eval']['mAP']:.4f}")

    report["config"] = cfg.to_dict()
    report["wall_time_s"] = time.perf_counter() - t0
    (out / REPORT_FILE).write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default))
    return report


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj)}")


def _run_estimator(cfg: ExperimentConfig, out: Path) -> dict:
    est = cfg.estimator
    if est.rho is not None:
        from .eval import gaussian_jsd_oracle, gaussian_mi_oracle

        sampler = gaussian_sampler(est.rho)
        oracle = gaussian_jsd_oracle(est.rho)
        extra = {"gaussian_mi": gaussian_mi_oracle(est.rho)}
    else:
        joint = est.joint_matrix()
        sampler = discrete_sampler(joint)
        oracle = jsd_discrete_oracle(joint)
        extra = {}
    rep = estimate_convergence(
        sampler, oracle, steps=est.steps, batch=est.batch, lr=est.lr, seed=cfg.train.seed, eval_samples=est.eval_samples
    )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "ce_loss", "dim_loss", "jsd_estimate", "lr"])
    for k, j in enumerate(rep.trace):
        w.writerow([k, "nan", repr(2 * math.log(2) - 2 * j), repr(j), repr(est.lr)])
    (out / METRICS_FILE).write_text(buf.getvalue())
    return {"estimator": rep.to_record(), **extra}


def sweep(cfg: ExperimentConfig, param: str, values, out_dir=None, log=print) -> list[dict]:
    """One run per value of ``beta`` or ``lambda`` on a shared dataset and seed."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if param not in ("beta", "lambda"):
        raise ValueError("sweep parameter must be 'beta' or 'lambda'")
    if cfg.mode not in ("global_dim", "local_dim"):
        raise ValueError(f"cannot sweep {param} in mode {cfg.mode}")
    if (param == "beta") != (cfg.architecture == "global"):
        raise ValueError(f"{param} does not apply to mode {cfg.mode}")
    out = Path(out_dir or cfg.output_dir)
    rows = []
    for v in values:
        obj = replace(cfg.train.objective, **({"beta": v} if param == "beta" else {"lam": v}))
        sub = replace(cfg, train=replace(cfg.train, objective=obj))
        rep = run_experiment(sub, out / f"{param}_{v!r}", log=log)
        rows.append(
            {
                param: v,
                "rank1": rep["eval"]["rank1"],
                "mAP": rep["eval"]["mAP"],
                "dataset_hash": rep["dataset_hash"],
            }
        )
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=[param, "rank1", "mAP", "dataset_hash"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(buf.getvalue())
    return rows


def export_embeddings(ckpt_path, dataset_path, out_path) -> int:
    """Write eval-mode embeddings (parts concatenated) as CSV; returns rows."""
    ckpt = load_checkpoint(ckpt_path)
    ds = load_dataset(dataset_path)
    if ds.input_dim != ckpt.model.config.input_dim:
        raise ValueError(
            f"architecture mismatch: checkpoint expects input dim {ckpt.model.config.input_dim}, "
            f"dataset has {ds.input_dim}"
        )
    emb = ckpt.model.encode(ds.features).embedding
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample", "identity", "camera", "split"] + [f"e{j}" for j in range(emb.shape[1])])
    for i in range(len(ds)):
        w.writerow([i, int(ds.ids[i]), int(ds.cams[i]), ds.split[i]] + [repr(float(v)) for v in emb[i]])
    Path(out_path).write_text(buf.getvalue())
    return len(ds)


def read_embeddings(path):
    """Inverse of :func:`export_embeddings`: (ids, cams, split, embeddings)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = np.array([int(r[1]) for r in rows])
    cams = np.array([int(r[2]) for r in rows])
    split = np.array([r[3] for r in rows])
    emb = np.array([[float(v) for v in r[4:]] for r in rows])
    return ids, cams, split, emb


def objective_gradcheck(
    architecture: str = "global",
    seed: int = 0,
    batch: int = 4,
    samples: int = 200,
    eps: float = 1e-5,
    weight: float | None = None,
    return_details: bool = False,
    **model_overrides,
):
    """Finite-difference check of the full combined objective (cross-entropy
    plus weighted DIM loss) on one random batch, dropout frozen."""
    from .eval import gradient_check
    from .models import init_params
    from .objectives import cross_entropy, global_objective, local_objective, make_pairs, part_cross_entropy, dim_loss

    cfg = ModelConfig(architecture=architecture, **model_overrides)
    model = init_params(cfg, seed)
    data_rng = nx.make_rng(seed, 4)
    x = data_rng.standard_normal((batch, cfg.input_dim))
    y = data_rng.integers(0, cfg.num_identities, size=batch)
    if weight is None:
        weight = ObjectiveConfig().beta if architecture == "global" else ObjectiveConfig().lam

    def loss_fn():
        rng = nx.make_rng(seed, 5)
        enc = model.encode(x, "train", rng)
        pairs = make_pairs(enc.u, enc.z[0], rng)
        idx = pairs.neg_index
        dims = [
            dim_loss(model.discriminator_for(m), PairBatch(enc.u, z, nx.take_rows(enc.u, idx), z, idx))
            for m, z in enumerate(enc.z)
        ]
        if architecture == "global":
            return global_objective(cross_entropy(enc.logits[0], y), dims[0], weight)
        return local_objective(part_cross_entropy(enc.logits, y), dims, weight)

    return gradient_check(
        model, loss_fn, eps=eps, samples=samples, rng=nx.make_rng(seed, 6), return_details=return_details
    )
