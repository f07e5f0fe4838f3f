"""Acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to ``RESULTS`` (echoed in the pytest
summary) before asserting. Run directly with ``python3 tests/test_acceptance.py``
to print the lines without pytest.
"""
from __future__ import annotations

import time

import numpy as np
import pytest

from dimreid import numerics as nx
from dimreid.datasets import DatasetSpec, DomainShift, synth_dataset
from dimreid.eval import (
    cmc_map,
    discrete_sampler,
    estimate_convergence,
    gaussian_jsd_oracle,
    gaussian_mi_oracle,
    gaussian_sampler,
    jsd_discrete_oracle,
)
from dimreid.eval import retrieval
from dimreid.experiments import build_config, eval_jsd, evaluate_model, held_out_features, objective_gradcheck, run_experiment
from dimreid.models import DimDiscriminator, ModelConfig, init_params
from dimreid.objectives import LN2, ObjectiveConfig, PairBatch, dim_loss, jsd_estimate, pair_random
from dimreid.training import (
    LOCAL_LR,
    TRANSFER_LR,
    TrainConfig,
    checkpoint_bytes,
    checkpoint_from_bytes,
    tf_dim,
    train_global_dim,
    train_local_dim,
    transfer_model,
)

from test_eval import brute_force, random_instance

RESULTS: list[str] = []
SEEDS = range(5)


def record(number: int, ok: bool, text: str) -> None:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'} [{number}] {text}")
    print(RESULTS[-1])
    assert ok, text


def test_1_estimator_discrete():
    joint = np.array([[0.4, 0.1], [0.1, 0.4]])
    oracle = jsd_discrete_oracle(joint)
    t0 = time.perf_counter()
    rep = estimate_convergence(discrete_sampler(joint), oracle, steps=2000, batch=256, seed=0)
    elapsed = time.perf_counter() - t0
    ok = not rep.failed and rep.gap <= 0.02 and elapsed < 60
    record(
        1,
        ok,
        f"discrete estimator: estimate {rep.final_estimate:.5f} vs oracle {oracle:.5f}, "
        f"gap {rep.gap:.5f} (<= 0.02), {elapsed:.1f}s (< 60s)",
    )


def test_2_estimator_gaussian_ordering():
    rhos = (0.0, 0.3, 0.6, 0.9)
    t0 = time.perf_counter()
    ordered, zero_ok, table = 0, True, []
    for seed in range(3):
        est = [estimate_convergence(gaussian_sampler(r), steps=2000, batch=256, seed=seed).final_estimate for r in rhos]
        ordered += all(a < b for a, b in zip(est, est[1:]))
        zero_ok &= est[0] <= 0.02
        table.append(" ".join(f"{e:.4f}" for e in est))
    elapsed = time.perf_counter() - t0
    mi = [gaussian_mi_oracle(r) for r in rhos]
    jsd = [gaussian_jsd_oracle(r) for r in rhos]
    mi_ordered = all(a < b for a, b in zip(mi, mi[1:])) and all(a < b for a, b in zip(jsd, jsd[1:]))
    ok = ordered == 3 and zero_ok and mi_ordered and elapsed < 180
    record(
        2,
        ok,
        f"gaussian ordering over rho {rhos}: strictly ordered in {ordered}/3 seeds, rho=0 <= 0.02: {zero_ok}, "
        f"MI oracle ordered: {mi_ordered}; estimates per seed [{'; '.join(table)}], "
        f"exact JSD [{' '.join(f'{v:.4f}' for v in jsd)}]; {elapsed:.1f}s (< 180s)",
    )


def test_3_bound_and_identity():
    rng = np.random.default_rng(3)
    worst_jsd, worst_loss, worst_identity = -np.inf, np.inf, 0.0
    for _ in range(10_000):
        du, dz = rng.integers(1, 6, size=2)
        n = int(rng.integers(2, 17))
        D = DimDiscriminator(int(du + dz), tuple(int(h) for h in rng.integers(1, 9, size=3)), rng)
        scale = 10.0 ** rng.uniform(-1, 1.5)  # up to saturated scores
        for layer in D.layers:
            layer.weight.data *= scale
            layer.bias.data = rng.normal(0, scale, layer.bias.shape)
        pairs = pair_random(nx.Tensor(rng.standard_normal((n, du))), nx.Tensor(rng.standard_normal((n, dz))), rng)
        alpha = float(rng.uniform(0.05, 5.0))
        loss = dim_loss(D, pairs, alpha).item()
        jsd = jsd_estimate(D, pairs)
        worst_jsd = max(worst_jsd, jsd)
        worst_loss = min(worst_loss, loss)
        worst_identity = max(worst_identity, abs(loss - alpha * (2 * LN2 - 2 * jsd)))
    ok = worst_jsd <= LN2 + 1e-9 and worst_loss >= -1e-9 and worst_identity <= 1e-12
    record(
        3,
        ok,
        f"bound over 10^4 random discriminators: max jsd {worst_jsd:.6f} (<= ln2 + 1e-9), "
        f"min dim_loss {worst_loss:.3e} (>= -1e-9), identity error {worst_identity:.2e} (<= 1e-12)",
    )


def test_4_gradients():
    t0 = time.perf_counter()
    err_global = objective_gradcheck("global", seed=0, batch=4, samples=200)
    err_part = objective_gradcheck("part", seed=0, batch=4, samples=200)
    elapsed = time.perf_counter() - t0
    ok = max(err_global, err_part) <= 1e-4 and elapsed < 30
    record(
        4,
        ok,
        f"gradient check, batch 4, 200 parameters: global objective {err_global:.2e}, "
        f"part objective {err_part:.2e} (<= 1e-4), {elapsed:.1f}s (< 30s)",
    )


def test_5_global_dim_direction():
    t0 = time.perf_counter()
    base_r1, dim_r1, base_jsd, dim_jsd = [], [], [], []
    for seed in SEEDS:
        ds = synth_dataset(DatasetSpec(seed=seed))
        held = held_out_features(ds)
        for beta, r1s, jsds in ((0.0, base_r1, base_jsd), (0.02, dim_r1, dim_jsd)):
            ckpt, _ = train_global_dim(ds, TrainConfig(seed=seed, objective=ObjectiveConfig(beta=beta)))
            r1s.append(100 * evaluate_model(ckpt.model, ds).rank_k[1])
            jsds.append(eval_jsd(ckpt.model, held, seed))
    elapsed = time.perf_counter() - t0
    mb, md = float(np.mean(base_r1)), float(np.mean(dim_r1))
    jb, jd = float(np.mean(base_jsd)), float(np.mean(dim_jsd))
    ok = md >= mb - 0.5 and jd > jb and elapsed < 600
    record(
        5,
        ok,
        f"global DIM vs baseline, 5 seeds x 60 epochs: rank-1 {md:.2f} vs {mb:.2f} (>= baseline - 0.5), "
        f"eval jsd {jd:.4f} vs {jb:.4f} (strictly greater), {elapsed:.1f}s (< 600s)",
    )


def test_6_local_structure():
    shared = init_params(ModelConfig(architecture="part"), 0)
    split = init_params(ModelConfig(architecture="part", share_discriminators=False), 0)
    d_size = shared.discriminators[0].num_parameters()
    count_ok = split.num_parameters() - shared.num_parameters() == (6 - 1) * d_size

    ds = synth_dataset(DatasetSpec(seed=0))
    cfg = TrainConfig(base_lr=LOCAL_LR, objective=ObjectiveConfig(lam=0.0))
    mcfg = dict(input_dim=32, num_identities=50, architecture="part")
    a, ha = train_local_dim(ds, cfg, ModelConfig(**mcfg))
    b, hb = train_local_dim(ds, cfg, ModelConfig(**mcfg, with_discriminator=False))
    enc = lambda m: [x for n, x in m.state_arrays() if n.startswith("encoder.")]
    bitmatch = ha.to_csv() == hb.to_csv() and all(np.array_equal(x, y) for x, y in zip(enc(a.model), enc(b.model)))

    model = init_params(ModelConfig(architecture="part"), 0)
    head0 = {n.split(".", 2)[2]: x for n, x in model.state_arrays() if n.startswith("encoder.head0.")}
    model.load_state_arrays({f"encoder.head{m}.{k}": x.copy() for m in range(6) for k, x in head0.items()}, strict=False)
    rng = np.random.default_rng(6)
    fmap = nx.Tensor(np.broadcast_to(rng.standard_normal((8, 1, 32)), (8, 12, 32)).copy())
    u = nx.reduce_mean(fmap, axis=1)
    idx = pair_random(u, u, rng).neg_index
    losses = []
    for head, stripe in zip(model.encoder.heads, model.encoder.stripes(fmap)):
        z, _ = head(stripe, "eval", None)
        losses.append(dim_loss(model.discriminator_for(0), PairBatch(u, z, nx.take_rows(u, idx), z, idx)).item())
    spread = max(losses) - min(losses)
    ok = count_ok and bitmatch and spread <= 1e-12
    record(
        6,
        ok,
        f"local structure: parameter difference {split.num_parameters() - shared.num_parameters()} "
        f"= 5 x {d_size}: {count_ok}; lambda=0 bit-matches no-discriminator run: {bitmatch}; "
        f"constant-map part loss spread {spread:.1e} (<= 1e-12)",
    )


def test_7_transfer_direction():
    t0 = time.perf_counter()
    dt, tf, rises, pairs = [], [], 0, []
    for seed in SEEDS:
        source_ds = synth_dataset(DatasetSpec(seed=seed))
        target = synth_dataset(DatasetSpec(seed=seed + 1000, domain_shift=DomainShift()))
        held = held_out_features(target)
        source, _ = train_local_dim(source_ds, TrainConfig(seed=seed, base_lr=LOCAL_LR))
        dt.append(100 * evaluate_model(source.model, target).rank_k[1])
        before = eval_jsd(transfer_model(source, target.input_dim, seed), held, seed)
        ckpt, _ = tf_dim(source, target.unlabeled("train"), TrainConfig(seed=seed, base_lr=TRANSFER_LR))
        tf.append(100 * evaluate_model(ckpt.model, target).rank_k[1])
        after = eval_jsd(ckpt.model, held, seed)
        rises += after > before
        pairs.append(f"{before:.3f}->{after:.3f}")
    elapsed = time.perf_counter() - t0
    mdt, mtf = float(np.mean(dt)), float(np.mean(tf))
    ok = mtf >= mdt - 0.5 and rises >= 4 and elapsed < 600
    record(
        7,
        ok,
        f"transfer, 5 seeds: target rank-1 TF {mtf:.2f} vs direct {mdt:.2f} (>= direct - 0.5); "
        f"jsd rose in {rises}/5 seeds (>= 4) [{', '.join(pairs)}], {elapsed:.1f}s (< 600s)",
    )


def test_8_metric_correctness():
    backends = ["python"] + (["cython"] if retrieval.BACKEND == "cython" else [])
    mismatches = 0
    rng = np.random.default_rng(8)
    for _ in range(100):
        inst = random_instance(rng)
        first, aps = brute_force(*inst)
        valid = first >= 0
        for backend in backends:
            r = cmc_map(*inst, ks=(1, 5, 10), backend=backend)
            if valid.any():
                expected = {k: float((first[valid] < k).mean()) for k in (1, 5, 10)}
                mismatches += r.rank_k != expected or r.mAP != float(aps[valid].mean())
            else:
                mismatches += r.num_queries != 0
    perfect = cmc_map([[1.0, 0.0]], [0], [0], [[1.0, 0.1], [0.0, 1.0]], [0, 1], [1, 1])
    hand = cmc_map(
        [[1.0, 0.0]], [0], [0], [[1.0, 0.0], [0.9, 0.3], [0.5, 0.8], [-1.0, 0.0]], [0, 1, 0, 1], [1, 1, 1, 1]
    )
    hand_ok = perfect.rank_k[1] == 1.0 and perfect.mAP == 1.0 and hand.mAP == (1 / 1 + 2 / 3) / 2
    ok = mismatches == 0 and hand_ok
    record(
        8,
        ok,
        f"metrics: {mismatches} mismatches against brute force on 100 instances x {'/'.join(backends)}; "
        f"hand cases rank-1 {perfect.rank_k[1]}, mAP {perfect.mAP}, AP {hand.mAP:.6f} (5/6)",
    )


def test_9_determinism_and_persistence(tmp_path):
    text = {"mode": "global_dim", "train.epochs": 6, "train.decay_epoch": 4}
    cfg = build_config(text)
    for name in ("a", "b"):
        run_experiment(cfg, tmp_path / name, log=lambda *a: None)
    metrics_same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    raw = (tmp_path / "a" / "final.ckpt").read_bytes()
    round_trip = checkpoint_bytes(checkpoint_from_bytes(raw)) == raw

    ds = synth_dataset(DatasetSpec(seed=0))
    tc = TrainConfig(epochs=10, decay_epoch=5)
    full, _ = train_global_dim(ds, tc)
    half, _ = train_global_dim(ds, tc, until_epoch=5)
    resumed, _ = train_global_dim(ds, tc, resume=checkpoint_from_bytes(checkpoint_bytes(half)))
    resume_same = checkpoint_bytes(resumed) == checkpoint_bytes(full)
    ok = metrics_same and round_trip and resume_same
    record(
        9,
        ok,
        f"determinism: metrics.csv byte-identical {metrics_same}; checkpoint round-trip bitwise {round_trip}; "
        f"resume at epoch 5 of 10 bitwise {resume_same}",
    )


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
