import math

import numpy as np
import pytest

from dimreid import numerics as nx
from dimreid.datasets import DatasetSpec, DomainShift, synth_dataset
from dimreid.models import ConfigError, ModelConfig, init_params
from dimreid.objectives import ObjectiveConfig, PairBatch, dim_loss
from dimreid.training import (
    CheckpointError,
    TrainConfig,
    checkpoint_bytes,
    checkpoint_from_bytes,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    tf_dim,
    train_global_dim,
    train_local_dim,
    transfer_model,
)

SMALL = DatasetSpec(num_identities=10, samples_per_identity=8, seed=5)


@pytest.fixture(scope="module")
def small():
    return synth_dataset(SMALL)


def short(epochs=4, **kw):
    return TrainConfig(epochs=epochs, decay_epoch=epochs // 2, batch_size=16, **kw)


def state_equal(a, b):
    return all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.state_arrays(), b.state_arrays()))


class TestSchedule:
    def test_values(self):
        cfg = TrainConfig()
        assert lr_at(cfg, 39) == 0.3
        assert lr_at(cfg, 40) == pytest.approx(0.03, rel=1e-15)
        assert lr_at(TrainConfig(decay_factor=1.0), 59) == 0.3

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=10, decay_epoch=10)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=1)
        TrainConfig(epochs=0)  # zero-epoch runs are allowed

    def test_history_lr_column(self, small):
        _, hist = train_global_dim(small, short(6))
        assert hist.column("lr") == [0.3] * 3 + [0.3 / 10] * 3
        assert hist.column("epoch") == list(range(6))


class TestGlobal:
    def test_beta_zero_leaves_discriminator(self, small):
        cfg = short(objective=ObjectiveConfig(beta=0.0))
        untouched = init_params(ModelConfig(input_dim=32, num_identities=10), cfg.seed).discriminator_hash()
        ckpt, hist = train_global_dim(small, cfg)
        assert ckpt.model.discriminator_hash() == untouched
        assert all(math.isnan(v) for v in hist.column("dim_loss"))

    def test_beta_positive_moves_discriminator(self, small):
        ckpt, _ = train_global_dim(small, short())
        fresh = init_params(ckpt.model.config, 0).discriminator_hash()
        assert ckpt.model.discriminator_hash() != fresh

    def test_deterministic(self, small):
        a, ha = train_global_dim(small, short())
        b, hb = train_global_dim(small, short())
        assert ha.to_csv() == hb.to_csv()
        assert state_equal(a.model, b.model)

    def test_jsd_rises(self):
        ds = synth_dataset(DatasetSpec())
        _, hist = train_global_dim(ds, TrainConfig())
        jsd = hist.column("jsd_estimate")
        assert len(jsd) == 60
        assert jsd[-1] > jsd[0]

    def test_labeled_sampling_runs(self, small):
        _, hist = train_global_dim(small, short(2, objective=ObjectiveConfig(sampling="labeled")))
        assert all(np.isfinite(hist.column("jsd_estimate")))

    def test_adversarial_discriminator_option(self, small):
        cooperative, _ = train_global_dim(small, short(2))
        adversarial, hist = train_global_dim(small, short(2, objective=ObjectiveConfig(adversarial_discriminator=True)))
        assert all(np.isfinite(hist.column("jsd_estimate")))
        assert adversarial.model.discriminator_hash() != cooperative.model.discriminator_hash()

    def test_architecture_guard(self, small):
        with pytest.raises(ConfigError):
            train_global_dim(small, short(), ModelConfig(architecture="part", num_identities=10))


class TestLocal:
    def test_lambda_zero_matches_no_discriminator_baseline(self, small):
        cfg = short(base_lr=0.02, objective=ObjectiveConfig(lam=0.0))
        with_d, ha = train_local_dim(small, cfg, ModelConfig(architecture="part", num_identities=10))
        plain, hb = train_local_dim(
            small, cfg, ModelConfig(architecture="part", num_identities=10, with_discriminator=False)
        )
        assert ha.to_csv() == hb.to_csv()
        enc_a = [a for n, a in with_d.model.state_arrays() if n.startswith("encoder.")]
        enc_b = [a for n, a in plain.model.state_arrays() if n.startswith("encoder.")]
        assert len(enc_a) == len(enc_b)
        assert all(np.array_equal(x, y) for x, y in zip(enc_a, enc_b))

    def test_unshared_trains(self, small):
        mcfg = ModelConfig(architecture="part", num_identities=10, share_discriminators=False)
        ckpt, hist = train_local_dim(small, short(2, base_lr=0.02), mcfg)
        assert len(ckpt.model.discriminators) == 6
        assert np.isfinite(hist.records[-1].dim_loss)

    def test_constant_map_equal_part_losses(self, rng):
        # identical heads fed identical stripes must give identical part losses
        model = init_params(ModelConfig(architecture="part"), 0)
        head0 = {n[len("encoder.head0."):]: a for n, a in model.state_arrays() if n.startswith("encoder.head0.")}
        model.load_state_arrays(
            {f"encoder.head{m}.{k}": a.copy() for m in range(6) for k, a in head0.items()}, strict=False
        )
        fmap = nx.Tensor(np.broadcast_to(rng.standard_normal((5, 1, 32)), (5, 12, 32)).copy())
        u = nx.reduce_mean(fmap, axis=1)
        idx = (np.arange(5) + 2) % 5
        losses = []
        for head, stripe in zip(model.encoder.heads, model.encoder.stripes(fmap)):
            z, _ = head(stripe, "eval", None)
            losses.append(dim_loss(model.discriminator_for(0), PairBatch(u, z, nx.take_rows(u, idx), z, idx)).item())
        assert max(losses) - min(losses) <= 1e-12


@pytest.fixture(scope="module")
def source(small):
    ckpt, _ = train_local_dim(small, short(2, base_lr=0.02))
    return ckpt


class TestTransfer:
    def test_zero_epochs_is_direct_transfer(self, source, small):
        target = synth_dataset(DatasetSpec(num_identities=10, samples_per_identity=8, seed=9, domain_shift=DomainShift()))
        ckpt, hist = tf_dim(source, target.unlabeled(), TrainConfig(epochs=0, base_lr=5e-5))
        assert len(hist) == 0
        src = {n: a for n, a in source.model.state_arrays() if n.startswith("encoder.")}
        for n, a in ckpt.model.state_arrays():
            if n.startswith("encoder."):
                assert np.array_equal(a, src[n])

    def test_discriminator_reinitialised(self, source):
        model = transfer_model(source, 32, 0)
        assert model.discriminator_hash() != source.model.discriminator_hash()

    def test_finetune_moves_encoder_without_labels(self, source, small):
        target = small.unlabeled()
        ckpt, hist = tf_dim(source, target, short(2, base_lr=5e-5))
        assert all(math.isnan(v) for v in hist.column("ce_loss"))
        assert all(np.isfinite(hist.column("jsd_estimate")))
        assert not state_equal(ckpt.model, source.model)

    def test_input_mismatch(self, source):
        with pytest.raises(ConfigError, match=r"\[\*, 32\].*\[\*, 16\]"):
            transfer_model(source, 16, 0)

    def test_requires_unlabeled(self, source, small):
        with pytest.raises(TypeError):
            tf_dim(source, small, short())


class TestCheckpoint:
    def test_round_trip_bytes(self, small, tmp_path):
        ckpt, _ = train_global_dim(small, short(2))
        path = tmp_path / "a.ckpt"
        save_checkpoint(ckpt, path)
        again = load_checkpoint(path)
        save_checkpoint(again, tmp_path / "b.ckpt")
        assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert state_equal(ckpt.model, again.model)
        assert again.epoch == 2 and again.history.to_csv() == ckpt.history.to_csv()

    def test_truncated(self, small):
        buf = checkpoint_bytes(train_global_dim(small, short(1))[0])
        for cut in (4, 30, len(buf) // 2, len(buf) - 1):
            with pytest.raises(CheckpointError, match="corrupt length"):
                checkpoint_from_bytes(buf[:cut])

    def test_bad_magic_and_trailing_bytes(self, small):
        buf = checkpoint_bytes(train_global_dim(small, short(1))[0])
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_from_bytes(b"X" + buf[1:])
        with pytest.raises(CheckpointError, match="corrupt length"):
            checkpoint_from_bytes(buf + b"\0")

    @pytest.mark.parametrize("arch", ["global", "part"])
    def test_resume_matches_uninterrupted(self, small, arch, tmp_path):
        train = train_global_dim if arch == "global" else train_local_dim
        cfg = short(6)
        full, full_hist = train(small, cfg)
        half, _ = train(small, cfg, until_epoch=3)
        save_checkpoint(half, tmp_path / "half.ckpt")
        resumed, res_hist = train(small, cfg, resume=load_checkpoint(tmp_path / "half.ckpt"))
        assert res_hist.to_csv() == full_hist.to_csv()
        assert checkpoint_bytes(resumed) == checkpoint_bytes(full)
