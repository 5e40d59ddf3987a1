import numpy as np
import pytest

from eir.augment import AugmentPolicy, InterpolationSpec
from eir.data import SyntheticSpec, generate_synthetic
from eir.errors import ConfigError, DataError, FormatError, NumericError, VersionError
from eir.tensor import Tensor
from eir.trainer import (
    Checkpoint,
    TrainConfig,
    lr_at,
    new_state,
    sample_partners,
    sgd_update,
    train,
    train_step,
    write_metrics_csv,
)


def small_config(**kw):
    base = dict(
        epochs=3,
        batch_size=16,
        hidden_widths=(16,),
        embed_dim=8,
        lr_milestones=(2,),
        lr_factors=(0.1,),
        augment=AugmentPolicy(crop_scale=(0.5, 1.0), flip=False, grayscale=False, noise_std=0.05),
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy():
    tr, te = generate_synthetic(SyntheticSpec(num_classes=4, samples_per_class=12, dim=10, separation=0.4, seed=2))
    return tr, te


class TestSgd:
    def test_two_scalar_steps(self):
        p = {"w": Tensor(np.array([1.0]))}
        vel = {}
        sgd_update(p, {"w": np.array([0.5])}, vel, 0.1, 0.9, 0.01)
        # vel = 0.5 + 0.01 = 0.51, p = 1 - 0.051
        assert abs(p["w"].data[0] - 0.949) < 1e-12
        sgd_update(p, {"w": np.array([0.5])}, vel, 0.1, 0.9, 0.01)
        v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949
        assert abs(vel["w"][0] - v2) < 1e-12
        assert abs(p["w"].data[0] - (0.949 - 0.1 * v2)) < 1e-12

    def test_missing_grad_is_zero(self):
        p = {"w": Tensor(np.array([2.0]))}
        sgd_update(p, {}, {}, 0.1, 0.9, 0.0)
        assert p["w"].data[0] == 2.0

    def test_non_finite(self):
        with pytest.raises(NumericError):
            sgd_update({"w": Tensor(np.zeros(1))}, {"w": np.array([np.inf])}, {}, 0.1, 0.9, 0.0)


class TestSchedule:
    def test_milestones(self):
        cfg = TrainConfig()
        assert [lr_at(cfg, e) for e in (1, 119, 120, 121, 159, 160, 161, 200)] == [
            0.03, 0.03, 0.003, 0.003, 0.003, 0.0003, 0.0003, 0.0003,
        ]
        assert lr_at(cfg, 125) == 0.003 and lr_at(cfg, 165) == 0.0003

    def test_rounds_restart(self):
        cfg = TrainConfig(rounds=3)
        assert cfg.total_epochs == 600
        assert lr_at(cfg, 201) == 0.03 and lr_at(cfg, 321) == 0.003 and lr_at(cfg, 600) == 0.0003

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_milestones=(1,), lr_factors=(0.1, 0.2))
        with pytest.raises(ConfigError):
            TrainConfig(tau=0)


class TestConfig:
    def test_round_trip(self):
        cfg = small_config(interpolation=InterpolationSpec(mode="cutmix"))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="lamda1"):
            TrainConfig.from_dict({"lamda1": 3})
        with pytest.raises(ConfigError, match="augment.bogus"):
            TrainConfig.from_dict({"augment": {"bogus": 1}})

    def test_overrides(self):
        cfg = TrainConfig().with_overrides(["lambda1=0", "interpolation.mode=cutmix", "hidden_widths=[8, 4]"])
        assert cfg.lambda1 == 0 and cfg.interpolation.mode == "cutmix" and cfg.hidden_widths == (8, 4)
        with pytest.raises(ConfigError, match="nope"):
            TrainConfig().with_overrides(["nope=1"])
        with pytest.raises(ConfigError):
            TrainConfig().with_overrides(["lambda1"])


class TestStep:
    def test_partners(self):
        rng = np.random.default_rng(0)
        for b in (2, 3, 17):
            p = sample_partners(b, rng)
            assert np.all(p != np.arange(b)) and p.min() >= 0 and p.max() < b

    def test_duplicate_indices(self, toy):
        tr, _ = toy
        st = new_state(small_config(), tr.samples)
        with pytest.raises(DataError):
            train_step(st, tr.samples[[0, 0, 1]], np.array([0, 0, 1]), 0.03)

    def test_loss_decreases_and_bank_unit(self, toy):
        tr, _ = toy
        cfg = small_config(batch_size=48, lambda1=0, lambda2=0)
        st = new_state(cfg, tr.samples)
        idx = np.arange(48)
        losses = [train_step(st, tr.samples, idx, 0.03).total for _ in range(50)]
        assert np.mean(losses[-5:]) < np.mean(losses[:5])
        np.testing.assert_allclose(np.linalg.norm(st.bank.bank, axis=1), 1.0, atol=1e-9)

    def test_zero_lambdas_report_but_ignore(self, toy):
        tr, _ = toy
        cfg = small_config(lambda1=0, lambda2=0)
        st = new_state(cfg, tr.samples)
        rep = train_step(st, tr.samples[:16], np.arange(16), 0.03)
        assert rep.total == rep.l_iraug and rep.l_intra >= 0 and rep.l_inter > 0


class TestTrain:
    def test_label_firewall(self, toy):
        tr, _ = toy
        with pytest.raises(TypeError):
            train(tr, small_config())

    def test_deterministic(self, toy, tmp_path):
        tr, _ = toy
        _, m1 = train(tr.unlabeled(), small_config())
        _, m2 = train(tr.unlabeled(), small_config())
        write_metrics_csv(tmp_path / "a.csv", m1)
        write_metrics_csv(tmp_path / "b.csv", m2)
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert [m.lr for m in m1] == [0.03, 0.003, 0.003]

    def test_seed_matters(self, toy):
        tr, _ = toy
        _, m1 = train(tr.unlabeled(), small_config())
        _, m2 = train(tr.unlabeled(), small_config(seed=1))
        assert m1[0].total != m2[0].total

    def test_resume_matches(self, toy, tmp_path):
        tr, _ = toy
        full, mfull = train(tr.unlabeled(), small_config())
        half, _ = train(tr.unlabeled(), small_config(), stop_after=1)
        half.save(tmp_path / "ck.eirc")
        resumed, mrest = train(tr.unlabeled(), small_config(), resume=Checkpoint.load(tmp_path / "ck.eirc"))
        assert [m.total for m in mrest] == [m.total for m in mfull[1:]]
        for name, t in full.params:
            np.testing.assert_array_equal(t.data, resumed.params[name].data)
        np.testing.assert_array_equal(full.bank.bank, resumed.bank.bank)

    def test_evaluator_called(self, toy):
        tr, _ = toy
        calls = []
        _, m = train(tr.unlabeled(), small_config(eval_every=2), evaluator=lambda p: calls.append(1) or 0.5)
        assert len(calls) == 2 and m[1].knn_acc == 0.5 and m[0].knn_acc is None

    def test_bank_size_mismatch(self, toy):
        tr, _ = toy
        st, _ = train(tr.unlabeled(), small_config(epochs=1))
        with pytest.raises(DataError):
            train(tr.samples[:10], small_config(epochs=2), resume=st)


class TestCheckpoint:
    def test_round_trip(self, toy, tmp_path):
        tr, _ = toy
        st, _ = train(tr.unlabeled(), small_config(epochs=1, interpolation=InterpolationSpec(mode="cutmix")))
        digest = st.save(tmp_path / "c.eirc")
        assert len(digest) == 64
        back = Checkpoint.load(tmp_path / "c.eirc")
        assert back.config == st.config and back.epoch == 1
        for name, t in st.params:
            np.testing.assert_array_equal(back.params[name].data, t.data)
        np.testing.assert_array_equal(back.params.input_mean, st.params.input_mean.astype(np.float32))
        assert back.to_bytes() == st.to_bytes()

    def test_bad_files(self, toy, tmp_path):
        tr, _ = toy
        st = new_state(small_config(), tr.samples)
        raw = st.to_bytes()
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(b"XXXX" + raw[4:])
        with pytest.raises(VersionError):
            Checkpoint.from_bytes(raw[:4] + (9).to_bytes(2, "little") + raw[6:])
        with pytest.raises(FormatError, match="byte offset"):
            Checkpoint.from_bytes(raw[:-10])

    def test_shape_mismatch(self, toy):
        tr, _ = toy
        st = new_state(small_config(), tr.samples)
        other = new_state(small_config(hidden_widths=(12,)), tr.samples)
        st.params.tensors["fc0.weight"] = other.params["fc0.weight"]
        with pytest.raises(VersionError, match="fc0.weight"):
            Checkpoint.from_bytes(st.to_bytes())
