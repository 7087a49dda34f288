import math

import numpy as np
import pytest

from trimodal.datakit import TriModalDataset
from trimodal.errors import CheckpointFormatError, ConfigurationError, ContractError, DataError
from trimodal.trainer import (
    MAGIC,
    PHASE_RUNNERS,
    Checkpoint,
    TrainingConfig,
    finetune_audio,
    load_checkpoint,
    model_from_checkpoint,
    pretrain_standalone,
    save_checkpoint,
    train_cooperative,
    train_full,
)

FAST = dict(batch_size=4, embed_dim=8, n_bands=4, target_len=2000, epochs=1, eta0=0.01)


def cfg(phase, **kw):
    return TrainingConfig(phase=phase, **{**FAST, **kw})


def params_of(model, prefix):
    return {k: v.values.copy() for k, v in model.parameters().items() if k.startswith(prefix)}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def chain(tiny_dataset_dir):
    """standalone -> cooperative -> full on the tiny corpus, one epoch each."""
    ds = TriModalDataset(tiny_dataset_dir)
    sa = pretrain_standalone(ds, cfg("standalone"))
    coop = train_cooperative(sa.checkpoint, ds, cfg("cooperative"))
    full = train_full(coop.checkpoint, ds, cfg("full"))
    return ds, sa, coop, full


class TestConfig:
    def test_defaults_from_empty_text(self):
        c = TrainingConfig.from_text("")
        assert (c.phase, c.batch_size, c.momentum, c.weight_decay) == ("standalone", 64, 0.9, 5e-4)
        assert (c.eta0, c.gamma, c.epochs) == (1e-4, 0.95, 30)
        assert (c.p_invert, c.p_noise, c.snr_db_min, c.snr_db_max) == (0.5, 0.25, 10.0, 120.0)
        assert (c.scale_exp_min, c.scale_exp_max) == (-1.5, 1.5)

    def test_finetune_defaults(self):
        c = TrainingConfig.from_text("phase=finetune")
        assert (c.eta0, c.gamma, c.epochs) == (5e-5, 0.98, 50)

    def test_parse_and_round_trip(self):
        text = "# comment\n\nphase = full\nepochs=3\neta0=0.5\nseed=9\n"
        c = TrainingConfig.from_text(text)
        assert (c.phase, c.epochs, c.eta0, c.seed) == ("full", 3, 0.5, 9)
        assert isinstance(c.epochs, int)
        assert TrainingConfig.from_text(c.to_text()) == c

    @pytest.mark.parametrize("text", ["epochs", "bogus=1", "epochs=1\nepochs=2", "epochs=many",
                                      "phase=warmup", "batch_size=1", "eta0=0", "gamma=1.5",
                                      "p_noise=2"])
    def test_rejects(self, text):
        with pytest.raises(ConfigurationError):
            TrainingConfig.from_text(text)

    def test_phase_mismatch(self, tmp_path):
        (tmp_path / "c.cfg").write_text("phase=full\n")
        with pytest.raises(ConfigurationError):
            TrainingConfig.from_file(tmp_path / "c.cfg", phase="cooperative")
        assert TrainingConfig.from_file(tmp_path / "c.cfg", phase="full").phase == "full"
        with pytest.raises(ConfigurationError):
            TrainingConfig.from_file(tmp_path / "missing.cfg")

    def test_augment_config_mapping(self):
        a = TrainingConfig(p_noise=0.5, snr_db_min=20).augment_config(target_len=123)
        assert a.p_noise == 0.5 and a.snr_db_range == (20, 120.0) and a.target_len == 123


class TestCheckpointFormat:
    def test_round_trip(self, chain):
        ck = chain[1].checkpoint
        back = Checkpoint.from_bytes(ck.to_bytes())
        assert back.to_bytes() == ck.to_bytes()
        assert back.phase == "standalone" and back.epoch == 1 and back.complete

    def test_bad_magic(self, chain):
        data = bytearray(chain[1].checkpoint.to_bytes())
        data[0:1] = b"X"
        with pytest.raises(CheckpointFormatError) as err:
            Checkpoint.from_bytes(bytes(data))
        assert err.value.offset == 0

    @pytest.mark.parametrize("cut", [3, 20, 200, -5])
    def test_truncated(self, chain, cut):
        data = chain[1].checkpoint.to_bytes()
        with pytest.raises(CheckpointFormatError):
            Checkpoint.from_bytes(data[:cut])

    def test_trailing_bytes(self, chain):
        with pytest.raises(CheckpointFormatError, match="trailing"):
            Checkpoint.from_bytes(chain[1].checkpoint.to_bytes() + b"\0")

    def test_minimal_hand_built(self):
        ck = Checkpoint("full", 2, {"w": np.arange(6.0).reshape(2, 3)}, {}, {"TI": 1.5}, "{}", "{}")
        data = ck.to_bytes()
        assert data.startswith(MAGIC)
        back = Checkpoint.from_bytes(data)
        np.testing.assert_array_equal(back.params["w"], ck.params["w"])
        assert back.logit_scales == {"TI": 1.5}

    def test_atomic_save_and_missing_load(self, chain, tmp_path):
        path = tmp_path / "sub" / "a.ckpt"
        save_checkpoint(chain[1].checkpoint, path)
        assert load_checkpoint(path).to_bytes() == chain[1].checkpoint.to_bytes()
        assert [p.name for p in path.parent.iterdir()] == ["a.ckpt"]
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_model_rebuild_rejects_foreign_params(self, chain):
        ck = chain[1].checkpoint
        bad = Checkpoint(ck.phase, ck.epoch, {**ck.params, "extra": np.zeros(1)}, {}, ck.logit_scales,
                         ck.rng_state, ck.config_snapshot)
        with pytest.raises(CheckpointFormatError):
            model_from_checkpoint(bad)


class TestProtocol:
    def test_standalone_starts_at_label_prior(self, tiny_dataset):
        res = pretrain_standalone(tiny_dataset, cfg("standalone"), max_epochs=0)
        classes = res.checkpoint.snapshot["classes"]
        counts = np.array([sum(c in s.labels for s in tiny_dataset.samples) for c in classes])
        p = counts / len(tiny_dataset)
        np.testing.assert_allclose(res.model.audio.classifier_b.values, np.log(p / (1 - p)))
        assert res.history == []

    def test_standalone_touches_only_audio(self, chain, tiny_dataset):
        _, sa, _, _ = chain
        fresh = pretrain_standalone(tiny_dataset, cfg("standalone"), max_epochs=0).model
        assert same(params_of(fresh, "text"), params_of(sa.model, "text"))
        assert same(params_of(fresh, "image"), params_of(sa.model, "image"))
        assert not same(params_of(fresh, "audio"), params_of(sa.model, "audio"))
        rec = sa.history[0]
        assert set(rec) >= {"epoch", "lr", "loss", "map"} and math.isfinite(rec["loss"])

    def test_cooperative_swaps_classifier_and_freezes_others(self, chain):
        _, sa, coop, _ = chain
        assert "audio.classifier.weight" in sa.checkpoint.params
        assert "audio.proj" in coop.checkpoint.params
        assert "audio.classifier.weight" not in coop.checkpoint.params
        assert same(params_of(sa.model, "text"), params_of(coop.model, "text"))
        assert same(params_of(sa.model, "image"), params_of(coop.model, "image"))
        assert coop.checkpoint.logit_scales == sa.checkpoint.logit_scales
        assert set(coop.history[0]["per_pair_losses"]) == {"TI", "TA", "IA"}

    def test_full_trains_everything(self, chain):
        _, _, coop, full = chain
        for head in ("text", "image", "audio"):
            assert not same(params_of(coop.model, head), params_of(full.model, head))
        assert full.checkpoint.logit_scales != coop.checkpoint.logit_scales

    @pytest.mark.parametrize("runner,phase", [(train_cooperative, "cooperative"), (train_full, "full")])
    def test_missing_predecessor(self, tiny_dataset, runner, phase):
        with pytest.raises(ContractError):
            runner(None, tiny_dataset, cfg(phase))

    def test_wrong_predecessor(self, chain):
        ds, sa, _, _ = chain
        with pytest.raises(ContractError):
            train_full(sa.checkpoint, ds, cfg("full"))

    def test_finetune_needs_single_labels(self, chain, single_label_dir):
        ds, _, _, full = chain
        with pytest.raises(ContractError):
            finetune_audio(full.checkpoint, ds, cfg("finetune"))
        single = TriModalDataset(single_label_dir)
        res = finetune_audio(full.checkpoint, single, cfg("finetune"))
        assert same(params_of(full.model, "text"), params_of(res.model, "text"))
        assert set(res.history[0]["per_pair_losses"]) == {"TA"}

    def test_resume_is_bitwise(self, tiny_dataset):
        c = cfg("standalone", epochs=2)
        straight = pretrain_standalone(tiny_dataset, c)
        half = pretrain_standalone(tiny_dataset, c, max_epochs=1)
        assert not half.checkpoint.complete
        resumed = pretrain_standalone(tiny_dataset, c, Checkpoint.from_bytes(half.checkpoint.to_bytes()))
        assert resumed.checkpoint.to_bytes() == straight.checkpoint.to_bytes()
        assert resumed.history == straight.history[1:]

    def test_runs_are_deterministic(self, tiny_dataset, chain):
        again = pretrain_standalone(tiny_dataset, cfg("standalone"))
        assert again.checkpoint.to_bytes() == chain[1].checkpoint.to_bytes()

    def test_on_epoch_callback(self, tiny_dataset):
        seen = []
        pretrain_standalone(tiny_dataset, cfg("standalone", epochs=2),
                            on_epoch=lambda rec, ck: seen.append((rec["epoch"], ck.epoch)))
        assert seen == [(0, 1), (1, 2)]

    def test_schedule_in_history(self, tiny_dataset):
        res = pretrain_standalone(tiny_dataset, cfg("standalone", epochs=2, eta0=0.02, gamma=0.5))
        assert [r["lr"] for r in res.history] == [0.02, 0.01]

    def test_registry(self):
        assert set(PHASE_RUNNERS) == {"standalone", "cooperative", "full", "finetune"}
