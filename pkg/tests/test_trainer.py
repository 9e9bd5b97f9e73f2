import json

import numpy as np
import pytest

from arn_enhance import model, trainer
from arn_enhance.trainer import EpochRecord, TrainConfig, lr_at_epoch, select_checkpoint


def test_full_size_schedule():
    cfg = TrainConfig()
    assert lr_at_epoch(1, cfg) == 2e-4
    assert lr_at_epoch(33, cfg) == 2e-4
    assert lr_at_epoch(34, cfg) == pytest.approx(2e-4 * 0.1 ** (1 / 67), rel=1e-12)
    assert lr_at_epoch(100, cfg) == pytest.approx(2e-5, rel=1e-12)
    lrs = [lr_at_epoch(e, cfg) for e in range(33, 101)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    # constant ratio between consecutive decayed epochs
    ratios = np.array(lrs[1:]) / np.array(lrs[:-1])
    assert np.allclose(ratios, 0.1 ** (1 / 67), rtol=1e-12)
    with pytest.raises(ValueError):
        lr_at_epoch(0, cfg)
    with pytest.raises(ValueError):
        lr_at_epoch(101, cfg)


def test_steps_per_epoch():
    assert TrainConfig().steps_per_epoch == 9815  # ceil(157036 / 16)
    assert TrainConfig(utterances_per_epoch=32, batch_size=16).steps_per_epoch == 2


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, lr_fixed_epochs=10)
    with pytest.raises(ValueError):
        TrainConfig(lr_init=0)


def rec(e, pcm, stoi):
    return EpochRecord(e, 0.0, pcm, stoi, 1e-3, 0.0)


def test_selection():
    records = [rec(1, 0.30, 0.60), rec(2, 0.20, 0.70), rec(3, 0.25, 0.72), rec(4, 0.22, 0.65)]
    assert select_checkpoint(records, "min_pcm") == 2
    assert select_checkpoint(records, "max_stoi") == 3


def test_selection_ties_go_late():
    records = [rec(1, 0.2, 0.7), rec(2, 0.2, 0.7), rec(3, 0.3, 0.6)]
    assert select_checkpoint(records, "min_pcm") == 2
    assert select_checkpoint(records, "max_stoi") == 2


def test_selection_errors():
    with pytest.raises(ValueError, match="empty"):
        select_checkpoint([], "min_pcm")
    with pytest.raises(ValueError, match="criterion"):
        select_checkpoint([rec(1, 0, 0)], "best")


def test_selection_accepts_dicts():
    assert select_checkpoint([{"epoch": 5, "train_loss": 0, "val_pcm": 1, "val_stoi": 0, "lr": 0,
                               "wall_time": 0}], "min_pcm") == 5


TINY = dict(epochs=3, utterances_per_epoch=4, batch_size=2, utterance_len=512, lr_init=1e-3,
            lr_final=1e-4, lr_fixed_epochs=1, seed=5)
TINY_DATA = trainer.DataConfig(train_seconds=2.0, utterance_seconds=0.5, noise_seconds=1.0,
                               valid_utterances=2, valid_seconds=0.5)


def run_tiny(out_dir, **over):
    cfg = TrainConfig(**{**TINY, **over})
    src = trainer.make_source(TINY_DATA, cfg)
    return trainer.train(cfg, model.ArnConfig.toy(), src, out_dir)


def test_train_outputs_and_determinism(tmp_path):
    a = run_tiny(tmp_path / "a", keep_all=True)
    b = run_tiny(tmp_path / "b")
    assert [r.epoch for r in a.records] == [1, 2, 3]
    for ra, rb in zip(a.records, b.records):
        assert (ra.train_loss, ra.val_pcm, ra.val_stoi, ra.lr) == (rb.train_loss, rb.val_pcm, rb.val_stoi, rb.lr)
    assert (tmp_path / "a" / "last.arnc").read_bytes() == (tmp_path / "b" / "last.arnc").read_bytes()
    logged = trainer.read_log(tmp_path / "a" / trainer.LOG_NAME)
    assert [r.val_pcm for r in logged] == [r.val_pcm for r in a.records]
    assert [r.lr for r in logged] == [1e-3, pytest.approx(1e-3 * 0.1 ** 0.5), pytest.approx(1e-4)]
    for crit, name in (("min_pcm", trainer.BEST_PCM), ("max_stoi", trainer.BEST_STOI)):
        ck = model.load_checkpoint(tmp_path / "a" / name)
        assert ck.epoch == select_checkpoint(logged, crit)
        assert (tmp_path / "a" / f"epoch{ck.epoch:03d}.arnc").read_bytes() == (tmp_path / "a" / name).read_bytes()
    assert sorted(p.name for p in (tmp_path / "a" / "valid" / "noisy").iterdir()) == ["val000.wav", "val001.wav"]


def test_logged_validation_is_reproducible(tmp_path):
    res = run_tiny(tmp_path, epochs=2)
    ck = model.load_checkpoint(tmp_path / "last.arnc")
    src = trainer.persist_validation(trainer.make_source(TINY_DATA, TrainConfig(**TINY)).validation, tmp_path / "v")
    pcm, stoi = trainer.validate(ck.float_params(np.float64), ck.config, src, trainer.objective.LossConfig())
    assert pcm == res.records[-1].val_pcm and stoi == res.records[-1].val_stoi


def test_training_reduces_loss(tmp_path):
    res = run_tiny(tmp_path, epochs=4, utterances_per_epoch=16, lr_init=3e-3, lr_final=1e-3)
    losses = [r.train_loss for r in res.records]
    assert losses[-1] < losses[0]


def test_nan_aborts_and_keeps_last_checkpoint(tmp_path, monkeypatch):
    real = trainer.train_step
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 2:  # first epoch has two steps
            raise FloatingPointError("non-finite value in tanh")
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer, "train_step", flaky)
    with pytest.raises(trainer.TrainingAborted, match="epoch 2 step 0"):
        run_tiny(tmp_path)
    assert model.load_checkpoint(tmp_path / "last.arnc").epoch == 1
    assert len(trainer.read_log(tmp_path / trainer.LOG_NAME)) == 1


def test_load_config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[model]\nframe_len = 32\nhop = 8\nlatent = 32\nheads = 2\ndropout = 0.1\n"
                    "[train]\nepochs = 5\nlr_fixed_epochs = 2\nclip_norm = 1.5\ndtype = float32\n"
                    "[data]\nnoise_kinds = white, brown\n[loss]\nreduction = sum\n")
    cfg = trainer.load_config(path)
    assert cfg.model == model.ArnConfig(frame_len=32, hop=8, latent=32, heads=2, dropout=0.1)
    assert cfg.train.epochs == 5 and cfg.train.clip_norm == 1.5 and cfg.train.dtype == "float32"
    assert cfg.data.noise_kinds == ("white", "brown")
    assert cfg.loss.reduction == "sum"


def test_load_config_errors(tmp_path):
    (tmp_path / "a.ini").write_text("[model]\nwidth = 3\n")
    with pytest.raises(ValueError, match="unknown key"):
        trainer.load_config(tmp_path / "a.ini")
    (tmp_path / "b.ini").write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(ValueError, match="unknown config sections"):
        trainer.load_config(tmp_path / "b.ini")
    with pytest.raises(FileNotFoundError):
        trainer.load_config(tmp_path / "missing.ini")


def test_epoch_record_json():
    r = EpochRecord(2, 0.5, 0.25, 0.75, 1e-4, 1.5)
    assert EpochRecord(**json.loads(r.to_json())) == r
