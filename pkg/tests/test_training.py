"""Training pipeline: schedule arithmetic, checkpoints, feature cache
integrity, and short smoke runs of both stages."""

import json
import os

import numpy as np
import pytest

from mmforecast import training as T
from mmforecast.core import default_class_table
from mmforecast.data import ScenarioParams, write_dataset
from mmforecast.losses import LossWeights
from mmforecast.model import ForecastModel, ModelConfig


TINY_MODEL = dict(feature_channels=8, f2f_width=8, disc_width=8, f2f_layers=2)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("ds"))
    params = ScenarioParams(horizon=9)
    write_dataset(params, 4, 2, 2, root)
    return root


def test_cosine_schedule_endpoints():
    assert T.cosine_lr(0, 100, 4e-4, 1e-7) == 4e-4
    assert T.cosine_lr(100, 100, 4e-4, 1e-7) == 1e-7
    mid = T.cosine_lr(50, 100, 4e-4, 1e-7)
    assert mid == pytest.approx((4e-4 + 1e-7) / 2)
    # monotone decreasing
    vals = [T.cosine_lr(s, 10, 4e-4, 1e-7) for s in range(11)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        T.cosine_lr(-1, 10, 4e-4, 1e-7)
    with pytest.raises(ValueError):
        T.cosine_lr(11, 10, 4e-4, 1e-7)


def test_train_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(lr0=1e-7, lr_min=1e-7)
    with pytest.raises(ValueError):
        T.TrainConfig(stage="both")
    with pytest.raises(ValueError):
        T.TrainConfig(loss_kind="MR3")
    with pytest.raises(ValueError):
        T.TrainConfig(mr_space="pixel")
    cfg = T.TrainConfig()
    assert cfg.lr0 == 4e-4 and cfg.lr_min == 1e-7
    assert cfg.adam_beta1 == 0.9 and cfg.adam_beta2 == 0.99
    assert cfg.weights.lambda_mr == 100.0 and cfg.weights.lambda_gan == 10.0
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_derived_seeds_stable():
    a = T._derive_seed(0, 1, 2)
    b = T._derive_seed(0, 1, 2)
    c = T._derive_seed(0, 1, 3)
    assert a == b and a != c


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(**TINY_MODEL)
    model = ForecastModel(cfg=cfg, init_seed=3)
    tcfg = T.TrainConfig(epochs=2)
    path = str(tmp_path / "ck.npz")
    from mmforecast.nn import Adam
    opt = Adam(model.generator.named_params())
    opt.step({k: np.ones_like(v) for k, v in model.generator.named_params().items()})
    T.save_checkpoint(path, model, tcfg, {"g": opt}, extra={"epoch": 5})
    m2, tc2, opts, extra = T.load_checkpoint(path)
    assert extra["epoch"] == 5
    assert tc2 == tcfg
    for k, v in T._all_params(model).items():
        assert np.array_equal(T._all_params(m2)[k], v)
    assert opts["g"]["t"] == 1
    assert np.array_equal(list(opts["g"]["m"].values())[0],
                          list(opt.m.values())[0])


def test_checkpoint_version_check(tmp_path):
    cfg = ModelConfig(**TINY_MODEL)
    model = ForecastModel(cfg=cfg)
    path = str(tmp_path / "ck.npz")
    T.save_checkpoint(path, model, None)
    z = dict(np.load(path, allow_pickle=False))
    meta = json.loads(str(z["meta_json"]))
    meta["version"] = 99
    z["meta_json"] = np.array(json.dumps(meta))
    np.savez(path, **z)
    with pytest.raises(ValueError, match="version"):
        T.load_checkpoint(path)


def test_oracle_training_learns(tiny_dataset, tmp_path):
    cfg = ModelConfig(**TINY_MODEL)
    tcfg = T.TrainConfig(stage="oracle", epochs=4, batch_size=4, seed=0)
    model, best, ckpt = T.train_oracle(tiny_dataset, cfg, tcfg, str(tmp_path))
    assert os.path.exists(ckpt)
    log = open(os.path.join(str(tmp_path), "oracle_log.csv")).read().splitlines()
    assert log[0].split(",")[0] == "epoch"
    losses = [float(r.split(",")[2]) for r in log[1:]]
    assert losses[-1] < losses[0]
    assert 0.0 < best <= 1.0


def test_cache_checksum_detects_corruption(tiny_dataset, tmp_path):
    cfg = ModelConfig(**TINY_MODEL)
    model = ForecastModel(cfg=cfg)
    cache_root = str(tmp_path / "cache")
    cache = T.build_cache(tiny_dataset, model, cache_root, encoder_ckpt_hash="h",
                          splits=("train",))
    table = default_class_table()
    from mmforecast.data import iterate_split
    clip = next(iterate_split(tiny_dataset, "train", table))
    arr = cache.load("train", clip.clip_id, clip.times[0])  # verified OK
    path = cache.entry_path("train", clip.clip_id, clip.times[0])
    np.save(path, arr + 1.0)
    with pytest.raises(T.CacheError, match="checksum"):
        cache.load("train", clip.clip_id, clip.times[0])
    with pytest.raises(T.CacheError, match="missing"):
        cache.load("train", "nonexistent", 0)
    assert cache.manifest()["encoder_checkpoint_hash"] == "h"


@pytest.fixture(scope="module")
def tiny_stage1(tiny_dataset, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("stage1"))
    cfg = ModelConfig(**TINY_MODEL)
    tcfg = T.TrainConfig(stage="oracle", epochs=2, batch_size=4, seed=0)
    model, _, ckpt = T.train_oracle(tiny_dataset, cfg, tcfg, out)
    cache = T.build_cache(tiny_dataset, model, os.path.join(out, "cache"))
    return model, cache, ckpt


@pytest.mark.parametrize("loss_kind,lam_gan", [("MR1", 10.0), ("MR2", 10.0),
                                               ("MR1", 0.0), ("L2", 0.0)])
def test_f2f_smoke(tiny_dataset, tiny_stage1, tmp_path, loss_kind, lam_gan):
    model, cache, ckpt = tiny_stage1
    m2, _, _, _ = T.load_checkpoint(ckpt)
    tcfg = T.TrainConfig(stage="f2f", epochs=2, batch_size=4, seed=0,
                         loss_kind=loss_kind, k_samples=2, eval_k=2,
                         weights=LossWeights(lambda_gan=lam_gan))
    out = str(tmp_path / f"f2f_{loss_kind}_{lam_gan}")
    m2, rows, best = T.train_f2f(tiny_dataset, cache, m2, tcfg, out)
    assert os.path.exists(best)
    assert len(rows) == 2
    assert np.isfinite(rows[-1]["g_loss"])
    if lam_gan == 0.0:
        assert all(r["d_loss"] == 0.0 for r in rows)
    else:
        assert rows[-1]["d_loss"] > 0.0


def test_f2f_instance_noise_smoke(tiny_dataset, tiny_stage1, tmp_path):
    _, cache, ckpt = tiny_stage1
    m, _, _, _ = T.load_checkpoint(ckpt)
    tcfg = T.TrainConfig(stage="f2f", epochs=2, batch_size=4, seed=0,
                         loss_kind="MR1", k_samples=2, eval_k=2, d_noise0=1.0)
    _, rows, _ = T.train_f2f(tiny_dataset, cache, m, tcfg, str(tmp_path / "n"))
    assert np.isfinite(rows[-1]["g_loss"]) and rows[-1]["d_loss"] > 0.0
    with pytest.raises(ValueError, match="d_noise0"):
        T.TrainConfig(stage="f2f", d_noise0=-0.1)


def test_f2f_epoch_deterministic(tiny_dataset, tiny_stage1, tmp_path):
    _, cache, ckpt = tiny_stage1

    def run(out):
        m, _, _, _ = T.load_checkpoint(ckpt)
        tcfg = T.TrainConfig(stage="f2f", epochs=1, batch_size=4, seed=7,
                             loss_kind="MR1", k_samples=2, eval_k=2)
        _, rows, _ = T.train_f2f(tiny_dataset, cache, m, tcfg, out)
        return rows

    r1 = run(str(tmp_path / "a"))
    r2 = run(str(tmp_path / "b"))
    assert r1 == r2


def test_f2f_frozen_encoder_decoder(tiny_dataset, tiny_stage1, tmp_path):
    _, cache, ckpt = tiny_stage1
    m, _, _, _ = T.load_checkpoint(ckpt)
    enc_before = {k: v.copy() for k, v in m.encoder.named_params().items()}
    dec_before = {k: v.copy() for k, v in m.decoder.named_params().items()}
    gen_before = {k: v.copy() for k, v in m.generator.named_params().items()}
    tcfg = T.TrainConfig(stage="f2f", epochs=1, batch_size=4, seed=0,
                         loss_kind="MR1", k_samples=2, eval_k=2)
    T.train_f2f(tiny_dataset, cache, m, tcfg, str(tmp_path / "o"))
    for k, v in m.encoder.named_params().items():
        assert np.array_equal(v, enc_before[k])
    for k, v in m.decoder.named_params().items():
        assert np.array_equal(v, dec_before[k])
    assert any(not np.array_equal(v, gen_before[k])
               for k, v in m.generator.named_params().items())


def test_f2f_resume_continues(tiny_dataset, tiny_stage1, tmp_path):
    _, cache, ckpt = tiny_stage1
    m, _, _, _ = T.load_checkpoint(ckpt)
    tcfg = T.TrainConfig(stage="f2f", epochs=2, batch_size=4, seed=0,
                         loss_kind="MR1", k_samples=2, eval_k=2)
    out = str(tmp_path / "o")
    _, rows, _ = T.train_f2f(tiny_dataset, cache, m, tcfg, out)
    m2, _, _, extra = T.load_checkpoint(os.path.join(out, "f2f_last.npz"))
    assert extra["epoch"] == 1
    tcfg4 = T.TrainConfig(stage="f2f", epochs=4, batch_size=4, seed=0,
                          loss_kind="MR1", k_samples=2, eval_k=2)
    _, rows2, _ = T.train_f2f(tiny_dataset, cache, m2, tcfg4,
                              str(tmp_path / "o2"), resume_extra=extra)
    assert [r["epoch"] for r in rows2] == [2, 3]
