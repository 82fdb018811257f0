import json
import math
import warnings

import numpy as np
import pytest
import torch

from blurprior.checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from blurprior.model import codec_checkpoint
from blurprior.pipeline import (
    ConfigError,
    MixtureSampler,
    TrainConfig,
    TrainingDiverged,
    deblur,
    deblur_batch,
    load_pairs,
    run_bpp,
    run_finetune,
    run_mixed,
)
from blurprior.model import model_from_checkpoint
from conftest import TINY_MODEL


def cfg(stage, paths, iterations=6, **kw):
    ds = [{"path": str(p), "weight": w} for p, w in paths]
    kw.setdefault("model", TINY_MODEL)
    return TrainConfig(stage=stage, datasets=ds, iterations=iterations, batch_size=2, lr=1e-3, **kw)


# --- config ----------------------------------------------------------------------------

def test_weights_are_normalized():
    c = TrainConfig(stage="mixed", datasets=[{"path": "a", "weight": 3}, {"path": "b", "weight": 1}])
    assert [d.weight for d in c.datasets] == [0.75, 0.25]


@pytest.mark.parametrize("bad", [
    {"stage": "pretrain"},
    {"datasets": []},
    {"datasets": [{"path": "a", "weight": 0}]},
    {"iterations": 0},
    {"lr": -1.0},
    {"caption_dropout": 1.5},
    {"toggles": {"colour": False}},
    {"lr_schedule": "step"},
])
def test_invalid_configs_rejected(bad):
    base = {"stage": "bpp", "datasets": [{"path": "a", "weight": 1}]}
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({**base, **bad})


def test_unknown_field_is_config_error():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stage": "bpp", "datasets": [{"path": "a", "weight": 1}], "epochs": 3})


def test_env_seed_overrides(monkeypatch):
    monkeypatch.setenv("GLOW_SEED", "17")
    assert TrainConfig.from_dict({"stage": "bpp", "datasets": [{"path": "a", "weight": 1}], "seed": 2}).seed == 17
    monkeypatch.setenv("GLOW_SEED", "x")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"stage": "bpp", "datasets": [{"path": "a", "weight": 1}]})


def test_load_resolves_relative_paths(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"stage": "bpp", "datasets": [{"path": "d/m.json", "weight": 1}],
                                                 "codec": "codec.ckpt", "checkpoint_out": "/abs/out.ckpt"}))
    c = TrainConfig.load(tmp_path / "c.json")
    assert c.datasets[0].path == str(tmp_path / "d/m.json")
    assert c.codec == str(tmp_path / "codec.ckpt")
    assert c.checkpoint_out == "/abs/out.ckpt"


def test_schedule_defaults():
    assert cfg("bpp", [("a", 1)]).schedule_kind == "constant"
    assert cfg("finetune", [("a", 1)]).schedule_kind == "cosine"
    assert cfg("bpp", [("a", 1)], lr_schedule="cosine").schedule_kind == "cosine"


# --- sampling ------------------------------------------------------------------------

def test_mixture_sampler_matches_weights(tiny_data):
    a, b = load_pairs(tiny_data["a0"]), load_pairs(tiny_data["a90"])
    n, p = 1000, 0.3
    s = MixtureSampler([a, b], [p, 1 - p], seed=0)
    s.draw(n)
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(s.counts[0] - n * p) <= 3 * sigma
    assert sum(s.counts) == n


def test_pairs_carry_motion_targets(tiny_data):
    a = load_pairs(tiny_data["a0"])
    assert a.blurred.shape == (12, 3, 16, 16)
    m = tiny_data["manifests"][0]
    assert torch.allclose(a.motion, torch.tensor([s.trajectory_summary[:2] for s in m.samples]))


# --- training stages ------------------------------------------------------------------

def test_bpp_finetune_lineage_and_lr(tiny_data, tmp_path):
    pre = run_bpp(cfg("bpp", [(tiny_data["a0"], 1), (tiny_data["a90"], 1)],
                      checkpoint_out=str(tmp_path / "bpp.ckpt")), tiny_data["codec"])
    assert (tmp_path / "bpp.ckpt").exists()
    rec = pre.provenance[-1]
    assert rec["stage"] == "bpp" and rec["lr_schedule"] == "constant" and rec["lr_first"] == rec["lr_last"]
    assert len(rec["first_losses"]) == 6 and all(math.isfinite(x) for x in rec["first_losses"])
    assert sum(rec["sample_counts"]) == 12

    ft = run_finetune(cfg("finetune", [(tiny_data["a0"], 1)]), pre)
    assert [r["stage"] for r in ft.provenance] == ["bpp", "finetune"]
    assert ft.provenance[0] == rec
    assert ft.provenance[1]["lr_first"] == 1e-3 and ft.provenance[1]["lr_last"] < 1e-3


def test_finetune_from_file_and_warning_without_pretraining(tiny_data, tmp_path):
    mixed = run_mixed(cfg("mixed", [(tiny_data["a0"], 1), (tiny_data["a90"], 1)]), tiny_data["codec"])
    save_checkpoint(mixed, tmp_path / "m.ckpt")
    c = cfg("finetune", [(tiny_data["a0"], 1)], iterations=2, checkpoint_in=str(tmp_path / "m.ckpt"))
    with pytest.warns(UserWarning, match="pretraining"):
        out = run_finetune(c)
    assert [r["stage"] for r in out.provenance] == ["mixed", "finetune"]


def test_stage_and_toggle_mismatches(tiny_data):
    with pytest.raises(ConfigError):
        run_bpp(cfg("mixed", [(tiny_data["a0"], 1), (tiny_data["a90"], 1)]), tiny_data["codec"])
    with pytest.raises(ConfigError, match="two datasets"):
        run_mixed(cfg("mixed", [(tiny_data["a0"], 1)]), tiny_data["codec"])
    with pytest.raises(ConfigError, match="codec"):
        run_bpp(cfg("bpp", [(tiny_data["a0"], 1)]))
    pre = run_bpp(cfg("bpp", [(tiny_data["a0"], 1)], iterations=1), tiny_data["codec"])
    with pytest.raises(ConfigError, match="toggles"):
        run_finetune(cfg("finetune", [(tiny_data["a0"], 1)], toggles={"motion": False}), pre)


def test_first_losses_are_reproducible(tiny_data):
    c = cfg("bpp", [(tiny_data["a0"], 1)], iterations=10, seed=5)
    a = run_bpp(c, tiny_data["codec"]).provenance[-1]["first_losses"]
    b = run_bpp(c, tiny_data["codec"]).provenance[-1]["first_losses"]
    d = run_bpp(cfg("bpp", [(tiny_data["a0"], 1)], iterations=10, seed=6), tiny_data["codec"])
    assert a == b and len(a) == 10
    assert d.provenance[-1]["first_losses"] != a


def test_caption_dropout_rate(tiny_data):
    c = cfg("bpp", [(tiny_data["a0"], 1)], iterations=200, caption_dropout=0.5,
            model={**TINY_MODEL, "pre_restore": {"width": 4, "n_stages": 1, "shallow_feature_channels": 4}})
    c.batch_size = 1
    n = run_bpp(c, tiny_data["codec"]).provenance[-1]["null_text_steps"]
    assert abs(n - 100) <= 3 * math.sqrt(200 * 0.25)


def test_divergence_raises_and_saves_last_good(tiny_data, tmp_path):
    from blurprior.pipeline import load_pairs as lp

    bad = lp(tiny_data["a0"])
    bad.sharp[:] = float("nan")
    c = cfg("bpp", [(tiny_data["a0"], 1)], checkpoint_out=str(tmp_path / "last.ckpt"))
    with pytest.raises(TrainingDiverged, match="step 0"):
        run_bpp(c, tiny_data["codec"], [bad])
    model = model_from_checkpoint(load_checkpoint(tmp_path / "last.ckpt"))
    assert all(torch.isfinite(p).all() for p in model.parameters())


# --- inference ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_ckpt(tiny_data):
    return run_bpp(cfg("bpp", [(tiny_data["a0"], 1)], iterations=4), tiny_data["codec"])


def test_deblur_pads_odd_sizes_and_stays_in_range(tiny_ckpt):
    img = np.random.default_rng(0).random((13, 19, 3)).astype(np.float32)
    out = deblur(img, tiny_ckpt, steps=3)
    assert out.shape == img.shape
    assert out.min() >= 0 and out.max() <= 1


def test_deblur_is_deterministic_per_seed(tiny_ckpt):
    img = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    a = deblur(img, tiny_ckpt, "red ring", steps=3, seed=4)
    b = deblur(img, tiny_ckpt, "red ring", steps=3, seed=4)
    assert np.array_equal(a, b)


def test_deblur_without_text_warns_on_caption(tiny_data):
    ck = run_bpp(cfg("bpp", [(tiny_data["a0"], 1)], iterations=2, toggles={"text": False}), tiny_data["codec"])
    model = model_from_checkpoint(ck)
    x = torch.rand(1, 3, 16, 16)
    with pytest.warns(UserWarning, match="caption ignored"):
        with_caption = deblur_batch(model, x, ["a caption"], steps=2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert torch.equal(with_caption, deblur_batch(model, x, None, steps=2))


def test_codec_checkpoint_on_disk_is_accepted(tiny_data, tmp_path):
    path = save_checkpoint(codec_checkpoint(tiny_data["codec"]), tmp_path / "codec.ckpt")
    c = cfg("bpp", [(tiny_data["a0"], 1)], iterations=1, codec=str(path))
    ck = run_bpp(c)
    assert ck.meta["codec_config"]["f"] == 4
    assert len(checkpoint_hash(path)) == 64
