import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from phasevsr import trainer
from phasevsr.dataio import generate_phantom, pair_video
from phasevsr.errors import ConfigError, DataError, SchemaError, TrainingDivergedError
from phasevsr.model import ModelConfig, build_model, load_checkpoint
from phasevsr.trainer import (ABLATION_ROWS, RunCache, TrainConfig, ablation_sweep, clip_windows, evaluate, make_batch,
                              parameter_sweep, super_resolve_video, train, write_report)

CFG = ModelConfig(scale=2, feat_channels=4, num_extract_blocks=1, warmup_n=2, stages_omega=1, fusion_halfwidth=1)
TCFG = TrainConfig(lr=1e-3, batch_size=2, max_steps=3, clip_len=3, crop=8, seed=1)


def _video(seed, split, scale=2):
    return pair_video(*generate_phantom(t_cycle=10, n_cycles=1, H=48, W=48, es=4, rng_seed=seed, split=split),
                      scale=scale)


@pytest.fixture(scope="module")
def data():
    return {"train": [_video(1, "train"), _video(2, "train")], "val": [_video(3, "val")],
            "test": [_video(4, "test")]}


def test_make_batch_shapes_and_determinism(data):
    a = make_batch(data["train"], CFG, TCFG, step=5)
    b = make_batch(data["train"], CFG, TCFG, step=5)
    c = make_batch(data["train"], CFG, TCFG, step=6)
    assert a["lr"].shape == (2, 3, 8, 8) and a["hr"].shape == (2, 3, 16, 16)
    assert a["warm_before"].shape == (2, 2, 8, 8) and a["phases"].shape == (2, 3)
    assert torch.equal(a["lr"], b["lr"]) and torch.equal(a["warm_after"], b["warm_after"])
    assert not torch.equal(a["lr"], c["lr"])


def test_batch_ignores_warmup_draws(data):
    # paired sweeps: switching warm-up off must not change which crops are drawn
    off = ModelConfig(**{**CFG.to_dict(), "warmup_n": 0})
    assert torch.equal(make_batch(data["train"], CFG, TCFG, 2)["lr"], make_batch(data["train"], off, TCFG, 2)["lr"])
    assert make_batch(data["train"], off, TCFG, 2)["warm_before"] is None


def test_zero_steps_keeps_initial_weights(data, tmp_path):
    ckpt = tmp_path / "m.pt"
    res = train(CFG, TrainConfig(**{**TCFG.to_dict(), "max_steps": 0}), {"train": data["train"]}, out=ckpt)
    init = build_model(CFG, seed=TCFG.seed).state_dict()
    loaded, meta = load_checkpoint(ckpt)
    for k, v in init.items():
        assert torch.equal(loaded.state_dict()[k], v)
    assert res.losses == [] and meta["train_cfg"]["seed"] == TCFG.seed


def test_identical_runs_identical_losses(data):
    a = train(CFG, TCFG, {"train": data["train"]})
    b = train(CFG, TCFG, {"train": data["train"]})
    assert len(a.losses) == 3
    assert a.losses == b.losses
    assert all(np.isfinite(a.losses))


def test_log_file_is_jsonl(data, tmp_path):
    path = tmp_path / "log.jsonl"
    train(CFG, TCFG, {"train": data["train"]}, log_path=path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 1, 2]
    assert set(recs[0]["loss"]) >= {"total", "per_stage"}


def test_best_val_checkpoint(data, tmp_path):
    tcfg = TrainConfig(**{**TCFG.to_dict(), "eval_every": 1})
    res = train(CFG, tcfg, data, out=tmp_path / "best.pt")
    vals = [r["val_cardiac_psnr"] for r in res.log if "val_cardiac_psnr" in r]
    assert len(vals) == 3 and res.best_val == max(vals)
    _, meta = load_checkpoint(tmp_path / "best.pt")
    assert meta["step"] == res.best_step


def test_nan_reports_first_bad_tensor(data, monkeypatch):
    def poisoned(cfg, seed=0):
        model = build_model(cfg, seed)
        with torch.no_grad():
            model.upsampler.body[-1].bias.fill_(float("nan"))
        return model

    monkeypatch.setattr(trainer, "build_model", poisoned)
    with pytest.raises(TrainingDivergedError, match=r"step 0.*sr\[0\]"):
        train(CFG, TCFG, {"train": data["train"]})


def test_train_input_errors(data):
    with pytest.raises(DataError):
        train(CFG, TCFG, {"train": []})
    with pytest.raises(ConfigError):
        train(ModelConfig(scale=4, feat_channels=4), TCFG, {"train": data["train"]})
    with pytest.raises(SchemaError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)


def test_gradient_clipping_runs(data):
    res = train(CFG, TrainConfig(**{**TCFG.to_dict(), "grad_clip": 0.5}), {"train": data["train"]})
    assert all(np.isfinite(res.losses))


def test_clip_windows_cover_video():
    for total, length in ((20, 7), (21, 7), (5, 7), (7, 7), (30, 4)):
        starts = clip_windows(total, length)
        covered = set()
        for s in starts:
            covered.update(range(s, min(s + length, total)))
        assert covered == set(range(total))
        assert all(0 <= s and (s + length <= total or total <= length) for s in starts)


def test_super_resolve_video_shape(data):
    model = build_model(CFG)
    v = data["test"][0]
    out = super_resolve_video(model, v.lr.frames, v.cycle, clip_len=3)
    assert out.shape == v.hr.frames.shape and out.dtype == np.float32


def test_evaluate_deterministic_with_bicubic_columns(data):
    model = build_model(CFG)
    a = evaluate(model, data["test"], clip_len=3)
    b = evaluate(model, data["test"], clip_len=3)
    assert a == b
    row = a["rows"][0]
    assert {"bicubic_psnr", "bicubic_ssim", "bicubic_cardiac_psnr", "bicubic_cardiac_ssim", "roi"} <= set(row)
    assert len(a["rows"]) == len(clip_windows(10, 3))
    assert a["summary"]["cardiac_psnr"] == pytest.approx(np.mean([r["cardiac_psnr"] for r in a["rows"]]))


def test_evaluate_checkpoint_round_trip(data, tmp_path):
    res = train(CFG, TCFG, {"train": data["train"]}, out=tmp_path / "m.pt")
    direct = evaluate(res.model, data["test"], clip_len=3)
    reloaded = evaluate(tmp_path / "m.pt", data["test"], clip_len=3)
    assert direct == reloaded


def test_evaluate_scale_mismatch(data):
    with pytest.raises(ConfigError):
        evaluate(build_model(CFG), data["test"], scale=4)
    with pytest.raises(ConfigError):
        evaluate(build_model(CFG), [_video(5, "test", scale=4)])


def test_write_report(data, tmp_path):
    result = evaluate(build_model(CFG), data["test"], clip_len=3)
    path = write_report(tmp_path / "r" / "eval.jsonl", result)
    lines = [json.loads(x) for x in path.read_text().splitlines()]
    assert lines[-1]["kind"] == "summary" and len(lines) == len(result["rows"]) + 1


def test_ablation_rows(data):
    tcfg = TrainConfig(**{**TCFG.to_dict(), "max_steps": 1})
    rows = ablation_sweep(CFG, tcfg, data, clip_len=3)
    assert [r["row"] for r in rows] == [name for name, _ in ABLATION_ROWS]
    assert all(np.isfinite(r["cardiac_psnr"]) for r in rows)
    # each row enables exactly one more component than the previous one
    flags = [[r[k] for k in ("memory_enabled", "warmup_enabled", "bidirectional_enabled",
                             "phase_fusion_enabled", "ror_enabled")] for r in rows]
    assert [sum(f) for f in flags] == [0, 1, 2, 3, 4, 5]
    path_params = [r["feature_path_params"] for r in rows]
    assert path_params[0] == min(path_params) and path_params[0] < path_params[-1]


def test_sweep_params_invariant_and_cache(data):
    tcfg = TrainConfig(**{**TCFG.to_dict(), "max_steps": 1})
    cache = RunCache()
    rows = parameter_sweep(CFG, tcfg, data, "stages_omega", [0, 1, 2], clip_len=3, cache=cache)
    assert len({r["params"] for r in rows}) == 1 and len(cache) == 3
    again = parameter_sweep(CFG, tcfg, data, "stages_omega", [1], clip_len=3, cache=cache)
    assert again[0]["cardiac_psnr"] == rows[1]["cardiac_psnr"] and len(cache) == 3
    model = cache.model(replace(CFG, stages_omega=1), tcfg, clip_len=3)
    assert model is not None and model.cfg.stages_omega == 1
    rows = parameter_sweep(CFG, tcfg, data, "warmup_n", [0, 2], clip_len=3)
    assert rows[0]["params"] == rows[1]["params"]
    with pytest.raises(ConfigError):
        parameter_sweep(CFG, tcfg, data, "feat_channels", [4])
