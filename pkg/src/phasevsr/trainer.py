"""Training loop, sliding-window inference, evaluation and sweeps."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .dataio import sample_training_example, warmup_frames
from .degrade import bicubic_resize_clip
from .errors import ConfigError, DataError, SchemaError, TrainingDivergedError
from .loss import total_loss
from .metrics import cardiac_metrics, detect_heart_roi
from .model import AblationFlags, ModelConfig, PhaseVSR, build_model, count_params, load_checkpoint, save_checkpoint
from .phase import phase_sequence

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    max_steps: int = 1000
    seed: int = 0
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_len: int = 7
    crop: int = 32
    grad_clip: float | None = None
    loss_reduction: str = "sum"
    wrap_warmup: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.clip_len < 1 or self.crop < 1:
            raise ConfigError("clip_len and crop must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    model: PhaseVSR
    log: list
    best_val: float | None = None
    best_step: int | None = None
    checkpoint: Path | None = None

    @property
    def losses(self) -> list:
        return [rec["loss"]["total"] for rec in self.log if "loss" in rec]


# ---------------------------------------------------------------------------
# batching


def make_batch(videos, cfg: ModelConfig, tcfg: TrainConfig, step: int):
    """Sample ``batch_size`` aligned clips; fully determined by (seed, step)."""
    rng = np.random.default_rng([tcfg.seed, step])
    items = []
    for _ in range(tcfg.batch_size):
        video = videos[int(rng.integers(len(videos)))]
        items.append(sample_training_example(
            video, clip_len=tcfg.clip_len, crop=tcfg.crop, rng_seed=int(rng.integers(2 ** 63)),
            warmup_n=cfg.effective_warmup, wrap=tcfg.wrap_warmup))

    def stack(get):
        return torch.from_numpy(np.stack([get(e) for e in items]))

    batch = {
        "lr": stack(lambda e: e.lr_clip.frames),
        "hr": stack(lambda e: e.hr_clip.frames),
        "phases": stack(lambda e: e.phases.as_array().astype(np.float32)),
        "warm_before": None,
        "warm_after": None,
    }
    if cfg.effective_warmup:
        batch["warm_before"] = stack(lambda e: e.warm_before)
        batch["warm_after"] = stack(lambda e: e.warm_after)
    return batch


def _first_nonfinite(out, model):
    for name, tensors in (("sr", out.sr), ("aux_f", out.aux_f), ("aux_b", out.aux_b)):
        for k, t in enumerate(tensors):
            if not torch.isfinite(t).all():
                return f"{name}[{k}]"
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            return f"parameter {name}"
        if p.grad is not None and not torch.isfinite(p.grad).all():
            return f"gradient of {name}"
    return None


# ---------------------------------------------------------------------------
# training


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: dict, out=None,
          log_path=None, eval_clip_len: int | None = None) -> TrainResult:
    """Optimise a fresh model on ``dataset['train']``.

    With a non-empty ``dataset['val']`` and ``eval_every > 0`` the model is
    scored every ``eval_every`` steps and the best CardiacPSNR weights are
    kept (and written to ``out``). Otherwise the final weights are kept.
    """
    videos = dataset.get("train") or []
    if not videos:
        raise DataError("dataset has no training videos")
    for v in videos:
        if v.scale != model_cfg.scale:
            raise ConfigError(f"video {v.video_id} is paired at scale {v.scale}, model expects {model_cfg.scale}")
    val = dataset.get("val") or []
    model = build_model(model_cfg, train_cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr,
                           betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps)
    records = []
    best_val, best_step, best_state = None, None, None
    log_fh = open(log_path, "w") if log_path else None

    def emit(rec):
        records.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec) + "\n")
            log_fh.flush()

    try:
        for step in range(train_cfg.max_steps):
            model.train()
            batch = make_batch(videos, model_cfg, train_cfg, step)
            out_ = model(batch["lr"], batch["phases"], batch["warm_before"], batch["warm_after"])
            report = total_loss(out_, batch["hr"], reduction=train_cfg.loss_reduction)
            if not math.isfinite(report.total):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}; first bad tensor: {_first_nonfinite(out_, model)}")
            opt.zero_grad(set_to_none=True)
            report.tensor.backward()
            bad = _first_nonfinite(out_, model)
            if bad:
                raise TrainingDivergedError(f"non-finite values at step {step}: {bad}")
            if train_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            emit({"step": step, "loss": report.to_dict()})

            if val and train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0:
                summary = evaluate(model, val, clip_len=eval_clip_len or train_cfg.clip_len)
                score = summary["summary"]["cardiac_psnr"]
                emit({"step": step, "val_cardiac_psnr": score})
                if best_val is None or score > best_val:
                    best_val, best_step = score, step
                    best_state = copy.deepcopy(model.state_dict())
                    if out:
                        save_checkpoint(out, model, _meta(model_cfg, train_cfg, step, score))
    finally:
        if log_fh:
            log_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    elif out:
        save_checkpoint(out, model, _meta(model_cfg, train_cfg, train_cfg.max_steps - 1, None))
    model.eval()
    return TrainResult(model, records, best_val, best_step, Path(out) if out else None)


def _meta(model_cfg, train_cfg, step, val_score):
    return {"train_cfg": train_cfg.to_dict(), "step": step, "val_cardiac_psnr": val_score,
            "budget": "desk-scale", "normalization": "per-video min-max"}


# ---------------------------------------------------------------------------
# inference and evaluation


def clip_windows(t_total: int, clip_len: int) -> list:
    """Start indices of consecutive windows covering ``[0, t_total)``.

    The last window is pulled back to end at the final frame when the video
    length is not a multiple of ``clip_len``.
    """
    if t_total <= clip_len:
        return [0]
    starts = list(range(0, t_total - clip_len + 1, clip_len))
    if starts[-1] + clip_len < t_total:
        starts.append(t_total - clip_len)
    return starts


def super_resolve_window(model: PhaseVSR, lr_frames: np.ndarray, cycle, start: int, clip_len: int,
                         t_offset: int = 0, wrap: bool = True) -> np.ndarray:
    cfg = model.cfg
    window = lr_frames[start:start + clip_len]
    phases = phase_sequence(cycle, t_offset + start, window.shape[0]).as_array().astype(np.float32)
    n = cfg.effective_warmup
    wb = wa = None
    if n:
        before, after = warmup_frames(lr_frames, cycle, start, window.shape[0], n, wrap=wrap)
        wb, wa = torch.from_numpy(before)[None], torch.from_numpy(after)[None]
    with torch.no_grad():
        out = model(torch.from_numpy(np.ascontiguousarray(window))[None], torch.from_numpy(phases)[None],
                    wb, wa, aux=False)
    return out.final[0].numpy()


def super_resolve_video(model: PhaseVSR, lr_frames: np.ndarray, cycle, clip_len: int = 7,
                        t_offset: int = 0, wrap: bool = True) -> np.ndarray:
    """Run the model over a whole LR video in windows of ``clip_len`` frames."""
    model.eval()
    lr_frames = np.asarray(lr_frames, dtype=np.float32)
    t_total = lr_frames.shape[0]
    r = model.cfg.scale
    out = np.empty((t_total, lr_frames.shape[1] * r, lr_frames.shape[2] * r), dtype=np.float32)
    for start in clip_windows(t_total, clip_len):
        out[start:start + clip_len] = super_resolve_window(model, lr_frames, cycle, start, clip_len, t_offset, wrap)
    return out


def _resolve_model(model_or_ckpt, scale):
    if isinstance(model_or_ckpt, PhaseVSR):
        if scale is not None and model_or_ckpt.cfg.scale != scale:
            raise ConfigError(f"model scale {model_or_ckpt.cfg.scale} does not match requested scale {scale}")
        return model_or_ckpt
    model, _ = load_checkpoint(model_or_ckpt, expected_scale=scale)
    return model


def evaluate(model_or_ckpt, videos, scale: int | None = None, clip_len: int = 7, wrap: bool = True) -> dict:
    """Score the model and the bicubic baseline clip by clip.

    The heart ROI is detected once per video on the full HR sequence and
    shared by both methods. Returns ``{"rows": [...], "summary": {...}}``.
    """
    model = _resolve_model(model_or_ckpt, scale)
    r = model.cfg.scale
    params = count_params(model)
    rows = []
    for video in videos:
        if video.scale != r:
            raise ConfigError(f"video {video.video_id} is paired at scale {video.scale}, model is x{r}")
        roi = detect_heart_roi(video.hr)
        lr, hr = video.lr.frames, video.hr.frames
        sr = super_resolve_video(model, lr, video.cycle, clip_len, video.hr.t_start, wrap)
        for start in clip_windows(lr.shape[0], clip_len):
            sl = slice(start, start + clip_len)
            bic = bicubic_resize_clip(lr[sl], hr.shape[1], hr.shape[2])
            m = cardiac_metrics(sr[sl], hr[sl], roi=roi, video_id=video.video_id)
            b = cardiac_metrics(bic, hr[sl], roi=roi, video_id=video.video_id)
            rows.append({
                "kind": "clip", "video_id": video.video_id, "clip_start": start, "scale": r,
                "psnr": m.psnr, "ssim": m.ssim, "cardiac_psnr": m.cardiac_psnr, "cardiac_ssim": m.cardiac_ssim,
                "bicubic_psnr": b.psnr, "bicubic_ssim": b.ssim,
                "bicubic_cardiac_psnr": b.cardiac_psnr, "bicubic_cardiac_ssim": b.cardiac_ssim,
                "roi": list(roi.as_tuple()), "params": params,
            })
    if not rows:
        raise DataError("no videos to evaluate")
    keys = [k for k in rows[0] if k.endswith(("psnr", "ssim"))]
    summary = {"kind": "summary", "scale": r, "clips": len(rows), "params": params,
               "roi_method": "temporal-variance (reconstruction)"}
    summary.update({k: float(np.mean([row[k] for row in rows])) for k in keys})
    return {"rows": rows, "summary": summary}


def write_report(path, result: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w") as fh:
        for row in result["rows"]:
            fh.write(json.dumps(row) + "\n")
        fh.write(json.dumps(result["summary"]) + "\n")
    tmp.replace(path)
    return path


# ---------------------------------------------------------------------------
# sweeps

ABLATION_ROWS = (
    ("baseline", AblationFlags(False, False, False, False, False)),
    ("+memory", AblationFlags(True, False, False, False, False)),
    ("+updated_memory", AblationFlags(True, True, False, False, False)),
    ("+bidirection", AblationFlags(True, True, True, False, False)),
    ("+phase_fusion", AblationFlags(True, True, True, True, False)),
    ("+residual_of_residual", AblationFlags(True, True, True, True, True)),
)


def _feature_path_params(model: PhaseVSR) -> int:
    return count_params(model) - count_params(model.upsampler) - count_params(model.extractor)


class RunCache:
    """Finished sweep runs keyed by their configs.

    Training is deterministic given the configs and the data, so a row
    requested twice (for instance the full model in several sweeps) is
    trained once. The trained models are kept for later benchmarking.
    """

    def __init__(self):
        self.rows = {}
        self.models = {}

    @staticmethod
    def key(model_cfg, train_cfg, eval_split="test", clip_len=None) -> str:
        clip_len = clip_len or train_cfg.clip_len
        return json.dumps([model_cfg.to_dict(), train_cfg.to_dict(), eval_split, clip_len], sort_keys=True)

    def model(self, model_cfg, train_cfg, eval_split="test", clip_len=None):
        return self.models.get(self.key(model_cfg, train_cfg, eval_split, clip_len))

    def __len__(self):
        return len(self.rows)


def _run_row(model_cfg, train_cfg, dataset, eval_split, clip_len, cache=None):
    key = RunCache.key(model_cfg, train_cfg, eval_split, clip_len)
    if cache is not None and key in cache.rows:
        return dict(cache.rows[key])
    result = train(model_cfg, train_cfg, dataset)
    summary = evaluate(result.model, dataset[eval_split], clip_len=clip_len)["summary"]
    row = {
        "cardiac_psnr": summary["cardiac_psnr"], "cardiac_ssim": summary["cardiac_ssim"],
        "psnr": summary["psnr"], "ssim": summary["ssim"],
        "bicubic_cardiac_psnr": summary["bicubic_cardiac_psnr"],
        "params": count_params(result.model), "feature_path_params": _feature_path_params(result.model),
        "final_loss": result.losses[-1] if result.losses else None,
    }
    if cache is not None:
        cache.rows[key] = dict(row)
        cache.models[key] = result.model
    return row


def ablation_sweep(base_cfg: ModelConfig, train_cfg: TrainConfig, dataset: dict, eval_split: str = "test",
                   clip_len: int | None = None, cache: RunCache | None = None) -> list:
    """Train the cumulative toggle rows under one seed and budget."""
    rows = []
    for name, flags in ABLATION_ROWS:
        cfg = replace(base_cfg, ablation=copy.copy(flags))
        log.info("ablation row %s", name)
        row = {"kind": "ablation", "row": name, **asdict(flags), "warmup_n": base_cfg.warmup_n,
               "stages_omega": base_cfg.stages_omega}
        row.update(_run_row(cfg, train_cfg, dataset, eval_split, clip_len or train_cfg.clip_len, cache))
        rows.append(row)
    return rows


SWEEPABLE = ("warmup_n", "stages_omega", "fusion_halfwidth")


def parameter_sweep(base_cfg: ModelConfig, train_cfg: TrainConfig, dataset: dict, param: str, values,
                    eval_split: str = "test", clip_len: int | None = None, cache: RunCache | None = None) -> list:
    """Train and score one model per value of ``param``, all else fixed.

    Runs share the seed, so the initial weights (parameter count does not
    depend on the swept values) and the batch sequence are paired.
    """
    if param not in SWEEPABLE:
        raise ConfigError(f"can only sweep {SWEEPABLE}, got {param!r}")
    rows = []
    for value in values:
        cfg = replace(base_cfg, **{param: int(value)})
        log.info("sweep %s=%s", param, value)
        row = {"kind": "sweep", "param": param, "value": int(value), "scale": cfg.scale}
        row.update(_run_row(cfg, train_cfg, dataset, eval_split, clip_len or train_cfg.clip_len, cache))
        rows.append(row)
    return rows
