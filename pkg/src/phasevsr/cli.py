"""Command-line entry point: ``phasevsr <command> ...``.

Every command validates its inputs before writing anything, writes outputs
atomically and maps library errors to exit codes (2 config/schema, 3 data,
4 shape).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .dataio import (SPLITS, generate_phantom, list_videos, load_dataset,
                     load_video, save_video, write_volume, _atomic_write, format_annotation)
from .degrade import ALLOWED_SCALES, DegradeConfig, degrade_clip
from .errors import ConfigError, DataError, PhaseVSRError, SchemaError
from .model import AblationFlags, ModelConfig, count_params_and_fps, load_checkpoint
from .trainer import (SWEEPABLE, TrainConfig, ablation_sweep, evaluate, parameter_sweep, super_resolve_window,
                      clip_windows, train, write_report)

log = logging.getLogger("phasevsr")

_MODEL_FLAGS = [f for f in fields(ModelConfig) if f.name != "ablation"]
_TRAIN_FLAGS = list(fields(TrainConfig))
_ABLATION_FLAGS = [f.name for f in fields(AblationFlags)]


def _flag(name):
    return "--" + name.replace("_", "-")


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _opt_float(text):
    return None if str(text).lower() == "none" else float(text)


def _opt_int(text):
    return None if str(text).lower() == "none" else int(text)


_ALIASES = {"stages_omega": ["--omega"], "max_steps": ["--steps"]}

_TYPES = {"int": int, "float": float, "bool": _bool, "str": str,
          "int | None": _opt_int, "float | None": _opt_float}


def _add_config_flags(p, with_train=True):
    """One flag per config key; unset flags fall back to the config file, then defaults."""
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    g = p.add_argument_group("model")
    for f in _MODEL_FLAGS:
        g.add_argument(_flag(f.name), *_ALIASES.get(f.name, []), dest=f"model.{f.name}",
                       type=_TYPES[str(f.type)], default=None)
    for name in _ABLATION_FLAGS:
        g.add_argument(_flag(name), dest=f"ablation.{name}", type=_bool, default=None)
    if with_train:
        g = p.add_argument_group("training")
        for f in _TRAIN_FLAGS:
            g.add_argument(_flag(f.name), *_ALIASES.get(f.name, []), dest=f"train.{f.name}",
                           type=_TYPES[str(f.type)], default=None)


def _read_json(path, what):
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such {what}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: {what} must be a JSON object")
    return data


def build_configs(args):
    """Merge config file and flags into ``(ModelConfig, TrainConfig)``."""
    model_d, train_d = {}, {}
    if getattr(args, "config", None):
        data = _read_json(args.config, "config file")
        unknown = set(data) - {"model", "train"}
        if unknown:
            raise SchemaError(f"{args.config}: unknown sections {sorted(unknown)}")
        model_d = dict(data.get("model", {}))
        train_d = dict(data.get("train", {}))
    ablation = dict(model_d.pop("ablation", {}) or {})
    for key, value in vars(args).items():
        if value is None or "." not in key:
            continue
        section, name = key.split(".", 1)
        {"model": model_d, "train": train_d, "ablation": ablation}[section][name] = value
    unknown = set(ablation) - set(_ABLATION_FLAGS)
    if unknown:
        raise SchemaError(f"unknown ablation keys: {sorted(unknown)}")
    model_d["ablation"] = AblationFlags(**ablation)
    return ModelConfig.from_dict(model_d), TrainConfig.from_dict(train_d)


def _check_scale(scale):
    if scale not in ALLOWED_SCALES:
        raise ConfigError(f"scale must be one of {ALLOWED_SCALES}, got {scale}")


def _load_data(root, scale, cutoff=None, require=("train",)):
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: data directory not found")
    data = load_dataset(root, scale, cutoff)
    for split in require:
        if not data.get(split):
            raise DataError(f"{root}: no videos in split '{split}'")
    return data


class _StagedFile:
    """Write to a hidden temp path and move into place only on success."""

    def __init__(self, path):
        self.path = Path(path)
        self.tmp = self.path.with_name(f".{self.path.name}.partial")

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None and self.tmp.exists():
            self.tmp.replace(self.path)
        else:
            self.tmp.unlink(missing_ok=True)
        return False


def _write_rows(path, rows):
    payload = "".join(json.dumps(r) + "\n" for r in rows).encode()
    _atomic_write(Path(path), payload)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args):
    if args.split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    if args.videos < 1:
        raise ConfigError("--videos must be >= 1")
    made = [generate_phantom(t_cycle=args.t_cycle, n_cycles=args.cycles, H=args.size, W=args.size,
                             ed=args.ed, es=args.es, rng_seed=args.seed + k, split=args.split, drift=args.drift,
                             video_id=f"{args.prefix}{args.seed + k:04d}")
            for k in range(args.videos)]
    for clip, ann in made:
        print(save_video(args.out, clip, ann))
    return 0


def cmd_degrade(args):
    _check_scale(args.scale)
    cfg = DegradeConfig(scale=args.scale, cutoff_fraction=args.cutoff)
    src = Path(args.input)
    if not src.is_dir():
        raise DataError(f"{src}: input directory not found")
    jobs = []
    for split in SPLITS:
        for path in list_videos(src, split):
            clip, ann = load_video(path)
            jobs.append((degrade_clip(clip, cfg), ann))
    if not jobs:
        raise DataError(f"{src}: no videos found")
    for lr, ann in jobs:
        print(save_video(args.out, lr, ann))
    return 0


def cmd_train(args):
    model_cfg, train_cfg = build_configs(args)
    data = _load_data(args.data, model_cfg.scale, args.cutoff)
    log_file = Path(args.log) if args.log else Path(args.out).with_suffix(".log.jsonl")
    with _StagedFile(log_file) as tmp_log, _StagedFile(args.out) as tmp_ckpt:
        result = train(model_cfg, train_cfg, data, out=tmp_ckpt, log_path=tmp_log)
    final = result.losses[-1] if result.losses else float("nan")
    print(json.dumps({"checkpoint": str(args.out), "log": str(log_file), "steps": train_cfg.max_steps,
                      "final_loss": final, "best_val_cardiac_psnr": result.best_val}))
    return 0


def cmd_eval(args):
    model, _ = load_checkpoint(args.ckpt, expected_scale=args.scale)
    data = _load_data(args.data, model.cfg.scale, args.cutoff, require=(args.split,))
    result = evaluate(model, data[args.split], clip_len=args.clip_len)
    write_report(args.report, result)
    print(json.dumps(result["summary"]))
    return 0


def cmd_infer(args):
    model, _ = load_checkpoint(args.ckpt)
    clip, ann = load_video(args.video, normalize=False)
    r = model.cfg.scale
    lr = clip.frames
    sr = np.empty((lr.shape[0], lr.shape[1] * r, lr.shape[2] * r), dtype=np.float32)
    timings = []
    for start in clip_windows(lr.shape[0], args.clip_len):
        t0 = time.perf_counter()
        window = super_resolve_window(model, lr, ann.cycle, start, args.clip_len)
        timings.append({"clip_start": start, "frames": int(window.shape[0]),
                        "seconds": time.perf_counter() - t0})
        sr[start:start + window.shape[0]] = window
        print(json.dumps(timings[-1]))
    out = Path(args.out)
    if out.suffix != ".vol":
        out = out.with_suffix(".vol")
    write_volume(out, sr)
    _atomic_write(out.with_suffix(".ann"), format_annotation(replace(ann, roi=None)).encode())
    print(json.dumps({"output": str(out), "shape": list(sr.shape),
                      "total_seconds": sum(t["seconds"] for t in timings)}))
    return 0


def cmd_ablate(args):
    model_cfg, train_cfg = build_configs(args)
    data = _load_data(args.data, model_cfg.scale, args.cutoff, require=("train", args.split))
    rows = ablation_sweep(model_cfg, train_cfg, data, eval_split=args.split, clip_len=args.eval_clip_len)
    _write_rows(args.report, rows)
    for row in rows:
        print(json.dumps({k: row[k] for k in ("row", "cardiac_psnr", "cardiac_ssim", "params")}))
    return 0


def cmd_sweep(args):
    if args.param not in SWEEPABLE:
        raise ConfigError(f"--param must be one of {SWEEPABLE}")
    model_cfg, train_cfg = build_configs(args)
    data = _load_data(args.data, model_cfg.scale, args.cutoff, require=("train", args.split))
    rows = parameter_sweep(model_cfg, train_cfg, data, args.param, args.values, eval_split=args.split,
                           clip_len=args.eval_clip_len)
    _write_rows(args.report, rows)
    for row in rows:
        print(json.dumps({k: row[k] for k in ("param", "value", "cardiac_psnr", "params")}))
    return 0


def bench_records(model, omegas=None, input_shape=(7, 32, 32), trials=5):
    """Parameter count and FPS of one set of weights at several stage counts."""
    omegas = [model.cfg.stages_omega] if not omegas else omegas
    records = []
    for omega in omegas:
        if omega < 0:
            raise ConfigError(f"omega must be >= 0, got {omega}")
        model.cfg = replace(model.cfg, stages_omega=int(omega))
        params, fps = count_params_and_fps(model.cfg, input_shape, trials, model=model)
        records.append({"params": params, "fps": fps, "omega": int(omega), "scale": model.cfg.scale})
    return records


def cmd_bench(args):
    model, _ = load_checkpoint(args.ckpt)
    records = bench_records(model, args.omega, tuple(args.clip_shape), args.trials)
    _write_rows(args.out, records)
    for rec in records:
        print(json.dumps(rec))
    return 0


# ---------------------------------------------------------------------------
# plotting

_REQUIRED = {
    "clip": ("video_id", "cardiac_psnr"),
    "summary": ("cardiac_psnr",),
    "sweep": ("param", "value", "cardiac_psnr"),
    "ablation": ("row", "cardiac_psnr"),
}
_BENCH_KEYS = {"params", "fps", "omega", "scale"}


def read_report(path) -> list:
    """Parse a JSON-lines report; malformed lines raise SchemaError naming the line."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such report")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
        if not isinstance(row, dict):
            raise SchemaError(f"{path}:{lineno}: expected a JSON object")
        if set(row) == _BENCH_KEYS:
            row = dict(row, kind="bench")
        kind = row.get("kind")
        if kind == "bench":
            pass
        elif kind not in _REQUIRED:
            raise SchemaError(f"{path}:{lineno}: unknown record kind {kind!r}")
        else:
            missing = [k for k in _REQUIRED[kind] if k not in row]
            if missing:
                raise SchemaError(f"{path}:{lineno}: {kind} record lacks {missing}")
        for key in ("cardiac_psnr", "fps", "params"):
            if key in row and not isinstance(row[key], (int, float)):
                raise SchemaError(f"{path}:{lineno}: field {key!r} must be numeric")
        rows.append(row)
    if not rows:
        raise SchemaError(f"{path}: report is empty")
    return rows


def make_figures(rows, out_dir) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def save(fig, name):
        path = out_dir / name
        tmp = out_dir / f".{name}.partial.png"
        fig.savefig(tmp, dpi=100)
        plt.close(fig)
        tmp.replace(path)
        written.append(path)

    labels = {"warmup_n": ("update frames n", "psnr_vs_n.png"),
              "stages_omega": ("refinement stages", "psnr_vs_omega.png"),
              "fusion_halfwidth": ("fusion half-width", "psnr_vs_fusion.png")}
    for param, (xlabel, name) in labels.items():
        pts = sorted((r["value"], r["cardiac_psnr"]) for r in rows if r.get("kind") == "sweep"
                     and r["param"] == param)
        if not pts:
            continue
        fig, ax = plt.subplots(figsize=(4, 3))
        xs, ys = zip(*pts)
        ax.plot(xs, ys, "o-", label="model")
        bic = [r["bicubic_cardiac_psnr"] for r in rows if r.get("kind") == "sweep" and r["param"] == param
               and "bicubic_cardiac_psnr" in r]
        if bic:
            ax.axhline(float(np.mean(bic)), color="gray", ls="--", label="bicubic")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("CardiacPSNR (dB)")
        ax.set_xticks(xs)
        ax.legend()
        fig.tight_layout()
        save(fig, name)

    scored = [r for r in rows if r.get("kind") in ("clip", "sweep", "ablation")]
    bench = [r for r in rows if r.get("kind") == "bench"]
    if scored or bench:
        panels = int(bool(scored)) + int(bool(bench))
        fig, axes = plt.subplots(1, panels, figsize=(4.5 * panels, 3.5), squeeze=False)
        axes = list(axes[0])
        if scored:
            ax = axes.pop(0)
            xs = [r.get("params", i) for i, r in enumerate(scored)]
            ax.scatter(xs, [r["cardiac_psnr"] for r in scored])
            ax.set_xlabel("parameters" if all("params" in r for r in scored) else "record")
            ax.set_ylabel("CardiacPSNR (dB)")
        if bench:
            ax = axes.pop(0)
            ax.scatter([r["fps"] for r in bench], [r["omega"] for r in bench])
            for r in bench:
                ax.annotate(f"{r['params']:,}", (r["fps"], r["omega"]), fontsize=7)
            ax.set_xlabel("frames per second")
            ax.set_ylabel("refinement stages")
        fig.tight_layout()
        save(fig, "efficiency.png")
    return written


def cmd_plot(args):
    rows = []
    for path in args.reports:
        rows.extend(read_report(path))
    for path in make_figures(rows, args.out):
        print(path)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="phasevsr", description="Phase-aware cardiac cine super-resolution.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom-gen", help="write synthetic beating-heart videos")
    s.add_argument("--out", required=True)
    s.add_argument("--videos", type=int, default=1)
    s.add_argument("--t-cycle", type=int, default=30)
    s.add_argument("--cycles", type=int, default=2)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--ed", type=int, default=0)
    s.add_argument("--es", type=int, default=10)
    s.add_argument("--drift", type=float, default=3.0, help="rigid motion amplitude per cycle, pixels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--prefix", default="phantom_")
    s.set_defaults(func=cmd_phantom_gen)

    s = sub.add_parser("degrade", help="produce LR videos from an HR dataset")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, required=True)
    s.add_argument("--cutoff", type=float, default=None)
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("train", help="train a model on an HR dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="JSON-lines training log (default: next to the checkpoint)")
    s.add_argument("--cutoff", type=float, default=None)
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint and bicubic on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--report", required=True)
    s.add_argument("--scale", type=int, default=None)
    s.add_argument("--clip-len", type=int, default=7)
    s.add_argument("--cutoff", type=float, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="super-resolve one LR video")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--video", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--clip-len", type=int, default=7)
    s.set_defaults(func=cmd_infer)

    for name, func, helptext in (("ablate", cmd_ablate, "train and score the cumulative ablation rows"),
                                 ("sweep", cmd_sweep, "train and score one config value per run")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", required=True)
        s.add_argument("--report", required=True)
        s.add_argument("--split", default="test", choices=SPLITS)
        s.add_argument("--eval-clip-len", type=int, default=None, help="window length at evaluation")
        s.add_argument("--cutoff", type=float, default=None)
        if name == "sweep":
            s.add_argument("--param", required=True, choices=SWEEPABLE)
            s.add_argument("--values", required=True, type=int, nargs="+")
        _add_config_flags(s)
        s.set_defaults(func=func)

    s = sub.add_parser("bench", help="parameter count and inference speed")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--omega", type=int, nargs="*", help="stage counts to time with the same weights")
    s.add_argument("--clip-shape", type=int, nargs=3, default=(7, 32, 32), metavar=("T", "H", "W"))
    s.add_argument("--trials", type=int, default=5)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("plot", help="figures from eval, sweep, ablation and bench reports")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PhaseVSRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
