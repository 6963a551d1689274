"""Dataset layout, clip I/O, paired LR/HR sampling and the beating-heart phantom.

On disk a video is ``<root>/<split>/<video_id>.vol`` plus a sidecar
``<video_id>.ann``. The ``.vol`` file is three little-endian int64 dims
(T, H, W) followed by T*H*W little-endian float32 values in C order. The
``.ann`` file holds ``key=value`` lines; ``ed``, ``es`` and ``t_cycle`` are
required.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, shift

from .degrade import DegradeConfig, degrade_clip
from .errors import ConfigError, DataError, SchemaError, ShapeError
from .metrics import RoiBox
from .phase import CardiacCycleSpec, PhaseCodeSequence, phase_at, phase_sequence

SPLITS = ("train", "val", "test")
VOL_SUFFIX = ".vol"
ANN_SUFFIX = ".ann"
_HEADER = np.dtype("<i8")
_PIXEL = np.dtype("<f4")


@dataclass
class VideoClip:
    frames: np.ndarray
    t_start: int = 0
    spacing: tuple | None = None

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ShapeError(f"frames must be T x H x W, got shape {self.frames.shape}")
        t, h, w = self.frames.shape
        if t < 1:
            raise ShapeError("a clip needs at least one frame")
        if h < 8 or w < 8:
            raise ShapeError(f"frames must be at least 8x8, got {h}x{w}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("clip contains non-finite pixels")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def intensity_range(self) -> tuple:
        return float(self.frames.min()), float(self.frames.max())

    def __len__(self):
        return self.num_frames


@dataclass
class AnnotationRecord:
    cycle: CardiacCycleSpec
    video_id: str
    split: str = "train"
    roi: RoiBox | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SchemaError(f"split must be one of {SPLITS}, got {self.split!r}")


def normalize_minmax(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    lo, hi = frames.min(), frames.max()
    if hi == lo:
        return np.zeros_like(frames)
    return (frames - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# container format


def _atomic_write(path: Path, payload: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(path, frames: np.ndarray):
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ShapeError(f"volume must be T x H x W, got shape {frames.shape}")
    header = np.asarray(frames.shape, dtype=_HEADER).tobytes()
    _atomic_write(Path(path), header + np.ascontiguousarray(frames, dtype=_PIXEL).tobytes())


def read_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 3 * _HEADER.itemsize:
        raise SchemaError(f"{path}: truncated header")
    dims = np.frombuffer(raw[: 3 * _HEADER.itemsize], dtype=_HEADER)
    if np.any(dims < 1):
        raise SchemaError(f"{path}: invalid dims {dims.tolist()}")
    body = raw[3 * _HEADER.itemsize:]
    expected = int(np.prod(dims)) * _PIXEL.itemsize
    if len(body) != expected:
        raise SchemaError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=_PIXEL).reshape(tuple(int(d) for d in dims)).copy()


_ROI_KEYS = ("roi_top", "roi_left", "roi_height", "roi_width")


def format_annotation(ann: AnnotationRecord) -> str:
    lines = [
        f"ed={ann.cycle.ed}",
        f"es={ann.cycle.es}",
        f"t_cycle={ann.cycle.t_cycle}",
        f"video_id={ann.video_id}",
        f"split={ann.split}",
    ]
    if ann.roi is not None:
        lines += [f"{k}={v}" for k, v in zip(_ROI_KEYS, ann.roi.as_tuple())]
    lines += [f"{k}={v}" for k, v in sorted(ann.extra.items())]
    return "\n".join(lines) + "\n"


def parse_annotation(text: str, video_id: str | None = None, split: str | None = None,
                     source: str = "<annotation>") -> AnnotationRecord:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SchemaError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()

    cycle_args = {}
    for key in ("ed", "es", "t_cycle"):
        if key not in values:
            raise SchemaError(f"{source}: missing required key {key!r}")
        try:
            cycle_args[key] = int(values.pop(key))
        except ValueError:
            raise SchemaError(f"{source}: key {key!r} must be an integer") from None
    try:
        cycle = CardiacCycleSpec(**cycle_args)
    except ConfigError as exc:
        raise SchemaError(f"{source}: {exc}") from None

    roi = None
    if any(k in values for k in _ROI_KEYS):
        try:
            roi = RoiBox(*(int(values.pop(k)) for k in _ROI_KEYS))
        except KeyError as exc:
            raise SchemaError(f"{source}: incomplete ROI, missing {exc.args[0]!r}") from None
    vid = values.pop("video_id", None) or video_id
    if vid is None:
        raise SchemaError(f"{source}: missing video_id")
    sp = values.pop("split", None) or split or "test"
    return AnnotationRecord(cycle=cycle, video_id=vid, split=sp, roi=roi, extra=values)


def save_video(root, clip: VideoClip, ann: AnnotationRecord) -> Path:
    """Write ``clip`` and its annotation under ``root/<split>/``."""
    folder = Path(root) / ann.split
    vol = folder / f"{ann.video_id}{VOL_SUFFIX}"
    write_volume(vol, clip.frames)
    _atomic_write(folder / f"{ann.video_id}{ANN_SUFFIX}", format_annotation(ann).encode())
    return vol


def load_video(path, normalize: bool = True):
    path = Path(path)
    if path.suffix != VOL_SUFFIX:
        path = path.with_suffix(VOL_SUFFIX)
    if not path.exists():
        raise DataError(f"{path}: no such volume")
    ann_path = path.with_suffix(ANN_SUFFIX)
    if not ann_path.exists():
        raise SchemaError(f"{path}: missing annotation file {ann_path.name}")
    parent = path.parent.name
    ann = parse_annotation(ann_path.read_text(), video_id=path.stem,
                           split=parent if parent in SPLITS else None, source=str(ann_path))
    frames = read_volume(path)
    if not np.all(np.isfinite(frames)):
        raise DataError(f"{path}: volume contains NaN or infinite pixels")
    if normalize:
        frames = normalize_minmax(frames)
    return VideoClip(frames=frames), ann


def list_videos(root, split: str) -> list:
    folder = Path(root) / split
    if not folder.is_dir():
        return []
    return sorted(folder.glob(f"*{VOL_SUFFIX}"))


# ---------------------------------------------------------------------------
# paired videos and sampling


@dataclass
class PairedVideo:
    """An HR video, its degraded LR counterpart and the annotation."""

    hr: VideoClip
    lr: VideoClip
    annotation: AnnotationRecord
    scale: int

    @property
    def video_id(self) -> str:
        return self.annotation.video_id

    @property
    def cycle(self) -> CardiacCycleSpec:
        return self.annotation.cycle


def pair_video(hr: VideoClip, ann: AnnotationRecord, scale: int, cutoff_fraction=None) -> PairedVideo:
    cfg = DegradeConfig(scale=scale, cutoff_fraction=cutoff_fraction)
    return PairedVideo(hr=hr, lr=degrade_clip(hr, cfg), annotation=ann, scale=scale)


def load_dataset(root, scale: int, cutoff_fraction=None, splits=SPLITS) -> dict:
    """Load every video under ``root`` and pair it with its LR version."""
    out = {}
    for split in splits:
        out[split] = [pair_video(*load_video(p), scale=scale, cutoff_fraction=cutoff_fraction)
                      for p in list_videos(root, split)]
    return out


def gather_frames(frames: np.ndarray, cycle: CardiacCycleSpec, indices, wrap: bool = True) -> np.ndarray:
    """Pick frames by absolute index, wrapping out-of-range indices by whole cycles."""
    t_total = frames.shape[0]
    picked = []
    for i in indices:
        if not 0 <= i < t_total:
            if not wrap:
                raise DataError(f"frame {i} outside video of length {t_total} and wrap is disabled")
            if t_total < cycle.t_cycle:
                raise DataError(
                    f"cannot wrap frame {i}: video has {t_total} frames, shorter than one cycle ({cycle.t_cycle})")
            period = cycle.t_cycle
            if i < 0:
                i += (-i + period - 1) // period * period
            else:
                i -= ((i - t_total) // period + 1) * period
        picked.append(frames[i])
    if not picked:
        return frames[:0].copy()
    return np.stack(picked)


def warmup_frames(frames: np.ndarray, cycle: CardiacCycleSpec, start: int, length: int, n: int,
                  wrap: bool = True):
    """Frames preceding and following ``[start, start + length)``.

    Returns ``(before, after)``, each of ``n`` frames in chronological
    order. Indices outside the video are wrapped cyclically.
    """
    before = gather_frames(frames, cycle, range(start - n, start), wrap=wrap)
    after = gather_frames(frames, cycle, range(start + length, start + length + n), wrap=wrap)
    return before, after


@dataclass
class TrainingExample:
    lr_clip: VideoClip
    hr_clip: VideoClip
    phases: PhaseCodeSequence
    lr_origin: tuple
    warm_before: np.ndarray
    warm_after: np.ndarray
    scale: int = 1

    @property
    def hr_origin(self) -> tuple:
        t0, y, x = self.lr_origin
        return t0, y * self.scale, x * self.scale


def sample_training_example(video: PairedVideo, clip_len: int = 7, crop: int = 32,
                            rng_seed=None, warmup_n: int = 0, wrap: bool = True) -> TrainingExample:
    """Random aligned LR/HR crop of ``clip_len`` frames.

    The crop origin is drawn on the LR grid and multiplied by the scale to
    place the HR crop, so the pair is pixel-aligned for every scale.
    """
    r = video.scale
    t_total, h, w = video.hr.frames.shape
    if t_total < clip_len:
        raise ShapeError(f"video {video.video_id} has {t_total} frames, needs at least {clip_len}")
    for axis, size in (("height", h), ("width", w)):
        if size < r * crop:
            raise ShapeError(f"video {video.video_id} {axis} {size} < scale*crop = {r * crop}")
    rng = np.random.default_rng(rng_seed)
    t0 = int(rng.integers(0, t_total - clip_len + 1))
    y = int(rng.integers(0, video.lr.height - crop + 1))
    x = int(rng.integers(0, video.lr.width - crop + 1))

    lr = video.lr.frames[t0:t0 + clip_len, y:y + crop, x:x + crop]
    hr = video.hr.frames[t0:t0 + clip_len, y * r:(y + crop) * r, x * r:(x + crop) * r]
    abs_start = video.hr.t_start + t0
    phases = phase_sequence(video.cycle, abs_start, clip_len)
    before, after = warmup_frames(video.lr.frames, video.cycle, t0, clip_len, warmup_n, wrap=wrap)
    return TrainingExample(
        lr_clip=VideoClip(lr, t_start=abs_start),
        hr_clip=VideoClip(hr, t_start=abs_start),
        phases=phases,
        lr_origin=(t0, y, x),
        warm_before=before[:, y:y + crop, x:x + crop],
        warm_after=after[:, y:y + crop, x:x + crop],
        scale=r,
    )


# ---------------------------------------------------------------------------
# phantom


def _background(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    body = ((yy - cy) / (0.47 * h)) ** 2 + ((xx - cx) / (0.47 * w)) ** 2
    base = np.where(body <= 1.0, 0.3, 0.05)
    # smooth tissue texture: blurred noise plus a slow ripple, both mostly
    # below the x4 acquisition cutoff so that they stay recoverable
    noise = gaussian_filter(rng.standard_normal((h, w)), 2.0, mode="wrap")
    ripple = np.sin(2 * np.pi * (yy * rng.uniform(0.03, 0.08) + xx * rng.uniform(0.03, 0.08)))
    texture = 0.3 * noise + 0.04 * ripple
    return base + np.where(body <= 1.0, texture, 0.2 * texture)


def _coverage(dist, radius):
    # one-pixel linear ramp gives sub-pixel radius changes a visible footprint
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def phantom_frame(background, center, r_out, r_in):
    h, w = background.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dist = np.hypot(yy - center[0], xx - center[1])
    heart = _coverage(dist, r_out)
    blood = _coverage(dist, r_in)
    frame = background * (1.0 - heart) + 0.35 * heart
    return frame * (1.0 - blood) + 0.9 * blood


def generate_phantom(t_cycle: int = 30, n_cycles: int = 2, H: int = 128, W: int = 128,
                     ed: int = 0, es: int = 10, rng_seed: int = 0, center=None,
                     video_id: str | None = None, split: str = "train", drift: float = 3.0):
    """Synthetic cine: a beating ring ventricle inside a textured body.

    The blood-pool radius is an affine function of the phase code, largest
    at ED and smallest at ES. The whole body also follows a smooth closed
    sub-pixel path of amplitude ``drift`` pixels once per cycle, so frames
    sample the anatomy at different offsets and the video stays periodic.
    The ground-truth ROI is the heart disk's bounding box widened by 8
    pixels.
    """
    if H < 32 or W < 32:
        raise ShapeError(f"phantom frames must be at least 32x32, got {H}x{W}")
    if t_cycle < 8:
        raise ConfigError(f"t_cycle must be >= 8, got {t_cycle}")
    if n_cycles < 1:
        raise ConfigError(f"n_cycles must be >= 1, got {n_cycles}")
    cycle = CardiacCycleSpec(ed=ed, es=es, t_cycle=t_cycle)
    rng = np.random.default_rng(rng_seed)
    background = _background(H, W, rng)
    r_out = 0.2 * min(H, W)
    if center is None:
        center = (H / 2.0 + rng.uniform(-0.08, 0.08) * H, W / 2.0 + rng.uniform(-0.08, 0.08) * W)
    r_max, r_min = 0.8 * r_out, 0.5 * r_out

    if drift < 0:
        raise ConfigError(f"drift must be >= 0, got {drift}")

    def render(t):
        angle = 2 * np.pi * t / t_cycle
        dy, dx = drift * np.sin(angle), drift * np.sin(angle + np.pi / 3)
        body = shift(background, (dy, dx), order=3, mode="nearest") if drift else background
        r_in = r_min + (r_max - r_min) * (1.0 + phase_at(t, cycle)) / 2.0
        return phantom_frame(body, (center[0] + dy, center[1] + dx), r_out, r_in)

    one_cycle = np.stack([render(t) for t in range(t_cycle)])
    frames = normalize_minmax(np.tile(one_cycle, (n_cycles, 1, 1)))

    reach = r_out + drift
    margin = 8
    top = max(int(np.floor(center[0] - reach)) - margin, 0)
    left = max(int(np.floor(center[1] - reach)) - margin, 0)
    bottom = min(int(np.ceil(center[0] + reach)) + margin + 1, H)
    right = min(int(np.ceil(center[1] + reach)) + margin + 1, W)
    roi = RoiBox(top, left, bottom - top, right - left)
    ann = AnnotationRecord(cycle=cycle, video_id=video_id or f"phantom_{rng_seed:04d}", split=split, roi=roi)
    return VideoClip(frames=frames, spacing=(1.0, 1.0)), ann
