"""Low-resolution acquisition simulator.

HR frames are low-passed in the 2-D Fourier domain, brought back to image
space, and shrunk by bicubic interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DataError, ShapeError

ALLOWED_SCALES = (2, 3, 4)
_IMAG_TOL = 1e-10


@dataclass(frozen=True)
class DegradeConfig:
    scale: int
    cutoff_fraction: float | None = None

    def __post_init__(self):
        if self.scale not in ALLOWED_SCALES:
            raise ConfigError(f"scale must be one of {ALLOWED_SCALES}, got {self.scale}")
        if self.cutoff_fraction is None:
            object.__setattr__(self, "cutoff_fraction", 1.0 / self.scale)
        if not 0.0 < self.cutoff_fraction <= 1.0:
            raise ConfigError(f"cutoff_fraction must be in (0, 1], got {self.cutoff_fraction}")


def frequency_mask(shape, cutoff_fraction: float) -> np.ndarray:
    """Boolean mask over unshifted FFT bins keeping the centred low band.

    Along each axis of length n a bin with signed frequency k survives when
    ``|k| <= cutoff_fraction * n / 2``. The set is symmetric in k, so the
    filtered spectrum stays Hermitian and the inverse transform is real.
    """
    if not 0.0 < cutoff_fraction <= 1.0:
        raise ConfigError(f"cutoff_fraction must be in (0, 1], got {cutoff_fraction}")
    keep = []
    for n in shape:
        k = np.fft.fftfreq(n) * n
        keep.append(np.abs(k) <= cutoff_fraction * n / 2.0 + 1e-9)
    return np.logical_and.outer(keep[0], keep[1])


def lowpass_filter(frame: np.ndarray, cutoff_fraction: float) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ShapeError(f"expected a 2-D frame, got shape {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise DataError("frame contains non-finite values")
    if cutoff_fraction == 1.0:
        return frame.copy()
    spectrum = np.fft.fft2(frame)
    spectrum[~frequency_mask(frame.shape, cutoff_fraction)] = 0.0
    out = np.fft.ifft2(spectrum)
    residue = np.abs(out.imag).max()
    scale = max(np.abs(out.real).max(), 1.0)
    if residue > _IMAG_TOL * scale:
        raise DataError(f"imaginary residue {residue:.3e} after inverse transform")
    return out.real


def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres; edge taps clamp to the border (edge replication)
    scale = n_in / n_out
    centres = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(centres).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = base + tap
        w = cubic_kernel(centres - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), w)
    mat.setflags(write=False)
    return mat


def bicubic_resize(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ShapeError(f"expected a 2-D frame, got shape {frame.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = frame.shape
    if (h, w) == (out_h, out_w):
        return frame.copy()
    return _resize_matrix(h, out_h) @ frame @ _resize_matrix(w, out_w).T


def bicubic_resize_clip(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize every frame of a ``T x H x W`` stack."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ShapeError(f"expected a T x H x W stack, got shape {frames.shape}")
    rows = _resize_matrix(frames.shape[1], out_h)
    cols = _resize_matrix(frames.shape[2], out_w)
    return np.einsum("ih,thw,jw->tij", rows, frames, cols)


def degrade_frames(frames: np.ndarray, cfg: DegradeConfig) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ShapeError(f"expected a T x H x W stack, got shape {frames.shape}")
    _, h, w = frames.shape
    for axis, size in (("height", h), ("width", w)):
        if size % cfg.scale:
            raise ShapeError(f"{axis} {size} is not divisible by scale {cfg.scale}")
    out = np.empty((frames.shape[0], h // cfg.scale, w // cfg.scale))
    for i, frame in enumerate(frames):
        out[i] = bicubic_resize(lowpass_filter(frame, cfg.cutoff_fraction), h // cfg.scale, w // cfg.scale)
    return out


def degrade_clip(clip, cfg: DegradeConfig):
    """Return the low-resolution counterpart of a ``VideoClip``."""
    from .dataio import VideoClip

    lr = degrade_frames(clip.frames, cfg)
    spacing = None
    if clip.spacing is not None:
        spacing = (clip.spacing[0] * cfg.scale, clip.spacing[1] * cfg.scale)
    return VideoClip(frames=lr.astype(np.float32), t_start=clip.t_start, spacing=spacing)
