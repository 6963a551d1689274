"""PSNR / SSIM and their cardiac-region variants.

The heart ROI is found from temporal intensity variance: beating tissue
changes over the cycle while the surrounding anatomy stays put. Pixels above
the 95th percentile of the variance map are grouped into 4-connected
components, the largest one is boxed, and the box is widened by 8 pixels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError

PSNR_CAP = 100.0
ROI_PERCENTILE = 95.0
ROI_MARGIN = 8
ROI_MIN_SIZE = 16
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class RoiBox:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.top < 0 or self.left < 0:
            raise ShapeError(f"ROI origin must be non-negative, got ({self.top}, {self.left})")
        if self.height < ROI_MIN_SIZE or self.width < ROI_MIN_SIZE:
            raise ShapeError(f"ROI must be at least {ROI_MIN_SIZE}x{ROI_MIN_SIZE}, got {self.height}x{self.width}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def as_tuple(self) -> tuple:
        return self.top, self.left, self.height, self.width

    def fits(self, h: int, w: int) -> bool:
        return self.bottom <= h and self.right <= w

    def crop(self, arr):
        """Crop the trailing two axes of ``arr``."""
        return arr[..., self.top:self.bottom, self.left:self.right]

    def shifted(self, dy: int, dx: int) -> "RoiBox":
        return RoiBox(self.top + dy, self.left + dx, self.height, self.width)

    def iou(self, other: "RoiBox") -> float:
        ih = max(0, min(self.bottom, other.bottom) - max(self.top, other.top))
        iw = max(0, min(self.right, other.right) - max(self.left, other.left))
        inter = ih * iw
        union = self.height * self.width + other.height * other.width - inter
        return inter / union

    @classmethod
    def full_frame(cls, h: int, w: int) -> "RoiBox":
        return cls(0, 0, h, w)


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    cardiac_psnr: float
    cardiac_ssim: float
    roi: RoiBox
    video_id: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        out["roi"] = list(self.roi.as_tuple())
        return out


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(10.0 * math.log10(data_range ** 2 / mse))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _local_mean(img, g):
    # separable Gaussian, keeping only positions where the window fits
    pad = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, g, axis=1, mode="reflect")
    return out[pad:img.shape[0] - pad, pad:img.shape[1] - pad]


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim_map expects 2-D images, got shape {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"image {a.shape} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = _local_mean(a, g), _local_mean(b, g)
    var_a = _local_mean(a * a, g) - mu_a * mu_a
    var_b = _local_mean(b * b, g) - mu_b * mu_b
    cov = _local_mean(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean Gaussian-weighted SSIM; a ``T x H x W`` stack averages per frame."""
    a, b = _pair(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(x, y, window, sigma, data_range) for x, y in zip(a, b)]))
    return float(ssim_map(a, b, window, sigma, data_range).mean())


def _frames(clip) -> np.ndarray:
    frames = getattr(clip, "frames", clip)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise ShapeError(f"expected T x H x W frames, got shape {frames.shape}")
    return frames


def _grow(lo, hi, size, minimum):
    # widen [lo, hi) to at least `minimum`, staying inside [0, size)
    target = min(minimum, size)
    deficit = target - (hi - lo)
    if deficit <= 0:
        return lo, hi
    lo = max(min(lo - deficit // 2, size - target), 0)
    return lo, lo + target


def temporal_variance(frames: np.ndarray) -> np.ndarray:
    var = frames.var(axis=0)
    var[np.all(frames == frames[0], axis=0)] = 0.0
    return var


def detect_heart_roi(clip) -> RoiBox:
    frames = _frames(clip)
    t, h, w = frames.shape
    if t < 4:
        raise DataError(f"ROI detection needs at least 4 frames, got {t}")
    var = temporal_variance(frames)
    mask = var > np.percentile(var, ROI_PERCENTILE)
    labels, count = ndimage.label(mask)
    if count == 0:
        bh, bw = max(h // 2, min(ROI_MIN_SIZE, h)), max(w // 2, min(ROI_MIN_SIZE, w))
        return RoiBox((h - bh) // 2, (w - bw) // 2, bh, bw)
    sizes = np.bincount(labels.ravel())[1:]
    rows, cols = np.nonzero(labels == int(np.argmax(sizes)) + 1)
    top, bottom = max(rows.min() - ROI_MARGIN, 0), min(rows.max() + ROI_MARGIN + 1, h)
    left, right = max(cols.min() - ROI_MARGIN, 0), min(cols.max() + ROI_MARGIN + 1, w)
    top, bottom = _grow(top, bottom, h, ROI_MIN_SIZE)
    left, right = _grow(left, right, w, ROI_MIN_SIZE)
    return RoiBox(int(top), int(left), int(bottom - top), int(right - left))


def clip_scores(sr, hr, roi: RoiBox | None = None, data_range: float = 1.0) -> tuple:
    """Per-frame PSNR and SSIM averaged over frames, optionally inside ``roi``."""
    sr, hr = _frames(sr), _frames(hr)
    if roi is not None:
        sr, hr = roi.crop(sr), roi.crop(hr)
    p = float(np.mean([psnr(x, y, data_range) for x, y in zip(sr, hr)]))
    s = float(np.mean([ssim(x, y, data_range=data_range) for x, y in zip(sr, hr)]))
    return p, s


def cardiac_metrics(sr_clip, hr_clip, roi: RoiBox | None = None, video_id: str = "",
                    data_range: float = 1.0) -> MetricReport:
    """Global and heart-region scores of ``sr_clip`` against ``hr_clip``.

    The ROI is detected on the HR clip unless one is passed in, so every
    method compared on the same HR clip is scored on the same region.
    """
    sr, hr = _frames(sr_clip), _frames(hr_clip)
    if sr.shape != hr.shape:
        raise ShapeError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    if roi is None:
        roi = detect_heart_roi(hr)
    if not roi.fits(hr.shape[1], hr.shape[2]):
        raise ShapeError(f"ROI {roi.as_tuple()} exceeds frame {hr.shape[1:]}")
    g_psnr, g_ssim = clip_scores(sr, hr, data_range=data_range)
    c_psnr, c_ssim = clip_scores(sr, hr, roi, data_range=data_range)
    return MetricReport(g_psnr, g_ssim, c_psnr, c_ssim, roi, video_id)
