"""Phase-aware recurrent video super-resolution network.

Layout per refinement stage::

    L ──► ConvLSTM_F ──► H_F ─┐
    │ └─► ConvLSTM_B ──► H_B ─┼─► PhaseFusion(±N window, phase maps) ──► H_P
    │                         │
    └────────────(+)──────────┴──► Up ──► SR

The sub-network (both recurrent cells and the fusion block) is shared
across stages: stage ``w + 1`` starts from ``L + H_P`` of stage ``w``, so
adding stages adds compute but no parameters.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import torch.nn as nn

from .degrade import _resize_matrix
from .errors import ConfigError, SchemaError, ShapeError

CHECKPOINT_FORMAT = "phasevsr-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class AblationFlags:
    memory_enabled: bool = True
    warmup_enabled: bool = True
    bidirectional_enabled: bool = True
    phase_fusion_enabled: bool = True
    ror_enabled: bool = True


@dataclass
class ModelConfig:
    scale: int = 4
    feat_channels: int = 64
    num_extract_blocks: int = 5
    recurrent_hidden: int | None = None
    warmup_n: int = 6
    stages_omega: int = 2
    fusion_halfwidth: int = 2
    input_skip: bool = False
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        if self.recurrent_hidden is None:
            self.recurrent_hidden = self.feat_channels
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        for name in ("stages_omega", "fusion_halfwidth", "warmup_n", "num_extract_blocks"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.feat_channels < 1 or self.recurrent_hidden < 1:
            raise ConfigError("channel widths must be positive")

    @property
    def num_stages(self) -> int:
        """Refinement stages actually run (0 when residual-of-residual is off)."""
        return self.stages_omega if self.ablation.ror_enabled else 0

    @property
    def effective_warmup(self) -> int:
        a = self.ablation
        return self.warmup_n if (a.warmup_enabled and a.memory_enabled) else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def conv3x3(cin, cout, bias=True):
    return nn.Conv2d(cin, cout, 3, padding=1, bias=bias)


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(conv3x3(channels, channels), nn.ReLU(inplace=True), conv3x3(channels, channels))

    def forward(self, x):
        return x + self.body(x)


class FeatureExtractor(nn.Module):
    """Per-frame encoder producing the low-frequency feature ``L``."""

    def __init__(self, channels, num_blocks):
        super().__init__()
        self.head = conv3x3(1, channels)
        self.blocks = nn.Sequential(*[ResBlock(channels) for _ in range(num_blocks)])

    def forward(self, frames):
        # frames: (B, T, H, W) -> (B, T, C, H, W)
        b, t, h, w = frames.shape
        x = self.blocks(self.head(frames.reshape(b * t, 1, h, w)))
        return x.reshape(b, t, -1, h, w)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels, hidden):
        super().__init__()
        self.hidden = hidden
        self.gates = conv3x3(in_channels + hidden, 4 * hidden)
        with torch.no_grad():
            # forget gate starts open
            self.gates.bias[hidden:2 * hidden].fill_(1.0)

    def init_state(self, ref):
        b, _, h, w = ref.shape
        z = ref.new_zeros(b, self.hidden, h, w)
        return z, z

    def forward(self, x, state):
        h_prev, c_prev = state
        i, f, o, g = self.gates(torch.cat([x, h_prev], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class PhaseFusion(nn.Module):
    """Fuse forward/backward features over a ``2N+1`` window with phase maps."""

    def __init__(self, channels, halfwidth, use_phase=True):
        super().__init__()
        self.halfwidth = halfwidth
        self.use_phase = use_phase
        span = 2 * halfwidth + 1
        in_channels = 2 * span * channels + (span if use_phase else 0)
        self.first = conv3x3(in_channels, channels)
        self.act = nn.ReLU(inplace=True)
        self.last = conv3x3(channels, channels)
        with torch.no_grad():
            # near-zero start keeps early refinement close to identity
            self.last.weight.mul_(0.1)
            self.last.bias.zero_()

    def window_index(self, t_len, device=None):
        offsets = torch.arange(-self.halfwidth, self.halfwidth + 1, device=device)
        return (torch.arange(t_len, device=device)[:, None] + offsets[None]).clamp(0, t_len - 1)

    def phase_maps(self, phases, h, w):
        # (B, T) -> (B, T, 2N+1, H, W), each channel a constant map
        idx = self.window_index(phases.shape[1], phases.device)
        return phases[:, idx][..., None, None].expand(-1, -1, -1, h, w)

    def forward(self, h_f, h_b, phases=None):
        b, t, c, h, w = h_f.shape
        if t < 1:
            raise ShapeError("phase fusion needs at least one frame")
        idx = self.window_index(t, h_f.device)
        parts = [h_f[:, idx].reshape(b, t, -1, h, w), h_b[:, idx].reshape(b, t, -1, h, w)]
        if self.use_phase:
            if phases is None or tuple(phases.shape) != (b, t):
                raise ShapeError(f"phases must have shape {(b, t)}, got "
                                 f"{None if phases is None else tuple(phases.shape)}")
            parts.append(self.phase_maps(phases.to(h_f.dtype), h, w))
        x = torch.cat(parts, dim=2).reshape(b * t, -1, h, w)
        return self.last(self.act(self.first(x))).reshape(b, t, c, h, w)


class Upsampler(nn.Module):
    """Sub-pixel convolution to the target scale, then projection to one channel.

    With ``input_skip`` the bicubic enlargement of the LR frames is added to
    the projection, so the learned path only models the residual over
    interpolation. The interpolation is fixed and has no parameters.
    """

    def __init__(self, channels, scale, input_skip=False):
        super().__init__()
        self.scale = scale
        self.input_skip = input_skip
        steps = [2, 2] if scale == 4 else [scale]
        layers = []
        for s in steps:
            layers += [conv3x3(channels, channels * s * s), nn.PixelShuffle(s)]
        layers.append(conv3x3(channels, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, feats, lr=None):
        b, t, c, h, w = feats.shape
        out = self.body(feats.reshape(b * t, c, h, w))
        out = out.reshape(b, t, out.shape[-2], out.shape[-1])
        if self.input_skip:
            if lr is None:
                raise ShapeError("input_skip needs the LR frames")
            out = out + bicubic_upscale(lr, self.scale).repeat(b // lr.shape[0], 1, 1, 1)
        return out


def bicubic_upscale(frames, scale):
    """Keys bicubic enlargement of (B, T, H, W) frames, matching the baseline."""
    h, w = frames.shape[-2:]
    rows = torch.tensor(_resize_matrix(h, h * scale)).to(frames)
    cols = torch.tensor(_resize_matrix(w, w * scale)).to(frames)
    return torch.einsum("ih,bthw,jw->btij", rows, frames, cols)


@dataclass
class StagedOutput:
    sr: list
    aux_f: list
    aux_b: list

    @property
    def final(self):
        return self.sr[-1]


@dataclass
class SubnetOutput:
    h_f: torch.Tensor
    h_b: torch.Tensor
    h_p: torch.Tensor


class PhaseVSR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feat_channels
        a = cfg.ablation
        self.extractor = FeatureExtractor(c, cfg.num_extract_blocks)
        self.cell_f = ConvLSTMCell(c, cfg.recurrent_hidden)
        self.cell_b = ConvLSTMCell(c, cfg.recurrent_hidden) if a.bidirectional_enabled else None
        # hidden width differs from C: project back so H can be added to L
        self.proj = nn.Conv2d(cfg.recurrent_hidden, c, 1) if cfg.recurrent_hidden != c else None
        self.fusion = PhaseFusion(c, cfg.fusion_halfwidth, use_phase=a.phase_fusion_enabled)
        self.upsampler = Upsampler(c, cfg.scale, cfg.input_skip)

    # -- building blocks -------------------------------------------------

    def extract_features(self, frames):
        return self.extractor(_as_frames(frames))

    def warmup_memory(self, cell, state, warm_feats):
        """Advance ``state`` over ``warm_feats`` (B, n, C, H, W) without tracking gradients."""
        if warm_feats is None or warm_feats.shape[1] == 0:
            return state
        with torch.no_grad():
            for k in range(warm_feats.shape[1]):
                state = cell(warm_feats[:, k], state)
        return tuple(s.detach() for s in state)

    def _recur(self, cell, feats, warm_feats):
        b, t = feats.shape[:2]
        state = cell.init_state(feats[:, 0])
        memory = self.cfg.ablation.memory_enabled
        if memory:
            state = self.warmup_memory(cell, state, warm_feats)
        outs = []
        for k in range(t):
            if not memory:
                state = cell.init_state(feats[:, k])
            state = cell(feats[:, k], state)
            outs.append(state[0])
        hidden = torch.stack(outs, dim=1)
        if self.proj is not None:
            hidden = self.proj(hidden.flatten(0, 1)).reshape(b, t, -1, *hidden.shape[-2:])
        return hidden

    def run_subnetwork(self, feats, phases=None, warm_before=None, warm_after=None) -> SubnetOutput:
        """Recover the high-frequency residual ``H_P`` for every frame.

        ``warm_before`` / ``warm_after`` are features of the frames that
        precede / follow the clip, in chronological order.
        """
        t = feats.shape[1]
        if phases is not None and phases.shape[-1] != t:
            raise ShapeError(f"got {phases.shape[-1]} phase values for {t} frames")
        h_f = self._recur(self.cell_f, feats, warm_before)
        if self.cell_b is not None:
            rev_warm = None if warm_after is None else warm_after.flip(1)
            h_b = self._recur(self.cell_b, feats.flip(1), rev_warm).flip(1)
        else:
            h_b = h_f
        return SubnetOutput(h_f, h_b, self.fusion(h_f, h_b, phases))

    def refine_features(self, feats, phases=None, warm_before=None, warm_after=None):
        return feats + self.run_subnetwork(feats, phases, warm_before, warm_after).h_p

    # -- full pass ---------------------------------------------------------

    def forward(self, lr, phases=None, warm_before=None, warm_after=None, aux: bool = True) -> StagedOutput:
        """Super-resolve a batch of clips.

        lr: (B, T, H, W) or (B, T, 1, H, W) in [0, 1]; phases: (B, T);
        warm_before / warm_after: (B, n, H, W) LR frames around the clip.
        Returns one SR clip per stage, each (B, T, rH, rW).
        """
        lr = _as_frames(lr)
        if phases is not None:
            phases = torch.as_tensor(phases, dtype=lr.dtype, device=lr.device)
            if phases.dim() == 1:
                phases = phases[None]
            if tuple(phases.shape) != tuple(lr.shape[:2]):
                raise ShapeError(f"phases shape {tuple(phases.shape)} does not match clip {tuple(lr.shape[:2])}")
        elif self.cfg.ablation.phase_fusion_enabled:
            raise ShapeError("phase fusion is enabled but no phase codes were given")

        feats = self.extract_features(lr)
        wb = self._warm_features(warm_before)
        wa = self._warm_features(warm_after)

        sr, aux_f, aux_b = [], [], []
        for _ in range(self.cfg.num_stages + 1):
            sub = self.run_subnetwork(feats, phases, wb, wa)
            refined = feats + sub.h_p
            if aux:
                up = self.upsampler(torch.cat([refined, feats + sub.h_f, feats + sub.h_b], dim=0), lr)
                s, f, b = up.chunk(3, dim=0)
                sr.append(s)
                aux_f.append(f)
                aux_b.append(b)
            else:
                sr.append(self.upsampler(refined, lr))
            feats = refined
        return StagedOutput(sr, aux_f, aux_b)

    def _warm_features(self, frames):
        n = self.cfg.effective_warmup
        if frames is None or n == 0:
            return None
        frames = _as_frames(frames)
        if frames.shape[1] != n:
            raise ShapeError(f"expected {n} warm-up frames, got {frames.shape[1]}")
        with torch.no_grad():
            return self.extract_features(frames)


def _as_frames(x):
    x = torch.as_tensor(x)
    if x.dim() == 5:
        if x.shape[2] != 1:
            raise ShapeError(f"expected a single channel, got shape {tuple(x.shape)}")
        x = x[:, :, 0]
    if x.dim() == 3:
        x = x[None]
    if x.dim() != 4:
        raise ShapeError(f"expected (B, T, H, W) frames, got shape {tuple(x.shape)}")
    return x


def build_model(cfg: ModelConfig, seed: int | None = 0) -> PhaseVSR:
    if seed is not None:
        torch.manual_seed(seed)
    return PhaseVSR(cfg)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_params_and_fps(cfg: ModelConfig, input_shape=(7, 32, 32), trials: int = 5, model=None, seed=0):
    """Trainable parameter count and median inference frames-per-second.

    ``input_shape`` is (T, H, W) of the LR clip; each trial runs one clip
    with the configured warm-up.
    """
    if trials < 3:
        raise ConfigError(f"need at least 3 timing trials, got {trials}")
    model = model if model is not None else build_model(cfg, seed)
    model.eval()
    t, h, w = input_shape
    gen = torch.Generator().manual_seed(seed)
    lr = torch.rand(1, t, h, w, generator=gen)
    n = cfg.effective_warmup
    warm = torch.rand(1, n, h, w, generator=gen) if n else None
    phases = torch.linspace(-1, 1, t)[None]
    times = []
    with torch.no_grad():
        model(lr, phases, warm, warm, aux=False)
        for _ in range(trials):
            start = time.perf_counter()
            model(lr, phases, warm, warm, aux=False)
            times.append(time.perf_counter() - start)
    return count_params(model), t / statistics.median(times)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: PhaseVSR, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_cfg": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }
    tmp = path.with_name(f".{path.name}.tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_scale: int | None = None):
    """Return ``(model, meta)`` after validating format, version and config."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise SchemaError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["model_cfg"])
    if expected_scale is not None and cfg.scale != expected_scale:
        raise ConfigError(f"checkpoint scale {cfg.scale} does not match requested scale {expected_scale}")
    model = PhaseVSR(cfg)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise SchemaError(f"{path}: weights do not match config: {exc}") from None
    model.eval()
    return model, payload.get("meta", {})
