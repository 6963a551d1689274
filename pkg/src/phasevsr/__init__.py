"""Phase-aware super-resolution for cardiac cine MRI."""
from .dataio import AnnotationRecord, PairedVideo, VideoClip, generate_phantom, load_dataset, load_video, save_video
from .degrade import DegradeConfig, degrade_clip
from .errors import ConfigError, DataError, PhaseVSRError, SchemaError, ShapeError, TrainingDivergedError
from .loss import stage_l1, total_loss
from .metrics import MetricReport, RoiBox, cardiac_metrics, detect_heart_roi, psnr, ssim
from .model import AblationFlags, ModelConfig, PhaseVSR, StagedOutput, build_model, count_params_and_fps
from .phase import CardiacCycleSpec, PhaseCodeSequence, phase_at, phase_sequence
from .trainer import TrainConfig, ablation_sweep, evaluate, parameter_sweep, train

__version__ = "0.1.0"
