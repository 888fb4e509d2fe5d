"""Hyperspectral image denoising with multiscale adaptive fusion"""

__version__ = "0.1.0"

from .cube import HSICube, ImagePyramid, NormalizationRecord, build_pyramid, load_cube, normalize, save_cube
from .errors import (
    ConfigError,
    DataError,
    DegenerateRangeError,
    DivergenceError,
    FormatError,
    IoError,
    MafnetError,
    ParamError,
    ShapeError,
)
from .metrics import MetricsTable, compute_metrics
from .network import NetworkConfig, NetworkHandle, build_network, denoise_cube, forward, load_weights, save_weights
from .noise import NoiseReport, NoiseSpec, synthesize_case
from .objective import LossBreakdown, total_loss
from .trainer import Checkpoint, StageConfig, Trainer, evaluate, run_incremental_schedule, run_stage
