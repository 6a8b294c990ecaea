"""End-to-end streaming driver, configuration and evaluation metrics."""
from .config import (
    BackendConfig,
    GsmapConfig,
    MatchingConfig,
    PipelineConfig,
    ProviderConfig,
    TrackingConfig,
    build_config,
    load_config,
    parse_overrides,
    read_ini,
    write_ini,
)
from .metrics import PSNR_CAP, ate_rmse, f1_from_counts, f1_score, psnr, trajectory_length, umeyama
from .runner import RunReport, StreamingRun, make_provider, run

__all__ = [
    "BackendConfig",
    "GsmapConfig",
    "MatchingConfig",
    "PipelineConfig",
    "ProviderConfig",
    "TrackingConfig",
    "build_config",
    "load_config",
    "parse_overrides",
    "read_ini",
    "write_ini",
    "PSNR_CAP",
    "ate_rmse",
    "f1_from_counts",
    "f1_score",
    "psnr",
    "trajectory_length",
    "umeyama",
    "RunReport",
    "StreamingRun",
    "make_provider",
    "run",
]
