"""Multi-task residual fine-tuning: a bottlenecked, chunked base policy plus an
online, task-routed mixture of bounded residual experts with a calibrated
critic ensemble, on a small deterministic task world."""

from .config import ConfigError, RunConfig
from .core import ParamMap, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
__all__ = ["ConfigError", "ParamMap", "RunConfig", "load_checkpoint", "save_checkpoint"]
