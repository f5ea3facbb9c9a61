"""Few-shot segmentation that tunes small feature adapters on each new task,
supervised by view-consistency losses and image-text pseudo-labels."""
from .adapt import AdapterCache, AdaptationRecord, Pipeline, adapt_episode, run_task, total_loss
from .config import Config, ConfigError, load_config, toy_config
from .core import Episode, SyntheticSpec, augment_view, load_episode, make_synthetic_episode
from .harness import compute_fb_iou, compute_miou, evaluate, iou, sweep_threshold, synthetic_suite

__version__ = "0.1.0"

__all__ = [
    "AdapterCache", "AdaptationRecord", "Config", "ConfigError", "Episode", "Pipeline", "SyntheticSpec",
    "adapt_episode", "augment_view", "compute_fb_iou", "compute_miou", "evaluate", "iou", "load_config",
    "load_episode", "make_synthetic_episode", "run_task", "sweep_threshold", "synthetic_suite", "toy_config",
    "total_loss",
]
