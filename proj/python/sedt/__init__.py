"""Sound event detection transformer: training, inference and evaluation."""

from ._sedt import (
    Detector,
    ParseError,
    ValidationError,
    generate_scene,
    hungarian,
    interval_giou,
    interval_iou,
    load_manifest,
    log_mel,
    lr_schedule,
    train,
    write_synthetic_dataset,
)

__all__ = [
    "Detector",
    "ParseError",
    "ValidationError",
    "generate_scene",
    "hungarian",
    "interval_giou",
    "interval_iou",
    "load_manifest",
    "log_mel",
    "lr_schedule",
    "train",
    "write_synthetic_dataset",
]
