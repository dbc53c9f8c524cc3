"""Few-shot anomaly detection on pre-extracted patch features."""

from ._deviant import (
    FEATURE_FILE_VERSION,
    ConfigError,
    ContractError,
    DeviantError,
    DimensionError,
    FormatError,
    InvariantError,
    auroc,
    average_precision,
    downsample_mask,
    f1_max,
    generate_world,
    image_score,
    lr_at,
    read_feature_file,
    read_score_map,
    write_feature_file,
)

__all__ = [
    "FEATURE_FILE_VERSION",
    "ConfigError",
    "ContractError",
    "DeviantError",
    "DimensionError",
    "FormatError",
    "InvariantError",
    "auroc",
    "average_precision",
    "downsample_mask",
    "f1_max",
    "generate_world",
    "image_score",
    "lr_at",
    "read_feature_file",
    "read_score_map",
    "write_feature_file",
]
