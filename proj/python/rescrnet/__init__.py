"""Python bindings for the rescr segmentation engine."""

from ._core import (
    AugmentParams,
    ConfigError,
    Error,
    InvalidValueError,
    IoError,
    LossConfig,
    Model,
    NetworkConfig,
    NumericError,
    ShapeError,
    apply_affine,
    contour_weight_map,
    dice_coefficient,
    f1_score,
    gradcheck,
    load_dataset,
    loss_and_grad,
    metrics,
    read_image,
    sample_params,
    synthetic_dataset,
    tanimoto,
    tanimoto_with_complement,
    train,
    write_synthetic_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
