"""Test-time domain adaptation toolkit for video deblurring: mines
pseudo-sharp patches from blurred test videos, derives domain-specific blur
conditions from temporal motion cues, reblurs the patches through a pluggable
conditional blurring backend, and fine-tunes a deblurring model on the
generated pseudo pairs."""

from .fields import (
    BlurConditionField,
    BlurMagnitudeMap,
    FlowField,
    MotionTrajectoryMap,
    NormalizationConstant,
    OrientationField,
    accumulate_test_trajectory,
    accumulate_training_trajectory,
    adapt_magnitude,
    assemble_condition,
    magnitude_ground_truth,
    orientation_field,
)

__all__ = [
    "BlurConditionField",
    "BlurMagnitudeMap",
    "FlowField",
    "MotionTrajectoryMap",
    "NormalizationConstant",
    "OrientationField",
    "accumulate_test_trajectory",
    "accumulate_training_trajectory",
    "adapt_magnitude",
    "assemble_condition",
    "magnitude_ground_truth",
    "orientation_field",
]

__version__ = "0.1.0"
