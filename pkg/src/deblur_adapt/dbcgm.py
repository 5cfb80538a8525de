"""Domain-adaptive blur condition generation: gather the 5-frame collocated
window around a selected patch, accumulate its flows, extract orientations,
estimate and adapt magnitudes, and assemble the per-pixel condition."""

from dataclasses import dataclass

from .fields import (
    BlurConditionField,
    DEGENERATE_EPS,
    FieldShapeError,
    accumulate_test_trajectory,
    adapt_magnitude,
    assemble_condition,
    orientation_field,
)
from .rsdm import PatchSelection, crop_patch

WINDOW_SIZE = 5
CENTER_INDEX = 2


@dataclass(frozen=True)
class CollocatedWindow:
    """Five patches cropped at identical coordinates from frames t-2..t+2."""

    patches: tuple
    video_id: str
    frame_index: int
    window: tuple

    def __post_init__(self):
        if len(self.patches) != WINDOW_SIZE:
            raise FieldShapeError(
                f"collocated window needs {WINDOW_SIZE} patches, got {len(self.patches)}"
            )
        if len({p.shape for p in self.patches}) > 1:
            raise FieldShapeError("collocated patches have mixed shapes")

    @property
    def center(self):
        return self.patches[CENTER_INDEX]

    @property
    def neighbors(self):
        return [p for i, p in enumerate(self.patches) if i != CENTER_INDEX]


def gather_window(video_frames, selection: PatchSelection) -> CollocatedWindow:
    """Crop the selected window from frames t-2..t+2 of the video."""
    t = selection.frame_index
    if t - CENTER_INDEX < 0 or t + CENTER_INDEX >= len(video_frames):
        raise FieldShapeError(
            f"frame {t} of video {selection.video_id!r} lacks a full temporal window"
        )
    patches = tuple(
        crop_patch(video_frames[t + n], selection.window)
        for n in range(-CENTER_INDEX, CENTER_INDEX + 1)
    )
    return CollocatedWindow(patches, selection.video_id, t, selection.window)


def generate_condition_from_parts(flows, magnitudes, eps=DEGENERATE_EPS,
                                  adapt_mode="elementwise") -> BlurConditionField:
    """Assemble a condition from 4 step flows and 5 per-patch magnitude maps."""
    if len(magnitudes) != WINDOW_SIZE:
        raise FieldShapeError(
            f"need {WINDOW_SIZE} magnitude maps, got {len(magnitudes)}"
        )
    traj = accumulate_test_trajectory(flows)
    orient = orientation_field(traj, eps)
    neighbors = [m for i, m in enumerate(magnitudes) if i != CENTER_INDEX]
    mag = adapt_magnitude(magnitudes[CENTER_INDEX], neighbors, mode=adapt_mode)
    return assemble_condition(orient, mag)


def generate_condition(window: CollocatedWindow, flow, magnitude_estimator,
                       eps=DEGENERATE_EPS, adapt_mode="elementwise") -> BlurConditionField:
    """Full condition generation for one collocated window.

    flow: estimator with estimate(patch_a, patch_b) -> FlowField, applied to
    the 4 consecutive patch pairs. magnitude_estimator: callable mapping a
    patch to a BlurMagnitudeMap, applied to all 5 patches.
    """
    try:
        flows = [
            flow.estimate(window.patches[i], window.patches[i + 1])
            for i in range(WINDOW_SIZE - 1)
        ]
        magnitudes = [magnitude_estimator(p) for p in window.patches]
    except Exception as exc:
        raise RuntimeError(
            f"condition generation failed for video {window.video_id!r} "
            f"frame {window.frame_index} window {window.window}: {exc}"
        ) from exc
    return generate_condition_from_parts(flows, magnitudes, eps, adapt_mode)
