"""Relative sharpness mining: score every frame of a video by the mean
magnitude of its least-blurry window (summed-area table search), pick the
top-r% sharpest frames per video, and crop pseudo-sharp patches."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fields import BlurMagnitudeMap, FieldShapeError

DEFAULT_PATCH = 256
DEFAULT_STRIDE = 32
# frames whose 5-frame temporal window exits the video cannot feed
# condition generation downstream
TEMPORAL_MARGIN = 2


@dataclass(frozen=True)
class PatchSelection:
    video_id: str
    frame_index: int
    window: tuple  # (top, left, height, width)
    score: float
    eta_implied: float = float("nan")

    def to_json(self):
        return {
            "frame": self.frame_index,
            "window": list(self.window),
            "score": self.score,
        }


def _window_positions(extent, patch, stride):
    pos = list(range(0, extent - patch + 1, stride))
    last = extent - patch
    if last not in pos:
        pos.append(last)  # corner-flush window covers the far edge
    return pos


def frame_sharpness_score(mag: BlurMagnitudeMap, patch=DEFAULT_PATCH, stride=DEFAULT_STRIDE):
    """Minimum window-mean magnitude over stride-aligned windows.

    Returns (score, (top, left, patch, patch)); ties resolve to the smallest
    (top, left) lexicographically. Raises if the frame is smaller than the
    patch (callers treat that as ineligibility).
    """
    h, w = mag.shape
    if h < patch or w < patch:
        raise FieldShapeError(f"frame {h}x{w} smaller than patch {patch}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    sat = np.zeros((h + 1, w + 1), dtype=np.float64)
    sat[1:, 1:] = np.cumsum(np.cumsum(mag.m.astype(np.float64), axis=0), axis=1)
    area = float(patch * patch)
    best_score, best_window = None, None
    for top in _window_positions(h, patch, stride):
        for left in _window_positions(w, patch, stride):
            b, r = top + patch, left + patch
            total = sat[b, r] - sat[top, r] - sat[b, left] + sat[top, left]
            score = total / area
            # scores within SAT rounding noise count as ties; the scan runs
            # in (top, left) ascending order, so the first near-minimum seen
            # is the lexicographically smallest tie
            if best_score is None or score < best_score - 1e-9:
                best_score, best_window = score, (top, left, patch, patch)
    return float(best_score), best_window


def component_window(mag: BlurMagnitudeMap, eta, patch=DEFAULT_PATCH):
    """Crop window centered on the largest connected sub-threshold region.

    Pixels with magnitude <= eta form the sharp mask; the window centers on
    the centroid of its largest component, clipped to the frame bounds.
    Falls back to the frame center when the mask is empty.
    """
    h, w = mag.shape
    mask = mag.m <= eta
    if mask.any():
        labels, count = ndimage.label(mask)
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, count + 1))
        biggest = int(np.argmax(sizes)) + 1
        cy, cx = ndimage.center_of_mass(labels == biggest)
    else:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    top = int(np.clip(round(cy - patch / 2), 0, h - patch))
    left = int(np.clip(round(cx - patch / 2), 0, w - patch))
    return (top, left, patch, patch)


def select_pseudo_sharp(
    video_mags,
    r=20.0,
    patch=DEFAULT_PATCH,
    stride=DEFAULT_STRIDE,
    video_id="",
    r_low=None,
    crop_mode="window",
):
    """Pick the sharpest frames of one video and their crop windows.

    video_mags: ordered per-frame magnitude maps. Selects the
    min(ceil(r/100·T), #eligible) eligible frames with the smallest window
    scores (ties by frame index). With r_low set, ranks in
    (ceil(r_low/100·T), ceil(r/100·T)] are taken instead, excluding the very
    sharpest band. crop_mode="component" re-crops each selected frame around
    its largest sub-threshold region instead of the argmin window.
    """
    t_total = len(video_mags)
    if t_total < 1:
        raise FieldShapeError("video has no frames")
    if not (0.0 < r <= 100.0):
        raise ValueError(f"r must be in (0, 100], got {r}")
    if crop_mode not in ("window", "component"):
        raise ValueError(f"unknown crop_mode: {crop_mode!r}")

    scored = []
    for t, mag in enumerate(video_mags):
        if t < TEMPORAL_MARGIN or t >= t_total - TEMPORAL_MARGIN:
            continue
        h, w = mag.shape
        if h < patch or w < patch:
            continue
        score, window = frame_sharpness_score(mag, patch, stride)
        scored.append((score, t, window))
    if not scored:
        return []

    scored.sort(key=lambda item: (item[0], item[1]))
    hi = min(math.ceil(r / 100.0 * t_total), len(scored))
    lo = 0
    if r_low is not None:
        if not (0.0 <= r_low < r):
            raise ValueError(f"r_low must be in [0, r), got {r_low}")
        lo = min(math.ceil(r_low / 100.0 * t_total), len(scored))
    chosen = scored[lo:hi]
    if not chosen:
        return []
    eta = chosen[-1][0]
    selections = []
    for score, t, window in chosen:
        if crop_mode == "component":
            window = component_window(video_mags[t], eta, patch)
        selections.append(PatchSelection(video_id, t, window, score, eta))
    return selections


def crop_patch(frame, window):
    """Exact pixel copy of a (top, left, h, w) window; no resampling."""
    top, left, ph, pw = window
    fh, fw = frame.shape[:2]
    if top < 0 or left < 0 or top + ph > fh or left + pw > fw:
        raise FieldShapeError(f"window {window} outside frame {fh}x{fw}")
    return np.ascontiguousarray(frame[top : top + ph, left : left + pw])


def selection_report(selections, r, stride):
    """JSON-serializable per-video selection summary."""
    return {
        "r": r,
        "stride": stride,
        "eta_implied": selections[0].eta_implied if selections else None,
        "selections": [s.to_json() for s in selections],
        "warning": None if selections else "no eligible frames",
    }
