"""Synthetic blur generation: exposure-accumulation blurring of sharp frame
sequences, a deterministic conditioned-blur renderer used as the test-time
blurring oracle, a toy-sequence factory with analytic flows, and ground-truth
dataset construction for magnitude-estimator training."""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates, zoom

from .fields import (
    BlurConditionField,
    BlurMagnitudeMap,
    FieldShapeError,
    FlowField,
    NormalizationConstant,
    accumulate_training_trajectory,
    magnitude_ground_truth,
)

DEFAULT_EXPOSURE_FRAMES = 7
DEFAULT_RENDER_STEPS = 15


class FlowEstimationError(RuntimeError):
    """Flow backend failed; message carries the sequence identifier."""


def as_frame(arr, name="frame"):
    """Validate and cast an H×W×C image to float32."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise FieldShapeError(f"{name} must be H×W×{{1,3}}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FieldShapeError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class CRFSpec:
    """Camera response applied to the accumulated linear intensity."""

    kind: str = "identity"  # identity | gamma
    gamma_value: float = 2.2

    def __post_init__(self):
        if self.kind not in ("identity", "gamma"):
            raise ValueError(f"unknown CRF kind: {self.kind!r}")
        if not (self.gamma_value > 0):
            raise ValueError(f"gamma_value must be positive, got {self.gamma_value}")

    def apply(self, linear):
        if self.kind == "identity":
            return linear
        return np.clip(linear, 0.0, 1.0) ** np.float32(1.0 / self.gamma_value)


@dataclass(frozen=True)
class TrainingSample:
    blurred: np.ndarray
    sharp: np.ndarray
    magnitude_gt: BlurMagnitudeMap
    tau_used: NormalizationConstant
    seq_id: str = ""


def synthesize_blurred_frame(frames, crf=CRFSpec()):
    """Average an odd-length sharp sequence and apply the camera response.

    The center frame is the sharp ground truth associated with the result.
    """
    n = len(frames)
    if n < 1 or n % 2 == 0:
        raise FieldShapeError(f"need an odd number of frames >= 1, got {n}")
    frames = [as_frame(f) for f in frames]
    if len({f.shape for f in frames}) > 1:
        raise FieldShapeError("frames have mixed shapes")
    acc = np.zeros(frames[0].shape, dtype=np.float64)
    for f in frames:
        acc += f
    mean = (acc / n).astype(np.float32)
    return crf.apply(mean)


def center_frame_index(n):
    """0-based index of the sharp ground-truth frame in an odd window."""
    if n % 2 == 0:
        raise FieldShapeError(f"window length must be odd, got {n}")
    return (n - 1) // 2


def render_conditioned_blur(sharp, cond: BlurConditionField, tau, steps=DEFAULT_RENDER_STEPS):
    """Deterministic conditioned blurring by line-sampling along (x, y)·z·tau.

    Averages `steps` bilinear samples spaced evenly on the segment centered
    at each pixel with total length z·tau along the condition orientation.
    Samples outside the image clamp to the border. Pixels with z == 0 (and
    steps == 1) reproduce the input bit-exactly.
    """
    sharp = as_frame(sharp)
    if not isinstance(tau, NormalizationConstant):
        tau = NormalizationConstant(float(tau))
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    h, w, c = sharp.shape
    if cond.shape != (h, w):
        raise FieldShapeError(
            f"condition shape {cond.shape} does not match frame {(h, w)}"
        )
    if steps == 1:
        return sharp.copy()

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = cond.x.astype(np.float64) * cond.z.astype(np.float64) * tau.tau
    dy = cond.y.astype(np.float64) * cond.z.astype(np.float64) * tau.tau
    acc = np.zeros((h, w, c), dtype=np.float64)
    for s in range(steps):
        t = s / (steps - 1) - 0.5
        rows = yy + t * dy
        cols = xx + t * dx
        for ch in range(c):
            acc[..., ch] += map_coordinates(
                sharp[..., ch].astype(np.float64),
                [rows, cols],
                order=1,
                mode="nearest",
            )
    out = np.clip(acc / steps, 0.0, 1.0).astype(np.float32)
    # zero-length trajectories must be bit-identical to the input
    static = cond.z == 0.0
    out[static] = sharp[static]
    return out


@dataclass(frozen=True)
class ToyObject:
    top: int
    left: int
    size: int
    velocity: tuple  # (vx, vy), integer pixels per frame


@dataclass(frozen=True)
class ToyMotionSpec:
    height: int = 96
    width: int = 96
    n_frames: int = 7
    background_velocity: tuple = (0, 0)  # (vx, vy), integer pixels per frame
    objects: tuple = field(default_factory=tuple)
    seed: int = 0
    texture_scale: int = 8  # coarse-noise cell size; larger = smoother


def _smooth_texture(rng, h, w, channels, cell):
    coarse = rng.random((max(2, h // cell + 2), max(2, w // cell + 2), channels))
    tex = zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1), order=1)
    return np.clip(tex[:h, :w], 0.0, 1.0).astype(np.float32)


def generate_toy_sequence(spec: ToyMotionSpec):
    """Render a sequence with analytically known motion.

    Returns (frames, gt_flows): frames[n] for n = 0..n_frames-1 and
    gt_flows[n] = exact flow from frame n to frame n+1. Velocities are
    integer per-frame displacements so frames are exact shifted copies.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    bvx, bvy = (int(v) for v in spec.background_velocity)
    pad = (max(abs(bvx), abs(bvy)) + max(
        (max(abs(int(o.velocity[0])), abs(int(o.velocity[1]))) for o in spec.objects),
        default=0,
    )) * spec.n_frames + 2
    canvas = _smooth_texture(rng, h + 2 * pad, w + 2 * pad, 3, spec.texture_scale)
    obj_textures = [
        _smooth_texture(rng, o.size, o.size, 3, max(2, spec.texture_scale // 2))
        for o in spec.objects
    ]

    frames = []
    footprints = []  # per frame: list of (top, left, size, velocity)
    for n in range(spec.n_frames):
        top0 = pad - n * bvy
        left0 = pad - n * bvx
        frame = canvas[top0 : top0 + h, left0 : left0 + w].copy()
        frame_objs = []
        for o, tex in zip(spec.objects, obj_textures):
            vx, vy = int(o.velocity[0]), int(o.velocity[1])
            top = o.top + n * vy
            left = o.left + n * vx
            t0, l0 = max(top, 0), max(left, 0)
            t1, l1 = min(top + o.size, h), min(left + o.size, w)
            if t1 > t0 and l1 > l0:
                frame[t0:t1, l0:l1] = tex[t0 - top : t1 - top, l0 - left : l1 - left]
            frame_objs.append((top, left, o.size, (vx, vy)))
        frames.append(frame)
        footprints.append(frame_objs)

    gt_flows = []
    for n in range(spec.n_frames - 1):
        u = np.full((h, w), float(bvx), dtype=np.float32)
        v = np.full((h, w), float(bvy), dtype=np.float32)
        for top, left, size, (vx, vy) in footprints[n]:
            t0, l0 = max(top, 0), max(left, 0)
            t1, l1 = min(top + size, h), min(left + size, w)
            if t1 > t0 and l1 > l0:
                u[t0:t1, l0:l1] = float(vx)
                v[t0:t1, l0:l1] = float(vy)
        gt_flows.append(FlowField(u, v))
    return frames, gt_flows


def build_bme_dataset(sequences, flow, crf=CRFSpec()):
    """Construct (blurred, sharp, magnitude) training samples from sharp
    high-FPS sequences.

    sequences: iterable of (seq_id, list of frames), each odd length >= 3.
    flow: estimator with estimate(frame_a, frame_b) -> FlowField.
    The normalization constant is the maximum un-normalized trajectory norm
    over the whole corpus, shared by every sample.
    """
    raw = []
    for seq_id, frames in sequences:
        n = len(frames)
        if n < 3 or n % 2 == 0:
            raise FieldShapeError(
                f"sequence {seq_id!r}: need odd length >= 3, got {n}"
            )
        blurred = synthesize_blurred_frame(frames, crf)
        sharp = as_frame(frames[center_frame_index(n)])
        try:
            forward = [flow.estimate(frames[i], frames[i + 1]) for i in range(n - 1)]
            backward = [FlowField(
                np.zeros(forward[0].shape, np.float32),
                np.zeros(forward[0].shape, np.float32),
            )]
            backward += [flow.estimate(frames[i], frames[i - 1]) for i in range(1, n - 1)]
        except Exception as exc:
            raise FlowEstimationError(
                f"flow estimation failed for sequence {seq_id!r}: {exc}"
            ) from exc
        traj = accumulate_training_trajectory(forward, backward)
        raw.append((seq_id, blurred, sharp, traj))

    corpus_max = max((t.norm().max() for _, _, _, t in raw), default=0.0)
    # an all-static corpus has no scale of its own; any positive tau works
    tau = NormalizationConstant(float(corpus_max) if corpus_max > 0 else 1.0)
    samples = [
        TrainingSample(blurred, sharp, magnitude_ground_truth(traj, tau), tau, seq_id)
        for seq_id, blurred, sharp, traj in raw
    ]
    return samples, tau
