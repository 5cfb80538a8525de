"""Per-pixel motion/blur field math: trajectory accumulation, magnitude
normalization, orientation extraction, magnitude adaptation and condition
assembly. Everything here is pure numpy, deterministic, and thread-safe."""

from dataclasses import dataclass

import numpy as np

DEGENERATE_EPS = 1e-6


class FieldShapeError(ValueError):
    """Inputs have mismatched shapes or an invalid count."""


class MagnitudeRangeError(ValueError):
    """A trajectory norm exceeds the normalization constant (stale tau)."""


def _as_grid(a, name):
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 2:
        raise FieldShapeError(f"{name} must be a 2-D grid, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FieldShapeError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement between two frames, in pixels.

    +x points right, +y points down (image coordinates, origin top-left).
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", _as_grid(self.u, "u"))
        object.__setattr__(self, "v", _as_grid(self.v, "v"))
        if self.u.shape != self.v.shape:
            raise FieldShapeError(
                f"u/v shape mismatch: {self.u.shape} vs {self.v.shape}"
            )

    @property
    def shape(self):
        return self.u.shape


@dataclass(frozen=True)
class MotionTrajectoryMap:
    """Accumulated per-pixel motion (u, v) over a temporal window, in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", _as_grid(self.u, "u"))
        object.__setattr__(self, "v", _as_grid(self.v, "v"))
        if self.u.shape != self.v.shape:
            raise FieldShapeError(
                f"u/v shape mismatch: {self.u.shape} vs {self.v.shape}"
            )

    @property
    def shape(self):
        return self.u.shape

    def norm(self):
        return np.sqrt(self.u**2 + self.v**2)


@dataclass(frozen=True)
class BlurMagnitudeMap:
    """Per-pixel normalized blurriness in [0, 1]."""

    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", _as_grid(self.m, "m"))
        if self.m.size and (self.m.min() < 0.0 or self.m.max() > 1.0):
            raise MagnitudeRangeError(
                f"magnitude outside [0,1]: min={self.m.min()}, max={self.m.max()}"
            )

    @property
    def shape(self):
        return self.m.shape


@dataclass(frozen=True)
class OrientationField:
    """Per-pixel unit direction (ox, oy), or (0, 0) where motion is degenerate."""

    ox: np.ndarray
    oy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ox", _as_grid(self.ox, "ox"))
        object.__setattr__(self, "oy", _as_grid(self.oy, "oy"))
        if self.ox.shape != self.oy.shape:
            raise FieldShapeError(
                f"ox/oy shape mismatch: {self.ox.shape} vs {self.oy.shape}"
            )
        sq = self.ox.astype(np.float64) ** 2 + self.oy.astype(np.float64) ** 2
        bad = (sq > DEGENERATE_EPS) & (np.abs(sq - 1.0) > 1e-5)
        if np.any(bad):
            raise FieldShapeError("orientation vectors must be unit-norm or zero")

    @property
    def shape(self):
        return self.ox.shape


@dataclass(frozen=True)
class BlurConditionField:
    """Per-pixel blur condition (x, y, z): unit orientation + magnitude in [0, 1]."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        orient = OrientationField(self.x, self.y)
        mag = BlurMagnitudeMap(self.z)
        object.__setattr__(self, "x", orient.ox)
        object.__setattr__(self, "y", orient.oy)
        object.__setattr__(self, "z", mag.m)
        if self.x.shape != self.z.shape:
            raise FieldShapeError(
                f"orientation/magnitude shape mismatch: {self.x.shape} vs {self.z.shape}"
            )

    @property
    def shape(self):
        return self.x.shape

    def stacked(self):
        """H×W×3 array (x, y, z)."""
        return np.stack([self.x, self.y, self.z], axis=-1)

    @classmethod
    def unchecked(cls, x, y, z):
        """Build a condition without the unit-orientation invariant.

        Only for ablation modes that intentionally feed non-unit vectors
        (e.g. raw accumulated flow) to the blurring backend.
        """
        obj = object.__new__(cls)
        object.__setattr__(obj, "x", _as_grid(x, "x"))
        object.__setattr__(obj, "y", _as_grid(y, "y"))
        object.__setattr__(obj, "z", _as_grid(z, "z"))
        if obj.x.shape != obj.y.shape or obj.x.shape != obj.z.shape:
            raise FieldShapeError("condition planes must share one shape")
        return obj


@dataclass(frozen=True)
class NormalizationConstant:
    """Positive normalization length (pixels) mapping trajectory norms to [0, 1]."""

    tau: float

    def __post_init__(self):
        if not (self.tau > 0.0):
            raise ValueError(f"tau must be positive, got {self.tau}")


def _check_same_shapes(fields):
    shapes = {f.shape for f in fields}
    if len(shapes) > 1:
        raise FieldShapeError(f"fields have mixed shapes: {sorted(shapes)}")


def accumulate_training_trajectory(forward_flows, backward_flows):
    """Accumulate per-step central differences over a sharp exposure sequence.

    forward_flows[n] maps frame n to n+1, backward_flows[n] maps frame n to
    n-1; the first backward entry is the all-zero field (there is no frame
    before the first). Returns the elementwise sum of
    (forward - backward) / 2 over all steps.
    """
    if len(forward_flows) == 0 or len(backward_flows) == 0:
        raise FieldShapeError("flow lists must be non-empty")
    if len(forward_flows) != len(backward_flows):
        raise FieldShapeError(
            f"flow list length mismatch: {len(forward_flows)} vs {len(backward_flows)}"
        )
    _check_same_shapes(list(forward_flows) + list(backward_flows))
    u = np.zeros(forward_flows[0].shape, dtype=np.float32)
    v = np.zeros_like(u)
    for fwd, bwd in zip(forward_flows, backward_flows):
        u = u + (fwd.u - bwd.u) / 2.0
        v = v + (fwd.v - bwd.v) / 2.0
    return MotionTrajectoryMap(u, v)


def accumulate_test_trajectory(flows):
    """Sum the four consecutive flows of a 5-frame collocated window."""
    if len(flows) != 4:
        raise FieldShapeError(f"expected exactly 4 flows, got {len(flows)}")
    _check_same_shapes(flows)
    u = np.zeros(flows[0].shape, dtype=np.float32)
    v = np.zeros_like(u)
    for fl in flows:
        u = u + fl.u
        v = v + fl.v
    return MotionTrajectoryMap(u, v)


def magnitude_ground_truth(traj, tau):
    """Normalize trajectory norms by a corpus-wide constant into [0, 1].

    tau must dominate every pixel norm; a pixel above tau means the constant
    is stale and raises MagnitudeRangeError.
    """
    if not isinstance(tau, NormalizationConstant):
        tau = NormalizationConstant(float(tau))
    norm = traj.norm()
    # relative slack absorbs float32 rounding at the tau-defining pixel
    if np.any(norm > tau.tau * (1.0 + 1e-6)):
        raise MagnitudeRangeError(
            f"trajectory norm {norm.max()} exceeds tau {tau.tau}"
        )
    m = np.clip(norm / np.float32(tau.tau), 0.0, 1.0)
    return BlurMagnitudeMap(m)


def orientation_field(traj, eps=DEGENERATE_EPS):
    """Unit-normalize a trajectory map; pixels with norm <= eps become (0, 0)."""
    if not (eps > 0):
        raise ValueError(f"eps must be positive, got {eps}")
    norm = traj.norm()
    moving = norm > eps
    safe = np.where(moving, norm, 1.0)
    ox = np.where(moving, traj.u / safe, 0.0).astype(np.float32)
    oy = np.where(moving, traj.v / safe, 0.0).astype(np.float32)
    return OrientationField(ox, oy)


def adapt_magnitude(center, neighbors, mode="elementwise"):
    """Modulate a patch's normalized magnitudes by its temporal neighbors.

    Returns Norm(center) * Avg(neighbors), where Norm divides by the map
    maximum (identity for an all-zero map) and Avg is the elementwise mean of
    the four neighbor maps. mode="scalar" averages the neighbors down to a
    single scalar instead.
    """
    if len(neighbors) != 4:
        raise FieldShapeError(f"expected exactly 4 neighbor maps, got {len(neighbors)}")
    _check_same_shapes([center] + list(neighbors))
    if mode not in ("elementwise", "scalar"):
        raise ValueError(f"unknown adaptation mode: {mode!r}")
    peak = center.m.max() if center.m.size else 0.0
    normed = center.m / peak if peak > 0 else center.m
    stack = np.stack([n.m for n in neighbors], axis=0)
    if mode == "elementwise":
        avg = stack.mean(axis=0)
    else:
        avg = np.float32(stack.mean())
    return BlurMagnitudeMap(np.clip(normed * avg, 0.0, 1.0).astype(np.float32))


def assemble_condition(orient, mag):
    """Combine an orientation field and a magnitude map into a condition field."""
    if orient.shape != mag.shape:
        raise FieldShapeError(
            f"orientation/magnitude shape mismatch: {orient.shape} vs {mag.shape}"
        )
    return BlurConditionField(orient.ox, orient.oy, mag.m)
