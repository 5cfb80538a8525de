"""Pluggable backends for the two external neural dependencies (optical flow
and conditional blurring), plus deterministic doubles that the whole test
suite runs on. Adapters declare concurrency capabilities instead of the
orchestrator assuming thread safety."""

import hashlib
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .fields import BlurConditionField, FieldShapeError, FlowField, NormalizationConstant
from .synth import DEFAULT_RENDER_STEPS, as_frame, render_conditioned_blur


class BackendLoadError(RuntimeError):
    """Checkpoint missing or incompatible with the adapter."""


@runtime_checkable
class FlowEstimator(Protocol):
    concurrent_safe: bool

    def estimate(self, frame_a, frame_b) -> FlowField: ...


@runtime_checkable
class BlurringModel(Protocol):
    concurrent_safe: bool
    stochastic: bool

    def blur(self, sharp, cond: BlurConditionField) -> np.ndarray: ...


def _frame_key(frame):
    arr = np.ascontiguousarray(np.asarray(frame, dtype=np.float32))
    return hashlib.sha1(arr.tobytes() + str(arr.shape).encode()).hexdigest()


class InjectedFlowEstimator:
    """Flow table keyed by frame-pair content; exact, deterministic.

    An optional fallback(frame_a, frame_b) -> FlowField handles pairs not
    registered up front (e.g. crops of frames with uniform analytic motion).
    """

    concurrent_safe = True

    def __init__(self, fallback=None):
        self._table = {}
        self._fallback = fallback

    def register(self, frame_a, frame_b, flow: FlowField):
        self._table[(_frame_key(frame_a), _frame_key(frame_b))] = flow

    def estimate(self, frame_a, frame_b) -> FlowField:
        key = (_frame_key(frame_a), _frame_key(frame_b))
        hit = self._table.get(key)
        if hit is not None:
            return hit
        if self._fallback is not None:
            return self._fallback(frame_a, frame_b)
        raise KeyError(f"no injected flow for frame pair {key}")


class OracleBlurringModel:
    """Deterministic conditioned-blur backend built on the line-sample
    renderer; the default backend for all desk-scale runs."""

    concurrent_safe = True
    stochastic = False

    def __init__(self, tau, steps=DEFAULT_RENDER_STEPS):
        if not isinstance(tau, NormalizationConstant):
            tau = NormalizationConstant(float(tau))
        self.tau = tau
        self.steps = int(steps)

    def blur(self, sharp, cond: BlurConditionField) -> np.ndarray:
        return render_conditioned_blur(sharp, cond, self.tau, self.steps)


def oracle_backend(tau, steps=DEFAULT_RENDER_STEPS) -> OracleBlurringModel:
    return OracleBlurringModel(tau, steps)


class _RaftAdapter:
    concurrent_safe = False  # shared torch module, not guarded

    def __init__(self, model):
        self._model = model

    def estimate(self, frame_a, frame_b) -> FlowField:
        import torch

        a = as_frame(frame_a)
        b = as_frame(frame_b)
        if a.shape != b.shape:
            raise FieldShapeError(f"frame shape mismatch: {a.shape} vs {b.shape}")
        if a.shape[2] == 1:
            a = np.repeat(a, 3, axis=2)
            b = np.repeat(b, 3, axis=2)
        with torch.no_grad():
            # raft expects [-1, 1]-normalized NCHW input
            ta = torch.from_numpy(a).permute(2, 0, 1)[None] * 2.0 - 1.0
            tb = torch.from_numpy(b).permute(2, 0, 1)[None] * 2.0 - 1.0
            flow = self._model(ta, tb)[-1][0].numpy()
        return FlowField(flow[0], flow[1])


def raft_adapter_load(checkpoint_path, variant="small") -> _RaftAdapter:
    """Wrap a pre-trained recurrent flow network checkpoint as a FlowEstimator."""
    path = Path(checkpoint_path)
    if not path.exists():
        raise BackendLoadError(f"flow checkpoint not found: {path}")
    import torch
    from torchvision.models import optical_flow

    builder = optical_flow.raft_small if variant == "small" else optical_flow.raft_large
    model = builder(weights=None)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        model.load_state_dict(state)
    except Exception as exc:
        raise BackendLoadError(f"cannot load flow checkpoint {path}: {exc}") from exc
    model.eval()
    return _RaftAdapter(model)


class _DiffusionBlurAdapter:
    concurrent_safe = False

    def __init__(self, module, steps, seed):
        self._module = module
        self.steps = steps
        self.seed = seed
        self.stochastic = seed is None

    def blur(self, sharp, cond: BlurConditionField) -> np.ndarray:
        import torch

        sharp = as_frame(sharp)
        if cond.shape != sharp.shape[:2]:
            raise FieldShapeError(
                f"condition shape {cond.shape} does not match frame {sharp.shape[:2]}"
            )
        if self.seed is not None:
            torch.manual_seed(self.seed)
        with torch.no_grad():
            s = torch.from_numpy(sharp).permute(2, 0, 1)[None]
            c = torch.from_numpy(cond.stacked()).permute(2, 0, 1)[None]
            out = self._module(s, c)[0].permute(1, 2, 0).numpy()
        if out.shape != sharp.shape:
            raise FieldShapeError(
                f"blurring backend returned shape {out.shape}, expected {sharp.shape}"
            )
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def idblau_adapter_load(checkpoint_path, steps=None, seed=None) -> _DiffusionBlurAdapter:
    """Load a scripted conditional-diffusion blurring checkpoint.

    The checkpoint must be a TorchScript module with signature
    (sharp NCHW, condition NCHW3) -> blurred NCHW. A fixed seed makes
    sampling deterministic; without one the adapter reports stochastic=True.
    """
    path = Path(checkpoint_path)
    if not path.exists():
        raise BackendLoadError(f"blurring checkpoint not found: {path}")
    import torch

    try:
        module = torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:
        raise BackendLoadError(
            f"cannot load blurring checkpoint {path}: {exc}"
        ) from exc
    module.eval()
    return _DiffusionBlurAdapter(module, steps, seed)
