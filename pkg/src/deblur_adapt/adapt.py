"""Test-time adaptation loop: build pseudo training pairs from mined patches
and generated blur conditions, fine-tune a deblurring model on them, and
score PSNR/SSIM against ground truth."""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from skimage.metrics import structural_similarity

from .dbcgm import gather_window
from .fields import (
    BlurConditionField,
    FieldShapeError,
    NormalizationConstant,
    accumulate_test_trajectory,
)
from .synth import as_frame


@dataclass(frozen=True)
class PseudoPair:
    sharp: np.ndarray
    blurred: np.ndarray
    condition: BlurConditionField
    provenance: dict = field(default_factory=dict)


@runtime_checkable
class DeblurringModel(Protocol):
    def deblur(self, window) -> np.ndarray: ...

    def finetune_step(self, pairs) -> float: ...


def random_condition(shape, rng, block=8, tau=None):
    """Blockwise random blur condition: orientation uniform on the unit
    circle, magnitude uniform in [0, 1], constant over block×block tiles."""
    h, w = shape
    bh, bw = math.ceil(h / block), math.ceil(w / block)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(bh, bw))
    mag = rng.uniform(0.0, 1.0, size=(bh, bw))
    up = lambda a: np.repeat(np.repeat(a, block, 0), block, 1)[:h, :w]
    return BlurConditionField(
        up(np.cos(theta)).astype(np.float32),
        up(np.sin(theta)).astype(np.float32),
        up(mag).astype(np.float32),
    )


def flow_condition(flows, tau) -> BlurConditionField:
    """Raw accumulated flow as the condition: (x, y) are the un-normalized
    trajectory components and z its norm scaled by tau, clamped to [0, 1]."""
    if not isinstance(tau, NormalizationConstant):
        tau = NormalizationConstant(float(tau))
    traj = accumulate_test_trajectory(flows)
    z = np.clip(traj.norm() / np.float32(tau.tau), 0.0, 1.0)
    return BlurConditionField.unchecked(traj.u, traj.v, z)


def build_pseudo_dataset(selections, video_frames, condition_fn, backend):
    """One pseudo pair per selection.

    video_frames: dict video_id -> ordered frame list. condition_fn maps a
    CollocatedWindow to a BlurConditionField. Per-selection backend failures
    are recorded and skipped; zero surviving pairs is an error.
    """
    if not selections:
        raise ValueError("no selections to build pairs from")
    pairs, failures = [], []
    for sel in selections:
        try:
            window = gather_window(video_frames[sel.video_id], sel)
            cond = condition_fn(window)
            blurred = backend.blur(window.center, cond)
        except Exception as exc:
            failures.append({"video": sel.video_id, "frame": sel.frame_index,
                             "error": str(exc)})
            continue
        pairs.append(PseudoPair(
            sharp=as_frame(window.center),
            blurred=as_frame(blurred),
            condition=cond,
            provenance={
                "video_id": sel.video_id,
                "frame": sel.frame_index,
                "window": list(sel.window),
                "backend": type(backend).__name__,
                "seed": getattr(backend, "seed", None),
            },
        ))
    if not pairs:
        raise RuntimeError(f"no pseudo pairs survived; failures: {failures}")
    return pairs, failures


def pairs_digest(pairs):
    """Content hash over all pair arrays; fine-tuning must not mutate them."""
    h = hashlib.sha256()
    for p in pairs:
        h.update(p.sharp.tobytes())
        h.update(p.blurred.tobytes())
        h.update(p.condition.stacked().tobytes())
    return h.hexdigest()


class ToyDeblurModel(nn.Module):
    """Small residual CNN over a 3-frame window with a native L1 loss.

    Desk-scale stand-in for the full-size video deblurring networks; restores
    the center frame of the window.
    """

    WINDOW = 3

    def __init__(self, channels=32, depth=4, lr=1e-4, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        layers = [nn.Conv2d(3 * self.WINDOW, channels, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
        layers.append(nn.Conv2d(channels, 3, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.lr = lr
        self._opt = None

    @property
    def optimizer(self):
        if self._opt is None:
            self._opt = torch.optim.Adam(self.parameters(), lr=self.lr)
        return self._opt

    def forward(self, x):
        center = x[:, 3 * (self.WINDOW // 2) : 3 * (self.WINDOW // 2 + 1)]
        return center + self.net(x)

    def _window_tensor(self, window):
        frames = [as_frame(f) for f in window]
        if len(frames) != self.WINDOW:
            raise FieldShapeError(f"expected {self.WINDOW}-frame window, got {len(frames)}")
        stack = np.concatenate(frames, axis=2)
        return torch.from_numpy(stack).permute(2, 0, 1)[None]

    def deblur(self, window) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            out = self(self._window_tensor(window))[0].permute(1, 2, 0).numpy()
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    def training_step(self, windows, targets) -> float:
        self.train()
        x = torch.cat([self._window_tensor(w) for w in windows])
        y = torch.cat([
            torch.from_numpy(as_frame(t)).permute(2, 0, 1)[None] for t in targets
        ])
        pred = self(x)
        loss = F.l1_loss(pred, y)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss.item())

    def finetune_step(self, pairs) -> float:
        # single-image pseudo pairs are replicated across the temporal window
        windows = [[p.blurred] * self.WINDOW for p in pairs]
        targets = [p.sharp for p in pairs]
        return self.training_step(windows, targets)


def toy_deblur_model(channels=32, depth=4, lr=1e-4, seed=0) -> ToyDeblurModel:
    return ToyDeblurModel(channels=channels, depth=depth, lr=lr, seed=seed)


def save_toy_deblur(path, model: ToyDeblurModel):
    torch.save({
        "state_dict": model.state_dict(),
        "channels": model.net[0].out_channels,
        "depth": sum(1 for m in model.net if isinstance(m, nn.Conv2d)),
        "lr": model.lr,
    }, path)


def load_toy_deblur(path) -> ToyDeblurModel:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    model = ToyDeblurModel(channels=payload["channels"], depth=payload["depth"],
                           lr=payload["lr"])
    model.load_state_dict(payload["state_dict"])
    return model


def finetune(model: DeblurringModel, pairs, epochs=10, seed=0, batch_size=4):
    """Seeded fine-tuning on pseudo pairs with the model's native loss.

    epochs=0 leaves the model untouched. Returns a per-epoch loss log.
    """
    if not pairs:
        raise ValueError("no pairs to fine-tune on")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    log = {"epoch_loss": []}
    for _epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for i in range(0, len(order), batch_size):
            batch = [pairs[j] for j in order[i : i + batch_size]]
            losses.append(model.finetune_step(batch))
        log["epoch_loss"].append(float(np.mean(losses)))
    return log


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio on [0, 1] intensities; inf for exact matches."""
    a = as_frame(a)
    b = as_frame(b)
    if a.shape != b.shape:
        raise FieldShapeError(f"frame shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    """Structural similarity with the standard 11×11 Gaussian window,
    averaged over channels."""
    a = as_frame(a)
    b = as_frame(b)
    return float(structural_similarity(
        a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
        sigma=1.5, win_size=11, use_sample_covariance=False,
    ))


@dataclass
class MetricsReport:
    per_video: dict
    psnr: float
    ssim: float

    def to_json(self):
        def clean(x):
            return None if math.isinf(x) else x

        return {
            "psnr": clean(self.psnr),
            "ssim": self.ssim,
            "psnr_infinite": math.isinf(self.psnr),
            "per_video": {
                vid: {"psnr": clean(v["psnr"]), "ssim": v["ssim"]}
                for vid, v in self.per_video.items()
            },
        }


def evaluate(model: DeblurringModel, videos) -> MetricsReport:
    """Score a model on (video_id, blurred_frames, sharp_frames) triples.

    Per-frame metrics are averaged within each video, then across videos.
    The deblurring window at sequence ends clamps to the boundary frame.
    """
    per_video = {}
    half = ToyDeblurModel.WINDOW // 2
    for video_id, blurred, sharp in videos:
        if len(blurred) != len(sharp):
            raise FieldShapeError(
                f"video {video_id!r}: {len(blurred)} blurred vs {len(sharp)} sharp frames"
            )
        psnrs, ssims = [], []
        for t in range(len(blurred)):
            window = [
                blurred[min(max(t + d, 0), len(blurred) - 1)]
                for d in range(-half, half + 1)
            ]
            restored = model.deblur(window)
            psnrs.append(psnr(restored, sharp[t]))
            ssims.append(ssim(restored, sharp[t]))
        per_video[video_id] = {
            "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)),
        }
    agg_psnr = float(np.mean([v["psnr"] for v in per_video.values()]))
    agg_ssim = float(np.mean([v["ssim"] for v in per_video.values()]))
    return MetricsReport(per_video, agg_psnr, agg_ssim)
