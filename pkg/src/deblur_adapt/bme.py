"""Blur magnitude estimator: a five-stage convolutional encoder-decoder with
multi-scale feature fusion across neighboring encoder stages, trained with an
L1 loss against flow-derived magnitude maps."""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .fields import BlurMagnitudeMap
from .io import write_json
from .synth import as_frame

STAGE_COUNT = 5
PAD_MULTIPLE = 16  # four stride-2 downsamplings


@dataclass(frozen=True)
class BMEConfig:
    base_channels: int = 32
    input_size: int = 320
    lr_init: float = 1e-3
    lr_final: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    toy_mode: bool = False

    def __post_init__(self):
        if not (self.lr_init >= self.lr_final > 0):
            raise ValueError("need lr_init >= lr_final > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def toy(cls, base_channels=4, input_size=128, batch_size=8, epochs=10):
        return cls(
            base_channels=base_channels,
            input_size=input_size,
            batch_size=batch_size,
            epochs=epochs,
            toy_mode=True,
        )

    @property
    def stage_widths(self):
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c, 8 * c)


def msff_input_indices(k):
    """Which encoder stages feed the fusion block at stage k."""
    if k in (1, 2, 3):
        return (k - 1, k, k + 1)
    if k == 0:
        return (0, 1, 2)
    if k == 4:
        return (4, 3, 2)
    raise ValueError(f"stage index out of range: {k}")


def _conv_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class MSFF(nn.Module):
    """Fuse a stage with its two neighbors: per-input 3x3 conv, bilinear
    resize to the stage's spatial size, concat, then 1x1 and 3x3 convs."""

    def __init__(self, k, widths):
        super().__init__()
        self.k = k
        self.indices = msff_input_indices(k)
        self.pre = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i], 3, padding=1) for i in self.indices]
        )
        total = sum(widths[i] for i in self.indices)
        self.fuse = nn.Sequential(
            nn.Conv2d(total, widths[k], 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(widths[k], widths[k], 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, features):
        if len(features) != STAGE_COUNT:
            raise ValueError(f"expected {STAGE_COUNT} stage features")
        target = features[self.k].shape[-2:]
        resized = []
        for conv, i in zip(self.pre, self.indices):
            x = conv(features[i])
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            resized.append(x)
        return self.fuse(torch.cat(resized, dim=1))


class BMEModel(nn.Module):
    def __init__(self, config: BMEConfig):
        super().__init__()
        self.config = config
        widths = config.stage_widths
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        in_ch = 3
        for k, w in enumerate(widths):
            self.enc.append(_conv_block(in_ch, w))
            if k < STAGE_COUNT - 1:
                self.down.append(nn.Conv2d(w, widths[k + 1], 3, stride=2, padding=1))
            in_ch = widths[k + 1] if k < STAGE_COUNT - 1 else w
        self.msff = nn.ModuleList([MSFF(k, widths) for k in range(STAGE_COUNT)])
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for k in range(STAGE_COUNT - 2, -1, -1):
            self.up.append(nn.Conv2d(widths[k + 1], widths[k], 3, padding=1))
            self.dec.append(_conv_block(2 * widths[k], widths[k]))
        self.head = nn.Conv2d(widths[0], 1, 3, padding=1)

    def forward(self, x):
        feats = []
        h = x
        for k in range(STAGE_COUNT):
            h = self.enc[k](h)
            feats.append(h)
            if k < STAGE_COUNT - 1:
                h = self.down[k](h)
        fused = [m(feats) for m in self.msff]
        h = fused[-1]
        for i, k in enumerate(range(STAGE_COUNT - 2, -1, -1)):
            h = F.interpolate(h, size=fused[k].shape[-2:], mode="bilinear", align_corners=False)
            h = self.up[i](h)
            h = self.dec[i](torch.cat([h, fused[k]], dim=1))
        return torch.sigmoid(self.head(h))


def estimate_magnitude(model: BMEModel, frame) -> BlurMagnitudeMap:
    """Run the estimator on one frame, padding reflectively to a multiple of
    16 and cropping back. Deterministic in inference mode."""
    frame = as_frame(frame)
    if frame.shape[2] == 1:
        frame = np.repeat(frame, 3, axis=2)
    h, w, _ = frame.shape
    ph = (-h) % PAD_MULTIPLE
    pw = (-w) % PAD_MULTIPLE
    x = torch.from_numpy(frame).permute(2, 0, 1)[None]
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    model.eval()
    with torch.no_grad():
        m = model(x)[0, 0, :h, :w].numpy()
    return BlurMagnitudeMap(np.clip(m, 0.0, 1.0))


def _resize_pair(frame, mag, size):
    f = torch.from_numpy(frame).permute(2, 0, 1)[None]
    m = torch.from_numpy(mag)[None, None]
    f = F.interpolate(f, size=(size, size), mode="bilinear", align_corners=False)
    m = F.interpolate(m, size=(size, size), mode="bilinear", align_corners=False)
    return f[0], m[0]


def _augment(f, m, rng):
    if rng.random() < 0.5:
        f, m = torch.flip(f, [-1]), torch.flip(m, [-1])
    if rng.random() < 0.5:
        f, m = torch.flip(f, [-2]), torch.flip(m, [-2])
    rot = int(rng.integers(0, 4))
    if rot:
        f, m = torch.rot90(f, rot, [-2, -1]), torch.rot90(m, rot, [-2, -1])
    return f, m


def train_bme(dataset, config: BMEConfig, seed=0, max_steps=None):
    """Train the estimator on (blurred, magnitude) samples.

    Returns (model, log); log["epoch_l1"] holds the per-epoch mean training
    L1. Deterministic for a fixed seed on fixed hardware.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = BMEModel(config)
    model.train()

    frames, mags = [], []
    for s in dataset:
        frame = s.blurred if s.blurred.shape[2] == 3 else np.repeat(s.blurred, 3, axis=2)
        f, m = _resize_pair(frame, s.magnitude_gt.m, config.input_size)
        frames.append(f)
        mags.append(m)

    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = (
        max_steps if max_steps is not None else config.epochs * steps_per_epoch
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_init)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(total_steps, 1), eta_min=config.lr_final
    )

    log = {"epoch_l1": [], "steps": 0}
    step = 0
    for _epoch in range(config.epochs):
        if step >= total_steps:
            break
        order = rng.permutation(len(dataset))
        losses = []
        for i in range(0, len(order), config.batch_size):
            if step >= total_steps:
                break
            idx = order[i : i + config.batch_size]
            batch_f, batch_m = [], []
            for j in idx:
                f, m = _augment(frames[j], mags[j], rng)
                batch_f.append(f)
                batch_m.append(m)
            xb = torch.stack(batch_f)
            yb = torch.stack(batch_m)
            pred = model(xb)
            loss = F.l1_loss(pred, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            step += 1
        log["epoch_l1"].append(float(np.mean(losses)))
    log["steps"] = step
    return model, log


def save_bme(path, model: BMEModel, tau, meta_path=None):
    payload = {
        "state_dict": model.state_dict(),
        "config": asdict(model.config),
        "tau": float(tau.tau if hasattr(tau, "tau") else tau),
    }
    torch.save(payload, path)
    if meta_path is not None:
        write_json(
            meta_path,
            {
                "config": payload["config"],
                "tau": payload["tau"],
                "stage_widths": list(model.config.stage_widths),
            },
        )


def load_bme(path):
    payload = torch.load(path, map_location="cpu", weights_only=True)
    config = BMEConfig(**payload["config"])
    model = BMEModel(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["tau"]
