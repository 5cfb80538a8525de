"""Acceptance suite: one test per shipped guarantee. Each test prints a
numbered PASS/FAIL line so a log scan shows exactly which guarantees hold.

The end-to-end criteria run a desk-scale experiment: a small deblurring
model trained on horizontally blurred synthetic videos is adapted, through
the full mining / condition-generation / reblurring pipeline, to vertically
blurred target videos, and must beat its unadapted baseline.
"""

import dataclasses
import math
import shutil
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from deblur_adapt.bme import BMEConfig, BMEModel, estimate_magnitude, train_bme
from deblur_adapt.fields import (
    BlurConditionField,
    BlurMagnitudeMap,
    FlowField,
    MotionTrajectoryMap,
    NormalizationConstant,
    accumulate_test_trajectory,
    accumulate_training_trajectory,
    adapt_magnitude,
    magnitude_ground_truth,
    orientation_field,
)
from deblur_adapt.pipeline import PipelineConfig, cmd_ablate, cmd_adapt
from deblur_adapt.rsdm import frame_sharpness_score, select_pseudo_sharp
from deblur_adapt.synth import TrainingSample, render_conditioned_blur
from deblur_adapt.adapt import save_toy_deblur

from toyworld import TAU, make_target_corpus, train_source_deblur


@contextmanager
def criterion(number, label):
    try:
        yield
    except BaseException:
        print(f"[criterion {number}] FAIL  {label}")
        raise
    print(f"[criterion {number}] PASS  {label}")


# ---------------------------------------------------------------------------
# criterion 1: field math matches independent per-pixel brute-force oracles


def _oracle_training_traj(fwd, bwd):
    h, w = fwd[0].u.shape
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    for yy in range(h):
        for xx in range(w):
            su = sv = 0.0
            for f, b in zip(fwd, bwd):
                su += (float(f.u[yy, xx]) - float(b.u[yy, xx])) / 2.0
                sv += (float(f.v[yy, xx]) - float(b.v[yy, xx])) / 2.0
            u[yy, xx] = su
            v[yy, xx] = sv
    return u, v


def _oracle_test_traj(flows):
    h, w = flows[0].u.shape
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    for yy in range(h):
        for xx in range(w):
            u[yy, xx] = sum(float(f.u[yy, xx]) for f in flows)
            v[yy, xx] = sum(float(f.v[yy, xx]) for f in flows)
    return u, v


def _oracle_magnitude(u, v, tau):
    h, w = u.shape
    m = np.zeros((h, w))
    for yy in range(h):
        for xx in range(w):
            m[yy, xx] = min(math.hypot(float(u[yy, xx]), float(v[yy, xx])) / tau, 1.0)
    return m


def _oracle_orientation(u, v, eps):
    h, w = u.shape
    ox = np.zeros((h, w))
    oy = np.zeros((h, w))
    for yy in range(h):
        for xx in range(w):
            n = math.hypot(float(u[yy, xx]), float(v[yy, xx]))
            if n > eps:
                ox[yy, xx] = float(u[yy, xx]) / n
                oy[yy, xx] = float(v[yy, xx]) / n
    return ox, oy


def _oracle_adapt(center, neighbors):
    h, w = center.shape
    peak = 0.0
    for yy in range(h):
        for xx in range(w):
            peak = max(peak, float(center[yy, xx]))
    out = np.zeros((h, w))
    for yy in range(h):
        for xx in range(w):
            normed = float(center[yy, xx]) / peak if peak > 0 else float(center[yy, xx])
            avg = sum(float(n[yy, xx]) for n in neighbors) / len(neighbors)
            out[yy, xx] = min(max(normed * avg, 0.0), 1.0)
    return out


def _random_flows(rng, shape, count):
    return [FlowField(rng.normal(0, 3, shape), rng.normal(0, 3, shape))
            for _ in range(count)]


def test_criterion_1_field_oracles():
    rng = np.random.default_rng(11)
    tol = 1e-4
    with criterion(1, "field accumulation/normalization match brute-force oracles"):
        for _ in range(100):
            shape = (int(rng.integers(8, 65)), int(rng.integers(8, 65)))
            steps = int(rng.integers(2, 6))

            fwd = _random_flows(rng, shape, steps)
            bwd = [FlowField(np.zeros(shape), np.zeros(shape))] + _random_flows(
                rng, shape, steps - 1)
            traj = accumulate_training_trajectory(fwd, bwd)
            ou, ov = _oracle_training_traj(fwd, bwd)
            assert np.abs(traj.u - ou).max() < tol
            assert np.abs(traj.v - ov).max() < tol

            flows = _random_flows(rng, shape, 4)
            traj = accumulate_test_trajectory(flows)
            ou, ov = _oracle_test_traj(flows)
            assert np.abs(traj.u - ou).max() < tol
            assert np.abs(traj.v - ov).max() < tol

            tau = float(np.hypot(ou, ov).max()) * float(rng.uniform(1.0, 1.5)) + 1e-3
            mag = magnitude_ground_truth(traj, NormalizationConstant(tau))
            assert np.abs(mag.m - _oracle_magnitude(ou, ov, tau)).max() < tol

            orient = orientation_field(traj)
            ox, oy = _oracle_orientation(ou, ov, 1e-6)
            assert np.abs(orient.ox - ox).max() < tol
            assert np.abs(orient.oy - oy).max() < tol

            center = BlurMagnitudeMap(rng.random(shape).astype(np.float32))
            neighbors = [BlurMagnitudeMap(rng.random(shape).astype(np.float32))
                         for _ in range(4)]
            adapted = adapt_magnitude(center, neighbors)
            oracle = _oracle_adapt(center.m, [n.m for n in neighbors])
            assert np.abs(adapted.m - oracle).max() < tol


# ---------------------------------------------------------------------------
# criterion 2: orientation fields are unit-norm or exactly zero


def test_criterion_2_orientation_invariant():
    rng = np.random.default_rng(2)
    with criterion(2, "orientations unit-norm within 1e-5, exact zero when static"):
        u = rng.normal(0, 2, (100, 100))
        v = rng.normal(0, 2, (100, 100))
        static = rng.random((100, 100)) < 0.2
        u[static] = 0.0
        v[static] = 0.0
        orient = orientation_field(MotionTrajectoryMap(u, v))
        norm = np.hypot(u, v)
        moving = norm > 1e-6
        sq = orient.ox.astype(np.float64) ** 2 + orient.oy.astype(np.float64) ** 2
        assert np.abs(np.sqrt(sq[moving]) - 1.0).max() < 1e-5
        assert np.all(orient.ox[~moving] == 0.0)
        assert np.all(orient.oy[~moving] == 0.0)


# ---------------------------------------------------------------------------
# criterion 3: mining count formula, score ordering, and monotonicity in r


def test_criterion_3_mining_count_and_ordering():
    rng = np.random.default_rng(3)
    with criterion(3, "patch mining count formula, ordering, monotone in r"):
        for _ in range(50):
            t_total = int(rng.integers(5, 61))
            mags = [BlurMagnitudeMap(rng.random((40, 40)).astype(np.float32))
                    for _ in range(t_total)]
            sels = select_pseudo_sharp(mags, r=20, patch=32, stride=8)
            eligible = list(range(2, t_total - 2))
            assert len(sels) == min(math.ceil(0.2 * t_total), len(eligible))
            chosen = {s.frame_index for s in sels}
            worst = max((s.score for s in sels), default=0.0)
            for t in eligible:
                if t not in chosen:
                    score, _ = frame_sharpness_score(mags[t], patch=32, stride=8)
                    assert worst <= score + 1e-9
            prev = set()
            for r in (10, 20, 30):
                cur = {s.frame_index
                       for s in select_pseudo_sharp(mags, r=r, patch=32, stride=8)}
                assert prev <= cur
                prev = cur


# ---------------------------------------------------------------------------
# criterion 4: reblur identity at zero magnitude, kernel equivalence on impulse


def _oracle_impulse_blur(sharp, dx, steps):
    h, w, c = sharp.shape
    out = np.zeros((h, w, c))
    for s in range(steps):
        t = s / (steps - 1) - 0.5
        for yy in range(h):
            for xx in range(w):
                col = min(max(xx + t * dx, 0.0), w - 1.0)
                x0 = int(math.floor(col))
                x1 = min(x0 + 1, w - 1)
                f = col - x0
                out[yy, xx] += (1.0 - f) * sharp[yy, x0] + f * sharp[yy, x1]
    return out / steps


def test_criterion_4_reblur_identity_and_kernel():
    rng = np.random.default_rng(4)
    with criterion(4, "zero-magnitude reblur bit-identity; impulse kernel match"):
        frame = rng.random((24, 24, 3)).astype(np.float32)
        zero = BlurConditionField(np.zeros((24, 24), np.float32),
                                  np.zeros((24, 24), np.float32),
                                  np.zeros((24, 24), np.float32))
        out = render_conditioned_blur(frame, zero, TAU, steps=15)
        assert out.tobytes() == frame.tobytes()

        impulse = np.zeros((33, 33, 3), np.float32)
        impulse[16, 16] = 1.0
        z = 0.5
        cond = BlurConditionField(np.ones((33, 33), np.float32),
                                  np.zeros((33, 33), np.float32),
                                  np.full((33, 33), z, np.float32))
        out = render_conditioned_blur(impulse, cond, TAU, steps=9)
        oracle = _oracle_impulse_blur(impulse.astype(np.float64), z * TAU, 9)
        assert np.abs(out.astype(np.float64) - oracle).sum() < 1e-4


# ---------------------------------------------------------------------------
# criterion 5: magnitude estimator trains on toy data; gradients are correct


def _bme_toy_sample(rng, size=128, z_bg=0.25, z_obj=0.75):
    """Dark, mildly blurred background with a bright, strongly blurred
    object: the magnitude is locally inferable, so a small model can fit it
    within a short training budget."""
    frame = rng.uniform(0.0, 0.3, (size, size, 3)).astype(np.float32)
    bh, bw = int(rng.integers(48, 81)), int(rng.integers(48, 81))
    top = int(rng.integers(0, size - bh))
    left = int(rng.integers(0, size - bw))
    frame[top : top + bh, left : left + bw] = rng.uniform(0.7, 1.0, (bh, bw, 3))
    mask = np.zeros((size, size), np.float32)
    mask[top : top + bh, left : left + bw] = 1.0
    zmap = (z_bg + (z_obj - z_bg) * mask).astype(np.float32)
    cond = BlurConditionField(np.ones_like(mask), np.zeros_like(mask), zmap)
    blurred = render_conditioned_blur(frame, cond, TAU, steps=9)
    return TrainingSample(blurred, frame, BlurMagnitudeMap(zmap),
                          NormalizationConstant(TAU))


def test_criterion_5_bme_training_and_gradients():
    rng = np.random.default_rng(0)
    with criterion(5, "magnitude estimator reaches L1 < 0.05 in 200 steps; "
                      "gradients match finite differences"):
        samples = [_bme_toy_sample(rng) for _ in range(64)]
        config = BMEConfig(base_channels=4, input_size=128, batch_size=16,
                           epochs=50, lr_init=5e-3, lr_final=1e-3)
        model, log = train_bme(samples, config, seed=0, max_steps=200)
        assert log["steps"] <= 200
        l1 = float(np.mean([
            np.abs(estimate_magnitude(model, s.blurred).m - s.magnitude_gt.m).mean()
            for s in samples
        ]))
        print(f"    mean L1 after {log['steps']} steps: {l1:.4f}")
        assert l1 < 0.05

        torch.manual_seed(0)
        small = BMEModel(BMEConfig(base_channels=4, input_size=16)).double()
        x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
        y = torch.rand(1, 1, 16, 16, dtype=torch.float64)
        loss = torch.nn.functional.l1_loss(small(x), y)
        loss.backward()
        params = [p for p in small.parameters() if p.grad is not None]
        flat = [(p, i) for p in params for i in range(min(p.numel(), 5))]
        picks = rng.choice(len(flat), size=100, replace=False)
        h = 1e-6
        for k in picks:
            p, i = flat[int(k)]
            with torch.no_grad():
                orig = p.view(-1)[i].item()
                p.view(-1)[i] = orig + h
                up = torch.nn.functional.l1_loss(small(x), y).item()
                p.view(-1)[i] = orig - h
                down = torch.nn.functional.l1_loss(small(x), y).item()
                p.view(-1)[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = p.grad.view(-1)[i].item()
            if abs(numeric - analytic) < 1e-8:
                continue  # dead path; finite difference is rounding noise
            assert abs(numeric - analytic) / max(abs(numeric), abs(analytic)) < 1e-3


# ---------------------------------------------------------------------------
# criteria 6-8: desk-scale end-to-end experiment


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("target_videos")
    make_target_corpus(root, n_videos=4, seed=100, velocity=(0, 2),
                       max_blur_px=8.0, n_frames=14, size=80)
    return root


@pytest.fixture(scope="module")
def source_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("source") / "deblur.pt"
    save_toy_deblur(path, train_source_deblur(seed=7, max_blur_px=8.0))
    return path


def make_config(corpus, out, ckpt, **overrides):
    base = dict(
        videos_dir=str(corpus), output_dir=str(out), deblur_checkpoint=str(ckpt),
        seed=0, r=40.0, patch=48, stride=16, epochs=20, tau=TAU, render_steps=9,
        flow={"kind": "injected"}, magnitude={"kind": "injected"},
        blurring={"kind": "oracle"},
    )
    base.update(overrides)
    return PipelineConfig(**base)


def test_criterion_6_directional_adaptation(toy_corpus, source_ckpt, tmp_path):
    with criterion(6, "adapting to the target blur style gains >= 0.3 dB PSNR"):
        config = make_config(toy_corpus, tmp_path / "adapt", source_ckpt)
        report = cmd_adapt(config)
        gain = report["adapted"]["psnr"] - report["baseline"]["psnr"]
        print(f"    baseline {report['baseline']['psnr']:.3f} dB, "
              f"adapted {report['adapted']['psnr']:.3f} dB, gain {gain:+.3f} dB")
        assert gain >= 0.3


def test_criterion_7_ablation_ordering(toy_corpus, source_ckpt, tmp_path):
    with criterion(7, "mined patches + generated conditions win the 2x3 ablation"):
        config = make_config(toy_corpus, tmp_path / "ablate", source_ckpt)
        summary = cmd_ablate(config)
        cells = {name: cell["adapted_psnr"] for name, cell in summary.items()}
        assert len(cells) == 6
        for name, value in sorted(cells.items()):
            print(f"    {name:16s} {value:.3f} dB")
        best = max(cells, key=cells.get)
        assert best == "rsdm_dbcgm"
        margin = cells["rsdm_dbcgm"] - max(
            v for k, v in cells.items() if k != "rsdm_dbcgm")
        print(f"    margin over runner-up: {margin:+.3f} dB")
        assert margin > 0.1  # ordering must survive a +-0.1 dB rerun wobble


def test_criterion_8_bit_identical_reruns(toy_corpus, source_ckpt, tmp_path):
    with criterion(8, "seeded reruns reproduce every artifact bit for bit"):
        out = tmp_path / "run"
        config = make_config(toy_corpus, out, source_ckpt, epochs=5)
        cmd_adapt(config)
        first = {
            p.relative_to(out): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file()
        }
        shutil.rmtree(out)
        cmd_adapt(dataclasses.replace(config))
        second = {
            p.relative_to(out): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file()
        }
        assert set(first) == set(second)
        for rel in first:
            assert first[rel] == second[rel], f"artifact differs: {rel}"
