import math

import numpy as np
import pytest

from deblur_adapt.fields import BlurMagnitudeMap, FieldShapeError
from deblur_adapt.rsdm import (
    component_window,
    crop_patch,
    frame_sharpness_score,
    select_pseudo_sharp,
    selection_report,
)


def brute_force_min_window(mag, patch, stride):
    """Nested-loop oracle over all stride-aligned plus corner-flush windows."""
    h, w = mag.shape
    rows = sorted(set(list(range(0, h - patch + 1, stride)) + [h - patch]))
    cols = sorted(set(list(range(0, w - patch + 1, stride)) + [w - patch]))
    best = None
    for top in rows:
        for left in cols:
            mean = float(mag[top : top + patch, left : left + patch]
                         .astype(np.float64).mean())
            if best is None or mean < best[0] - 1e-12:
                best = (mean, (top, left))
    return best


def mags_from_scores(scores, shape=(40, 40)):
    return [BlurMagnitudeMap(np.full(shape, s, np.float32)) for s in scores]


class TestFrameSharpnessScore:
    def test_constant_map_tie_break(self):
        mag = BlurMagnitudeMap(np.full((300, 300), 0.3, np.float32))
        score, window = frame_sharpness_score(mag, patch=256, stride=32)
        assert score == pytest.approx(0.3, abs=1e-6)
        assert window == (0, 0, 256, 256)

    def test_finds_embedded_sharp_region(self):
        m = np.ones((384, 384), np.float32)
        m[64:320, 64:320] = 0.0
        score, window = frame_sharpness_score(BlurMagnitudeMap(m), patch=256, stride=64)
        assert score == pytest.approx(0.0, abs=1e-9)
        assert window[:2] == (64, 64)

    def test_matches_bruteforce(self, rng):
        for _ in range(5):
            h = int(rng.integers(64, 129))
            w = int(rng.integers(64, 129))
            mag = BlurMagnitudeMap(rng.random((h, w)).astype(np.float32))
            score, window = frame_sharpness_score(mag, patch=48, stride=16)
            b_score, b_pos = brute_force_min_window(mag.m, 48, 16)
            assert abs(score - b_score) < 1e-6

    def test_small_frame_raises(self):
        with pytest.raises(FieldShapeError):
            frame_sharpness_score(BlurMagnitudeMap(np.zeros((100, 100))), patch=256)


class TestSelectPseudoSharp:
    def test_count_r20(self):
        mags = mags_from_scores(np.linspace(0.1, 0.9, 10), shape=(40, 40))
        sels = select_pseudo_sharp(mags, r=20, patch=32, stride=8)
        assert len(sels) == 2

    def test_selects_smallest_scores(self):
        scores = [0.5] * 10
        scores[3] = 0.1
        scores[7] = 0.2
        sels = select_pseudo_sharp(mags_from_scores(scores), r=20, patch=32, stride=8)
        assert sorted(s.frame_index for s in sels) == [3, 7]

    def test_tie_break_by_frame_index(self):
        mags = mags_from_scores([0.5] * 10)
        sels = select_pseudo_sharp(mags, r=30, patch=32, stride=8)
        # eligible frames start at t=2 (temporal margin)
        assert [s.frame_index for s in sels] == [2, 3, 4]

    def test_temporal_margin_exclusion(self):
        scores = [0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0]
        sels = select_pseudo_sharp(mags_from_scores(scores), r=100, patch=32, stride=8)
        assert all(2 <= s.frame_index <= 7 for s in sels)

    def test_count_formula(self, rng):
        for _ in range(10):
            t = int(rng.integers(1, 30))
            mags = mags_from_scores(rng.random(t))
            sels = select_pseudo_sharp(mags, r=20, patch=32, stride=8)
            eligible = max(t - 4, 0)
            assert len(sels) == min(math.ceil(0.2 * t), eligible)

    def test_selected_scores_dominate(self, rng):
        mags = [BlurMagnitudeMap(rng.random((40, 40)).astype(np.float32))
                for _ in range(15)]
        sels = select_pseudo_sharp(mags, r=40, patch=32, stride=8)
        chosen = {s.frame_index for s in sels}
        worst = max(s.score for s in sels)
        for t in range(2, 13):
            if t not in chosen:
                score, _ = frame_sharpness_score(mags[t], patch=32, stride=8)
                assert worst <= score + 1e-9

    def test_monotone_in_r(self, rng):
        mags = [BlurMagnitudeMap(rng.random((40, 40)).astype(np.float32))
                for _ in range(20)]
        prev = set()
        for r in (10, 20, 30):
            sels = select_pseudo_sharp(mags, r=r, patch=32, stride=8)
            cur = {s.frame_index for s in sels}
            assert prev <= cur
            prev = cur

    def test_ratio_range_excludes_sharpest(self):
        scores = np.linspace(0.1, 0.9, 20)
        mags = mags_from_scores(scores)
        top = select_pseudo_sharp(mags, r=20, patch=32, stride=8)
        band = select_pseudo_sharp(mags, r=40, r_low=20, patch=32, stride=8)
        assert {s.frame_index for s in top}.isdisjoint(
            {s.frame_index for s in band})
        assert len(band) == 4

    def test_too_blurry_video_empty_with_warning(self):
        mags = [BlurMagnitudeMap(np.zeros((10, 10), np.float32))] * 5
        sels = select_pseudo_sharp(mags, r=20, patch=32, stride=8)
        assert sels == []
        report = selection_report(sels, 20, 8)
        assert report["warning"] is not None

    def test_determinism(self, rng):
        mags = [BlurMagnitudeMap(rng.random((40, 40)).astype(np.float32))
                for _ in range(12)]
        a = select_pseudo_sharp(mags, r=30, patch=32, stride=8)
        b = select_pseudo_sharp(mags, r=30, patch=32, stride=8)
        assert a == b


class TestCropPatch:
    def test_identity_window(self, rng):
        frame = rng.random((32, 32, 3)).astype(np.float32)
        assert crop_patch(frame, (0, 0, 32, 32)).tobytes() == frame.tobytes()

    def test_offset_window(self, rng):
        frame = rng.random((64, 64, 3)).astype(np.float32)
        patch = crop_patch(frame, (10, 20, 16, 16))
        assert patch[0, 0, 0] == frame[10, 20, 0]

    def test_reembed_roundtrip(self, rng):
        frame = rng.random((64, 64, 3)).astype(np.float32)
        window = (8, 24, 16, 16)
        patch = crop_patch(frame, window)
        rebuilt = frame.copy()
        rebuilt[8:24, 24:40] = patch
        assert np.all(rebuilt == frame)

    def test_out_of_bounds(self, rng):
        with pytest.raises(FieldShapeError):
            crop_patch(rng.random((32, 32, 3)), (20, 20, 16, 16))


class TestComponentWindow:
    def test_centers_on_sharp_region(self):
        m = np.ones((100, 100), np.float32)
        m[10:30, 60:80] = 0.0
        window = component_window(BlurMagnitudeMap(m), eta=0.1, patch=32)
        top, left, _, _ = window
        # window centers near the region centroid (19.5, 69.5)
        assert abs(top + 16 - 20) <= 4 and abs(left + 16 - 70) <= 4

    def test_empty_mask_falls_back_to_center(self):
        m = np.ones((64, 64), np.float32)
        window = component_window(BlurMagnitudeMap(m), eta=-1.0, patch=32)
        assert window == (16, 16, 32, 32)

    def test_component_crop_mode_runs(self, rng):
        base = rng.random((64, 64)).astype(np.float32)
        mags = [BlurMagnitudeMap(base) for _ in range(8)]
        sels = select_pseudo_sharp(mags, r=25, patch=32, stride=8,
                                   crop_mode="component")
        assert sels and all(s.window[2:] == (32, 32) for s in sels)
