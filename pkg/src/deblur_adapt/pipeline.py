"""End-to-end orchestration: configuration, on-disk video corpora, stage
caching, and the prepare/train/adapt/ablate/evaluate entry points used by
the command line."""

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .adapt import (
    build_pseudo_dataset,
    evaluate,
    finetune,
    flow_condition,
    load_toy_deblur,
    random_condition,
    save_toy_deblur,
)
from .backends import InjectedFlowEstimator, idblau_adapter_load, oracle_backend, raft_adapter_load
from .bme import BMEConfig, estimate_magnitude, load_bme, save_bme, train_bme
from .dbcgm import gather_window, generate_condition_from_parts
from .fields import BlurMagnitudeMap, FlowField, NormalizationConstant
from .rsdm import PatchSelection, select_pseudo_sharp, selection_report
from .synth import CRFSpec, TrainingSample, build_bme_dataset, center_frame_index


@dataclass
class PipelineConfig:
    videos_dir: str = ""
    output_dir: str = ""
    deblur_checkpoint: str = ""
    bme_checkpoint: str = ""
    seed: int = 0
    r: float = 20.0
    r_low: float | None = None
    patch: int = 256
    stride: int = 32
    epochs: int = 10
    finetune_batch: int = 4
    patch_mode: str = "rsdm"  # rsdm | random
    condition_mode: str = "dbcgm"  # dbcgm | flow | random
    crop_mode: str = "window"  # window | component
    adapt_mode: str = "elementwise"  # elementwise | scalar
    tau: float = 8.0  # pixels; corpus normalization for rendering/magnitudes
    render_steps: int = 15
    flow: dict = field(default_factory=lambda: {"kind": "injected"})
    magnitude: dict = field(default_factory=lambda: {"kind": "bme"})
    blurring: dict = field(default_factory=lambda: {"kind": "oracle"})
    exposure_frames: int = 7
    crf: str = "identity"
    crf_gamma: float = 2.2

    def __post_init__(self):
        if self.patch_mode not in ("rsdm", "random"):
            raise ValueError(f"unknown patch_mode: {self.patch_mode!r}")
        if self.condition_mode not in ("dbcgm", "flow", "random"):
            raise ValueError(f"unknown condition_mode: {self.condition_mode!r}")

    @classmethod
    def from_json(cls, path, overrides=None):
        data = io.read_json(path)
        data.update(overrides or {})
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_json(self):
        return dataclasses.asdict(self)


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def _hash_bytes(*chunks):
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def _hash_file(path):
    return _hash_bytes(Path(path).read_bytes())


class StageCache:
    """Content-hash keyed skip list; a hit means the stage's artifacts are
    already on disk from an identical run."""

    def __init__(self, output_dir):
        self.path = Path(output_dir) / "cache.json"
        self.entries = io.read_json(self.path) if self.path.exists() else {}

    def fresh(self, stage, key, artifacts):
        return self.entries.get(stage) == key and all(Path(a).exists() for a in artifacts)

    def record(self, stage, key):
        self.entries[stage] = key
        io.write_json(self.path, self.entries)


def load_target_videos(videos_dir):
    """Target-domain corpus: videos/<vid>/blur/*.png plus optional sharp/,
    flows/ (.flo, frame n to n+1) and mags/ (.npy) sidecars."""
    videos_dir = Path(videos_dir)
    if not videos_dir.exists():
        raise FileNotFoundError(f"videos directory not found: {videos_dir}")
    corpus = {}
    for vid_dir in sorted(p for p in videos_dir.iterdir() if p.is_dir()):
        blur_dir = vid_dir / "blur"
        if not blur_dir.exists():
            continue
        entry = {"frames": [io.load_frame(p) for p in io.list_frames(blur_dir)]}
        sharp_dir = vid_dir / "sharp"
        if sharp_dir.exists():
            entry["sharp"] = [io.load_frame(p) for p in io.list_frames(sharp_dir)]
        flow_dir = vid_dir / "flows"
        if flow_dir.exists():
            entry["flows"] = [io.read_flo(p) for p in sorted(flow_dir.glob("*.flo"))]
        mag_dir = vid_dir / "mags"
        if mag_dir.exists():
            entry["mags"] = [io.load_magnitude(p) for p in sorted(mag_dir.glob("*.npy"))]
        corpus[vid_dir.name] = entry
    if not corpus:
        raise FileNotFoundError(f"no videos with blur/ frames under {videos_dir}")
    return corpus


def _magnitude_source(config, corpus):
    """Returns mag_of(video_id, t) -> full-frame BlurMagnitudeMap."""
    kind = config.magnitude.get("kind", "bme")
    if kind == "injected":
        def mag_of(vid, t):
            mags = corpus[vid].get("mags")
            if mags is None:
                raise StageError("magnitudes", f"video {vid!r} has no mags/ sidecar")
            return mags[t]
        return mag_of
    if kind == "bme":
        ckpt = config.magnitude.get("checkpoint") or config.bme_checkpoint
        model, _tau = load_bme(ckpt)
        cache = {}
        def mag_of(vid, t):
            if (vid, t) not in cache:
                cache[(vid, t)] = estimate_magnitude(model, corpus[vid]["frames"][t])
            return cache[(vid, t)]
        return mag_of
    raise ValueError(f"unknown magnitude kind: {kind!r}")


def _flow_source(config, corpus):
    """Returns flows_for(video_id, t, window) -> 4 patch-level FlowFields
    for the collocated window t-2..t+2."""
    kind = config.flow.get("kind", "injected")
    if kind == "injected":
        def flows_for(vid, t, window):
            flows = corpus[vid].get("flows")
            if flows is None:
                raise StageError("flows", f"video {vid!r} has no flows/ sidecar")
            top, left, ph, pw = window
            out = []
            for n in range(t - 2, t + 2):
                fl = flows[n]
                out.append(FlowField(
                    fl.u[top : top + ph, left : left + pw],
                    fl.v[top : top + ph, left : left + pw],
                ))
            return out
        return flows_for
    if kind == "raft":
        estimator = raft_adapter_load(config.flow["checkpoint"],
                                      config.flow.get("variant", "small"))
        def flows_for(vid, t, window):
            sel = PatchSelection(vid, t, window, 0.0)
            win = gather_window(corpus[vid]["frames"], sel)
            return [estimator.estimate(win.patches[i], win.patches[i + 1])
                    for i in range(4)]
        return flows_for
    raise ValueError(f"unknown flow kind: {kind!r}")


def _blur_backend(config):
    kind = config.blurring.get("kind", "oracle")
    if kind == "oracle":
        return oracle_backend(config.tau, config.blurring.get("steps", config.render_steps))
    if kind == "idblau":
        return idblau_adapter_load(
            config.blurring["checkpoint"],
            steps=config.blurring.get("steps"),
            seed=config.blurring.get("seed"),
        )
    raise ValueError(f"unknown blurring kind: {kind!r}")


def _random_selections(corpus, config, rng):
    """Ablation patch mode: seeded random eligible frames and windows."""
    selections = []
    for vid, entry in sorted(corpus.items()):
        frames = entry["frames"]
        t_total = len(frames)
        eligible = [t for t in range(2, t_total - 2)
                    if frames[t].shape[0] >= config.patch
                    and frames[t].shape[1] >= config.patch]
        if not eligible:
            continue
        count = min(math.ceil(config.r / 100.0 * t_total), len(eligible))
        picks = rng.choice(len(eligible), size=count, replace=False)
        for p in sorted(picks):
            t = eligible[int(p)]
            h, w = frames[t].shape[:2]
            top = int(rng.integers(0, h - config.patch + 1))
            left = int(rng.integers(0, w - config.patch + 1))
            selections.append(PatchSelection(
                vid, t, (top, left, config.patch, config.patch), float("nan")))
    return selections


def mine_selections(corpus, config, mag_of):
    """RSDM (or random-ablation) patch selection across the whole corpus."""
    if config.patch_mode == "random":
        rng = np.random.default_rng([config.seed, 0xA11])
        return _random_selections(corpus, config, rng)
    selections = []
    for vid, entry in sorted(corpus.items()):
        mags = [mag_of(vid, t) for t in range(len(entry["frames"]))]
        selections.extend(select_pseudo_sharp(
            mags, r=config.r, patch=config.patch, stride=config.stride,
            video_id=vid, r_low=config.r_low, crop_mode=config.crop_mode,
        ))
    return selections


def make_condition_fn(config, corpus, mag_of, flows_for):
    """Condition generator for one collocated window, per condition_mode."""
    def crop_mag(vid, t, window):
        top, left, ph, pw = window
        m = mag_of(vid, t).m
        return BlurMagnitudeMap(m[top : top + ph, left : left + pw])

    def condition_fn(window):
        vid, t = window.video_id, window.frame_index
        if config.condition_mode == "random":
            vid_key = int.from_bytes(hashlib.sha256(vid.encode()).digest()[:4], "little")
            rng = np.random.default_rng([config.seed, 0xC0, vid_key, t])
            return random_condition(window.center.shape[:2], rng)
        flows = flows_for(vid, t, window.window)
        if config.condition_mode == "flow":
            return flow_condition(flows, config.tau)
        mags = [crop_mag(vid, t + n, window.window) for n in range(-2, 3)]
        return generate_condition_from_parts(flows, mags, adapt_mode=config.adapt_mode)

    return condition_fn


def _persist_selections(selections, config, out_root, corpus):
    by_video = {}
    for s in selections:
        by_video.setdefault(s.video_id, []).append(s)
    for vid, sels in sorted(by_video.items()):
        vdir = out_root / "patches" / vid
        vdir.mkdir(parents=True, exist_ok=True)
        io.write_json(out_root / "patches" / vid / "selections.json",
                      selection_report(sels, config.r, config.stride))
        for s in sels:
            top, left, ph, pw = s.window
            patch = corpus[vid]["frames"][s.frame_index][top : top + ph, left : left + pw]
            io.save_frame(vdir / f"t{s.frame_index:06d}.png", patch)


def _persist_pairs(pairs, out_root):
    for i, p in enumerate(pairs):
        vid = p.provenance["video_id"]
        t = p.provenance["frame"]
        cdir = out_root / "conditions" / vid
        pdir = out_root / "pairs" / vid
        cdir.mkdir(parents=True, exist_ok=True)
        pdir.mkdir(parents=True, exist_ok=True)
        io.write_bcf(cdir / f"t{t:06d}.bcf", p.condition)
        io.save_frame(pdir / f"t{t:06d}_sharp.png", p.sharp)
        io.save_frame(pdir / f"t{t:06d}_blurred.png", p.blurred)
        io.write_json(pdir / f"t{t:06d}_meta.json", p.provenance)


def _artifact_hashes(out_root):
    hashes = {}
    for path in sorted(out_root.rglob("*")):
        if path.is_file() and path.suffix in (".png", ".bcf", ".flo", ".npy"):
            hashes[str(path.relative_to(out_root))] = _hash_file(path)
    return hashes


def cmd_adapt(config: PipelineConfig):
    """Mine patches, generate conditions, reblur, fine-tune, evaluate."""
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    corpus = load_target_videos(config.videos_dir)

    try:
        mag_of = _magnitude_source(config, corpus)
        flows_for = _flow_source(config, corpus)
        backend = _blur_backend(config)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("backends", str(exc)) from exc

    try:
        selections = mine_selections(corpus, config, mag_of)
    except Exception as exc:
        raise StageError("selection", str(exc)) from exc
    if not selections:
        raise StageError("selection", "no eligible frames in any video")
    _persist_selections(selections, config, out_root, corpus)

    try:
        condition_fn = make_condition_fn(config, corpus, mag_of, flows_for)
        video_frames = {vid: entry["frames"] for vid, entry in corpus.items()}
        pairs, failures = build_pseudo_dataset(selections, video_frames,
                                               condition_fn, backend)
    except Exception as exc:
        raise StageError("pairs", str(exc)) from exc
    _persist_pairs(pairs, out_root)

    eval_videos = [
        (vid, entry["frames"], entry["sharp"])
        for vid, entry in sorted(corpus.items())
        if "sharp" in entry
    ]
    try:
        model = load_toy_deblur(config.deblur_checkpoint)
        baseline = evaluate(model, eval_videos) if eval_videos else None
        log = finetune(model, pairs, epochs=config.epochs, seed=config.seed,
                       batch_size=config.finetune_batch)
        adapted = evaluate(model, eval_videos) if eval_videos else None
    except Exception as exc:
        raise StageError("finetune", str(exc)) from exc
    save_toy_deblur(out_root / "adapted_model.pt", model)

    report = {
        "config": config.to_json(),
        "num_pairs": len(pairs),
        "pair_failures": failures,
        "finetune_log": log,
        "baseline": baseline.to_json() if baseline else None,
        "adapted": adapted.to_json() if adapted else None,
        "artifact_hashes": _artifact_hashes(out_root),
    }
    io.write_json(out_root / "report.json", report)
    (out_root / "report.txt").write_text(_format_report_table(report))
    return report


def _format_report_table(report):
    lines = ["model      PSNR     SSIM", "-" * 26]
    for label in ("baseline", "adapted"):
        m = report.get(label)
        if m is None:
            lines.append(f"{label:<9} (no ground truth)")
            continue
        p = m["psnr"] if m["psnr"] is not None else float("inf")
        lines.append(f"{label:<9} {p:7.3f}  {m['ssim']:.4f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(config: PipelineConfig, patch_modes=("random", "rsdm"),
               condition_modes=("random", "flow", "dbcgm"), r_values=None):
    """Grid of adaptation runs over patch/condition modes or r values.

    A failing cell is recorded without aborting the rest of the grid.
    """
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    cells = []
    if r_values:
        for r in r_values:
            cells.append((f"r{r:g}", {"r": float(r)}))
    else:
        for pm in patch_modes:
            for cm in condition_modes:
                cells.append((f"{pm}_{cm}", {"patch_mode": pm, "condition_mode": cm}))

    summary = {}
    for name, delta in cells:
        cell_config = dataclasses.replace(
            config, output_dir=str(out_root / name), **delta)
        try:
            report = cmd_adapt(cell_config)
            summary[name] = {
                "baseline_psnr": (report["baseline"] or {}).get("psnr"),
                "adapted_psnr": (report["adapted"] or {}).get("psnr"),
                "adapted_ssim": (report["adapted"] or {}).get("ssim"),
            }
        except Exception as exc:
            summary[name] = {"error": str(exc)}
    io.write_json(out_root / "ablation_summary.json", summary)
    lines = ["cell                 adapted PSNR", "-" * 34]
    for name, cell in summary.items():
        val = cell.get("adapted_psnr")
        lines.append(f"{name:<20} {val:.3f}" if val is not None
                     else f"{name:<20} {cell.get('error', 'n/a')}")
    (out_root / "ablation_summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def load_sharp_sequences(sequences_dir, n_s):
    """High-FPS sharp corpus: sequences/<seq>/*.png chopped into
    non-overlapping odd windows of n_s frames."""
    sequences_dir = Path(sequences_dir)
    if not sequences_dir.exists():
        raise FileNotFoundError(f"sequences directory not found: {sequences_dir}")
    chunks = []
    for seq_dir in sorted(p for p in sequences_dir.iterdir() if p.is_dir()):
        paths = io.list_frames(seq_dir)
        frames = [io.load_frame(p) for p in paths]
        flow_dir = seq_dir / "flows"
        flows = ([io.read_flo(p) for p in sorted(flow_dir.glob("*.flo"))]
                 if flow_dir.exists() else None)
        for start in range(0, len(frames) - n_s + 1, n_s):
            window = frames[start : start + n_s]
            window_flows = flows[start : start + n_s - 1] if flows else None
            chunks.append((f"{seq_dir.name}_{start:06d}", window, window_flows))
    if not chunks:
        raise FileNotFoundError(f"no usable sequences under {sequences_dir}")
    return chunks


def _injected_sequence_estimator(window, window_flows):
    """Flow table for one window from its forward ground-truth flows; the
    backward flow n -> n-1 is the negated forward flow n-1 -> n (exact for
    the integer-shift toy sequences)."""
    est = InjectedFlowEstimator()
    for i, fl in enumerate(window_flows):
        est.register(window[i], window[i + 1], fl)
        est.register(window[i + 1], window[i], FlowField(-fl.u, -fl.v))
    return est


def cmd_prepare_data(config: PipelineConfig):
    """Build the (blurred, sharp, magnitude) training corpus on disk."""
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    crf = CRFSpec(config.crf, config.crf_gamma)
    chunks = load_sharp_sequences(config.videos_dir, config.exposure_frames)

    cache = StageCache(out_root)
    key = _hash_bytes(
        repr((config.exposure_frames, config.crf, config.crf_gamma,
              config.flow.get("kind"))).encode(),
        *(np.ascontiguousarray(f).tobytes() for _, w, _ in chunks for f in w),
    )
    meta_path = out_root / "dataset_meta.json"
    if cache.fresh("prepare", key, [meta_path]):
        return io.read_json(meta_path)

    flow_kind = config.flow.get("kind", "injected")
    samples = []
    tau = None
    if flow_kind == "injected":
        seqs, estimators = [], {}
        for seq_id, window, window_flows in chunks:
            if window_flows is None:
                raise StageError("prepare", f"sequence {seq_id!r} has no flows/ sidecar")
            estimators[seq_id] = _injected_sequence_estimator(window, window_flows)
            seqs.append((seq_id, window))

        class _Dispatch:
            concurrent_safe = True

            def estimate(self, a, b):
                return self._current.estimate(a, b)

        dispatch = _Dispatch()
        raw = []
        for seq_id, window in seqs:
            dispatch._current = estimators[seq_id]
            chunk_samples, chunk_tau = build_bme_dataset([(seq_id, window)], dispatch, crf)
            raw.append((chunk_samples[0], chunk_tau))
        # re-normalize with the corpus-wide maximum
        corpus_tau = max(
            (s.magnitude_gt.m.max() * t.tau for s, t in raw), default=0.0)
        tau = NormalizationConstant(float(corpus_tau) if corpus_tau > 0 else 1.0)
        for s, t in raw:
            m = np.clip(s.magnitude_gt.m * (t.tau / tau.tau), 0.0, 1.0)
            samples.append(TrainingSample(s.blurred, s.sharp, BlurMagnitudeMap(m),
                                          tau, s.seq_id))
    elif flow_kind == "raft":
        estimator = raft_adapter_load(config.flow["checkpoint"],
                                      config.flow.get("variant", "small"))
        samples, tau = build_bme_dataset(
            [(seq_id, window) for seq_id, window, _ in chunks], estimator, crf)
    else:
        raise ValueError(f"unknown flow kind: {flow_kind!r}")

    samples_dir = out_root / "samples"
    samples_dir.mkdir(exist_ok=True)
    for s in samples:
        sdir = samples_dir / s.seq_id
        sdir.mkdir(exist_ok=True)
        io.save_frame(sdir / "blurred.png", s.blurred)
        io.save_frame(sdir / "sharp.png", s.sharp)
        io.save_magnitude(sdir / "magnitude.npy", s.magnitude_gt)
    meta = {
        "tau": tau.tau,
        "exposure_frames": config.exposure_frames,
        "crf": config.crf,
        "num_samples": len(samples),
    }
    io.write_json(meta_path, meta)
    cache.record("prepare", key)
    return meta


def load_training_samples(data_dir):
    """Read back a corpus written by cmd_prepare_data."""
    data_dir = Path(data_dir)
    meta = io.read_json(data_dir / "dataset_meta.json")
    tau = NormalizationConstant(meta["tau"])
    samples = []
    for sdir in sorted((data_dir / "samples").iterdir()):
        if not sdir.is_dir():
            continue
        samples.append(TrainingSample(
            io.load_frame(sdir / "blurred.png"),
            io.load_frame(sdir / "sharp.png"),
            io.load_magnitude(sdir / "magnitude.npy"),
            tau,
            sdir.name,
        ))
    if not samples:
        raise FileNotFoundError(f"no samples under {data_dir}")
    return samples, tau


def cmd_train_bme(data_dir, out_checkpoint, bme_config: BMEConfig, seed=0,
                  max_steps=None):
    samples, tau = load_training_samples(data_dir)
    model, log = train_bme(samples, bme_config, seed=seed, max_steps=max_steps)
    out_checkpoint = Path(out_checkpoint)
    out_checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_bme(out_checkpoint, model, tau,
             meta_path=out_checkpoint.with_name("bme_meta.json"))
    return log


def cmd_evaluate(config: PipelineConfig):
    corpus = load_target_videos(config.videos_dir)
    eval_videos = [
        (vid, entry["frames"], entry["sharp"])
        for vid, entry in sorted(corpus.items())
        if "sharp" in entry
    ]
    if not eval_videos:
        raise StageError("evaluate", "no videos with sharp/ ground truth")
    model = load_toy_deblur(config.deblur_checkpoint)
    report = evaluate(model, eval_videos).to_json()
    out_root = Path(config.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    io.write_json(out_root / "evaluation.json", report)
    return report
