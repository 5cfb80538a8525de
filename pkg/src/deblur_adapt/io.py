"""File formats: Middlebury .flo flows, BCF1 condition fields, PNG frames
and .npy magnitude maps. All writers are deterministic so artifacts can be
compared byte-for-byte across runs."""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .fields import BlurConditionField, BlurMagnitudeMap, FlowField

# "PIEH" interpreted as a little-endian float32
FLO_MAGIC = 202021.25
BCF_MAGIC = b"BCF1"


class FileFormatError(ValueError):
    """File does not match the expected binary layout."""


def write_flo(path, flow: FlowField):
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = flow.u
    data[..., 1] = flow.v
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(data.tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FileFormatError(f"{path}: truncated .flo header")
    (magic,) = struct.unpack_from("<f", raw, 0)
    if magic != FLO_MAGIC:
        raise FileFormatError(f"{path}: bad .flo magic {magic}")
    w, h = struct.unpack_from("<ii", raw, 4)
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(data[..., 0].copy(), data[..., 1].copy())


def write_bcf(path, cond: BlurConditionField):
    h, w = cond.shape
    with open(path, "wb") as f:
        f.write(BCF_MAGIC)
        f.write(struct.pack("<III", h, w, 3))
        for plane in (cond.x, cond.y, cond.z):
            f.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def read_bcf(path) -> BlurConditionField:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise FileFormatError(f"{path}: truncated BCF header")
    if raw[:4] != BCF_MAGIC:
        raise FileFormatError(f"{path}: bad BCF magic {raw[:4]!r}")
    h, w, c = struct.unpack_from("<III", raw, 4)
    if c != 3:
        raise FileFormatError(f"{path}: expected 3 channels, got {c}")
    expected = 16 + 4 * 3 * h * w
    if len(raw) != expected:
        raise FileFormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    planes = np.frombuffer(raw, dtype="<f4", offset=16).reshape(3, h, w)
    # raw flows written by ablation modes are legal, so skip the unit check
    return BlurConditionField.unchecked(planes[0], planes[1], planes[2])


def save_frame(path, frame):
    """Write an H×W or H×W×C float [0,1] frame as an 8-bit PNG."""
    arr = np.clip(np.asarray(frame), 0.0, 1.0)
    img = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def load_frame(path):
    """Read a PNG into a float32 [0,1] H×W×C array."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_magnitude(path, mag: BlurMagnitudeMap):
    np.save(path, mag.m.astype("<f4"))


def load_magnitude(path) -> BlurMagnitudeMap:
    return BlurMagnitudeMap(np.load(path))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def list_frames(video_dir, pattern="*.png"):
    """Frame paths in a video directory, ordered by filename.

    A manifest.json with a "frames" list of filenames overrides the order.
    """
    video_dir = Path(video_dir)
    manifest = video_dir / "manifest.json"
    if manifest.exists():
        names = read_json(manifest)["frames"]
        return [video_dir / n for n in names]
    return sorted(video_dir.glob(pattern))
