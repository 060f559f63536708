import json
import logging
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from errors import ConfigurationError, ContractViolationError, DatasetError
from latent_service import SeededRng
from models_data import PackedDataset, ShapeMotionSpec, VideoClip

logger = logging.getLogger(__name__)

PACKED_MAGIC = b"SMV1"
PACKED_VERSION = 1
INDEX_FILENAME = "index.json"
LABEL_FILENAME = "label"

_PACKED_HEADER = struct.Struct("<4sII")
_CLIP_HEADER = struct.Struct("<iHHH")
_TRAILER_COUNT = struct.Struct("<H")
_TRAILER_ENTRY = struct.Struct("<Hd")

PathLike = Union[str, Path]


def normalize(frames: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """u8 -> float32 in [-1, 1]"""
    return torch.as_tensor(np.asarray(frames), dtype=torch.float32) / 127.5 - 1.0


def denormalize(frames: torch.Tensor) -> np.ndarray:
    """[-1, 1] -> u8, rounded then clamped"""
    values = torch.round((frames.detach().to(torch.float32).cpu() + 1.0) * 127.5)
    return values.clamp(0, 255).to(torch.uint8).numpy()


def clip_to_tensor(clip: VideoClip) -> torch.Tensor:
    """(K, H, W, 3) u8 -> (K, 3, H, W) in [-1, 1]"""
    return normalize(clip.frames).permute(0, 3, 1, 2).contiguous()


def tensor_to_frames(video: torch.Tensor) -> np.ndarray:
    """(K, 3, H, W) in [-1, 1] -> (K, H, W, 3) u8"""
    return denormalize(video.permute(0, 2, 3, 1))


def bezier_point(p0, p1, p2, p3, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ContractViolationError(f"bezier parameter must lie in [0, 1], got {t}")
    p0, p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2, p3))
    s = 1.0 - t
    return s ** 3 * p0 + 3 * s ** 2 * t * p1 + 3 * s * t ** 2 * p2 + t ** 3 * p3


def _covered_span(shape: str, center: float, extent: float) -> Tuple[int, int]:
    if shape == "square":
        return int(np.ceil(center - extent)), int(np.ceil(center + extent)) - 1
    return int(np.ceil(center - extent)), int(np.floor(center + extent))


def render_shape_frame(shape: str, center: Sequence[float], extent: float, color: Sequence[int],
                       canvas: Union[int, Tuple[int, int]]) -> np.ndarray:
    """
    Filled shape on black, no anti-aliasing. `center` is (x, y) in pixel
    indices; a square covers [c - extent, c + extent) on both axes, a circle
    every pixel within `extent` of the center.
    """
    height, width = (canvas, canvas) if isinstance(canvas, int) else canvas
    cx, cy = float(center[0]), float(center[1])
    for c, limit in ((cx, width), (cy, height)):
        lo, hi = _covered_span(shape, c, extent)
        if lo < 0 or hi > limit - 1:
            raise DatasetError(f"{shape} at {tuple(center)} with extent {extent} leaves the {width}x{height} frame")

    ys, xs = np.mgrid[0:height, 0:width]
    if shape == "square":
        mask = (xs >= cx - extent) & (xs < cx + extent) & (ys >= cy - extent) & (ys < cy + extent)
    elif shape == "circle":
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= extent ** 2
    else:
        raise ConfigurationError(f"unknown shape '{shape}'")

    frame = np.zeros((height, width, 3), dtype=np.uint8)
    frame[mask] = np.asarray(color, dtype=np.uint8)
    return frame


def _sample_color(rng: np.random.Generator, min_sum: int) -> Tuple[int, int, int]:
    while True:
        color = rng.integers(0, 256, size=3)
        if int(color.sum()) >= min_sum:
            return tuple(int(c) for c in color)


def _trajectory(motion: str, rng: np.random.Generator, lo: float, hi: float, length: int) -> np.ndarray:
    """Rounded cubic Bezier centers; endpoints on opposite margins of the safe box"""
    if motion == "left_to_right":
        p0 = (lo, rng.uniform(lo, hi))
        p3 = (hi, rng.uniform(lo, hi))
    elif motion == "top_down":
        p0 = (rng.uniform(lo, hi), lo)
        p3 = (rng.uniform(lo, hi), hi)
    else:
        raise ConfigurationError(f"unknown motion '{motion}'")
    p1 = rng.uniform(lo, hi, size=2)
    p2 = rng.uniform(lo, hi, size=2)
    ts = [k / (length - 1) for k in range(length)] if length > 1 else [0.0]
    return np.rint(np.stack([bezier_point(p0, p1, p2, p3, t) for t in ts]))


def _render_clip(spec: ShapeMotionSpec, index: int) -> VideoClip:
    rng = SeededRng.for_purpose(spec.seed, "shape-motion", index).numpy()
    label = index % len(spec.motions)
    shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
    lo_extent, hi_extent = spec.extent_range
    extent = int(rng.integers(lo_extent, hi_extent + 1))
    color = _sample_color(rng, spec.min_color_sum)

    centers = _trajectory(spec.motions[label], rng, float(extent), float(spec.size - 1 - extent), spec.length)
    frames = np.stack([render_shape_frame(shape, c, extent, color, spec.size) for c in centers])
    return VideoClip(frames=frames, label=label)


def generate_shape_motion(spec: ShapeMotionSpec, workers: int = 1) -> PackedDataset:
    lo_extent, hi_extent = spec.extent_range
    if lo_extent < 1 or lo_extent > hi_extent or spec.size - 1 - 2 * hi_extent <= 0:
        raise ConfigurationError(f"frame size {spec.size} cannot hold shapes of extent {lo_extent}..{hi_extent}")
    if spec.min_color_sum > 765:
        raise ConfigurationError("minimum color sum is above 3 * 255")

    # every clip has its own RNG stream, so order and worker count do not matter
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            clips = list(pool.map(lambda i: _render_clip(spec, i), range(spec.count)))
    else:
        clips = [_render_clip(spec, i) for i in range(spec.count)]

    balance = Counter(clip.label for clip in clips)
    logger.info("Generated %d shape-motion clips, class balance %s", len(clips), dict(sorted(balance.items())))
    metadata = {
        "source": "shape_motion",
        "spec": spec.model_dump(mode="json"),
        "trajectory": "cubic bezier, endpoints on opposite safe margins, inner control points uniform",
    }
    return PackedDataset(clips=clips, p_k=length_histogram(clips), metadata=metadata)


def length_histogram(clips: Sequence[VideoClip]) -> Dict[int, float]:
    counts = Counter(clip.length for clip in clips)
    total = sum(counts.values())
    return {k: counts[k] / total for k in sorted(counts)}


def write_packed(dataset: PackedDataset, path: PathLike):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    histogram = length_histogram(dataset.clips)
    with open(path, "wb") as f:
        f.write(_PACKED_HEADER.pack(PACKED_MAGIC, PACKED_VERSION, len(dataset.clips)))
        for clip in dataset.clips:
            label = -1 if clip.label is None else clip.label
            f.write(_CLIP_HEADER.pack(label, clip.length, clip.height, clip.width))
            f.write(np.ascontiguousarray(clip.frames).tobytes())
        f.write(_TRAILER_COUNT.pack(len(histogram)))
        for length, prob in histogram.items():
            f.write(_TRAILER_ENTRY.pack(length, prob))
    logger.info("Wrote %d clips to %s", len(dataset.clips), path)


def _read(f, n: int, path: Path) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DatasetError(f"{path}: file is truncated")
    return data


def read_packed(path: PathLike) -> PackedDataset:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    with open(path, "rb") as f:
        magic, version, count = _PACKED_HEADER.unpack(_read(f, _PACKED_HEADER.size, path))
        if magic != PACKED_MAGIC:
            raise DatasetError(f"{path} is not a packed shape-motion file (bad magic)")
        if version != PACKED_VERSION:
            raise DatasetError(f"{path}: unsupported version {version}")
        clips = []
        for _ in range(count):
            label, K, H, W = _CLIP_HEADER.unpack(_read(f, _CLIP_HEADER.size, path))
            frames = np.frombuffer(_read(f, K * H * W * 3, path), dtype=np.uint8).reshape(K, H, W, 3).copy()
            clips.append(VideoClip(frames=frames, label=None if label < 0 else label))
        (entries,) = _TRAILER_COUNT.unpack(_read(f, _TRAILER_COUNT.size, path))
        stored = {}
        for _ in range(entries):
            length, prob = _TRAILER_ENTRY.unpack(_read(f, _TRAILER_ENTRY.size, path))
            stored[length] = prob

    if stored != length_histogram(clips):
        raise DatasetError(f"{path}: stored length histogram does not match the clips")
    return PackedDataset(clips=clips, p_k=stored, metadata={"source": str(path)})


def _read_index(root: Path) -> Dict[str, Dict[str, Any]]:
    index_path = root / INDEX_FILENAME
    if not index_path.is_file():
        return {}
    try:
        entries = json.loads(index_path.read_text())["videos"]
        return {entry["folder"]: entry for entry in entries}
    except (ValueError, KeyError, TypeError) as e:
        raise DatasetError(f"{index_path} is not a valid video index: {e}") from e


def _folder_label(video_dir: Path, index: Dict[str, Dict[str, Any]]) -> Optional[int]:
    label_path = video_dir / LABEL_FILENAME
    if label_path.is_file():
        raw = label_path.read_text().strip()
    elif index.get(video_dir.name, {}).get("action") is not None:
        raw = index[video_dir.name]["action"]
    else:
        return None
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise DatasetError(f"video '{video_dir.name}' has a non-integer label: {raw!r}") from None


def load_frame_folder(root: PathLike) -> PackedDataset:
    """
    One subdirectory per video holding lexicographically ordered PNGs and an
    optional `label` file. Folders written by `export_videos` also take their
    labels from index.json.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"frame folder not found: {root}")
    index = _read_index(root)

    clips = []
    for video_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frame_paths = sorted(video_dir.glob("*.png"))
        if not frame_paths:
            raise DatasetError(f"video '{video_dir.name}' has no PNG frames")
        frames = []
        for frame_path in frame_paths:
            try:
                with Image.open(frame_path) as image:
                    frames.append(np.asarray(image.convert("RGB"), dtype=np.uint8))
            except (UnidentifiedImageError, OSError) as e:
                raise DatasetError(f"video '{video_dir.name}': cannot read frame {frame_path.name}: {e}") from e
        if len({f.shape for f in frames}) != 1:
            raise DatasetError(f"video '{video_dir.name}' mixes frame sizes")

        clips.append(VideoClip(frames=np.stack(frames), label=_folder_label(video_dir, index)))

    if not clips:
        raise DatasetError(f"no videos found under {root}")
    return PackedDataset(clips=clips, p_k=length_histogram(clips),
                         metadata={"source": str(root), "index": list(index.values())})


def export_videos(videos: Sequence[Union[VideoClip, np.ndarray]], out_dir: PathLike,
                  entries: Optional[Sequence[Dict[str, Any]]] = None) -> Path:
    """Write numbered PNG folders plus an index.json describing each video"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, video in enumerate(videos):
        frames = video.frames if isinstance(video, VideoClip) else video
        folder = f"video_{i:04d}"
        video_dir = out_dir / folder
        video_dir.mkdir(exist_ok=True)
        for k, frame in enumerate(frames):
            Image.fromarray(frame).save(video_dir / f"frame_{k:04d}.png")
        record = {"folder": folder, "frames": len(frames)}
        if entries is not None:
            record.update(entries[i])
        records.append(record)
    index_path = out_dir / INDEX_FILENAME
    index_path.write_text(json.dumps({"videos": records}, indent=2, sort_keys=True))
    logger.info("Exported %d videos to %s", len(records), out_dir)
    return index_path


def load_clips(path: PathLike) -> PackedDataset:
    path = Path(path)
    if path.is_dir():
        return load_frame_folder(path)
    return read_packed(path)


class ClipDataset(Dataset):
    """Torch view of a PackedDataset: (K, 3, H, W) float tensors and integer labels (-1 = none)"""

    def __init__(self, dataset: PackedDataset):
        self.dataset = dataset

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, index: int):
        clip = self.dataset.clips[index]
        return clip_to_tensor(clip), -1 if clip.label is None else clip.label


def collate_clips(items):
    """Keep variable-length clips as a list; labels become a tensor"""
    clips, labels = zip(*items)
    return list(clips), torch.tensor(labels, dtype=torch.long)
