import json
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from dataset_service import (
    ClipDataset,
    bezier_point,
    denormalize,
    export_videos,
    generate_shape_motion,
    length_histogram,
    load_clips,
    load_frame_folder,
    normalize,
    read_packed,
    render_shape_frame,
    write_packed,
)
from errors import ConfigurationError, ContractViolationError, DatasetError
from models_data import PackedDataset, ShapeMotionSpec, VideoClip

SMALL_SPEC = ShapeMotionSpec(count=20, size=32, length=8, seed=7)


def _mask(frame: np.ndarray) -> np.ndarray:
    return frame.any(axis=-1)


def _centroid(frame: np.ndarray):
    ys, xs = np.nonzero(_mask(frame))
    return xs.mean(), ys.mean()


def test_bezier_endpoints_and_range():
    p0, p1, p2, p3 = (0, 0), (1, 5), (4, 5), (6, 2)
    assert np.allclose(bezier_point(p0, p1, p2, p3, 0.0), p0)
    assert np.allclose(bezier_point(p0, p1, p2, p3, 1.0), p3)
    with pytest.raises(ContractViolationError):
        bezier_point(p0, p1, p2, p3, 1.5)


def test_square_average_color_matches_area():
    color = (200, 100, 40)
    frame = render_shape_frame("square", (10, 12), 3, color, 32)
    assert _mask(frame).sum() == 36
    expected = np.array(color) * 36 / (32 * 32)
    assert np.allclose(frame.reshape(-1, 3).mean(axis=0), expected)


def test_circle_covers_disc():
    frame = render_shape_frame("circle", (16, 16), 5, (255, 255, 255), 32)
    area = sum(1 for y in range(32) for x in range(32) if (x - 16) ** 2 + (y - 16) ** 2 <= 25)
    assert _mask(frame).sum() == area


def test_shape_leaving_frame_is_rejected():
    with pytest.raises(DatasetError):
        render_shape_frame("circle", (2, 16), 4, (255, 0, 0), 32)
    with pytest.raises(DatasetError):
        render_shape_frame("square", (30, 16), 3, (255, 0, 0), 32)


def test_generated_clips_follow_their_motion_class():
    dataset = generate_shape_motion(SMALL_SPEC)
    assert len(dataset) == 20
    assert dataset.labels.count(0) == dataset.labels.count(1) == 10
    for clip in dataset.clips:
        (x0, y0), (x1, y1) = _centroid(clip.frames[0]), _centroid(clip.frames[-1])
        if clip.label == 0:
            assert x1 > x0
        else:
            assert y1 > y0


def test_generated_shapes_stay_whole_and_bright():
    dataset = generate_shape_motion(SMALL_SPEC)
    lo, hi = SMALL_SPEC.extent_range
    assert (lo, hi) == (4, 8)
    for clip in dataset.clips:
        areas = {int(_mask(frame).sum()) for frame in clip.frames}
        assert len(areas) == 1
        color = clip.frames[0][_mask(clip.frames[0])][0]
        assert int(color.astype(int).sum()) >= 96


def test_generation_is_deterministic_across_workers():
    a = generate_shape_motion(SMALL_SPEC)
    b = generate_shape_motion(SMALL_SPEC, workers=3)
    assert all(np.array_equal(x.frames, y.frames) and x.label == y.label for x, y in zip(a.clips, b.clips))


def test_unsatisfiable_frame_size():
    with pytest.raises(ConfigurationError):
        generate_shape_motion(ShapeMotionSpec(count=2, size=3, length=4))


def test_normalize_round_trip():
    values = np.arange(256, dtype=np.uint8)
    scaled = normalize(values)
    assert scaled[0].item() == -1.0 and scaled[255].item() == 1.0
    assert abs(scaled[127].item() - (127 / 127.5 - 1)) < 1e-6
    assert np.array_equal(denormalize(scaled), values)
    assert denormalize(torch.tensor([-3.0, 3.0])).tolist() == [0, 255]


def test_length_histogram():
    clips = [VideoClip(np.zeros((k, 4, 4, 3), dtype=np.uint8)) for k in (16, 16, 32)]
    assert length_histogram(clips) == {16: 2 / 3, 32: 1 / 3}


def test_packed_round_trip_and_determinism():
    dataset = generate_shape_motion(SMALL_SPEC)
    with tempfile.TemporaryDirectory() as tmp:
        first, second = Path(tmp) / "a.smv", Path(tmp) / "b.smv"
        write_packed(dataset, first)
        write_packed(generate_shape_motion(SMALL_SPEC), second)
        assert first.read_bytes() == second.read_bytes()
        assert first.read_bytes()[:4] == b"SMV1"

        loaded = read_packed(first)
    assert loaded.p_k == {8: 1.0}
    assert loaded.labels == dataset.labels
    assert all(np.array_equal(a.frames, b.frames) for a, b in zip(loaded.clips, dataset.clips))


def test_packed_unlabeled_clips_keep_no_label():
    dataset = PackedDataset(clips=[VideoClip(np.full((3, 4, 4, 3), 9, dtype=np.uint8))], p_k={3: 1.0})
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "one.smv"
        write_packed(dataset, path)
        assert read_packed(path).labels == [None]


def test_packed_corruption_is_detected():
    dataset = generate_shape_motion(ShapeMotionSpec(count=2, size=16, length=4))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.smv"
        write_packed(dataset, path)
        data = path.read_bytes()

        path.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(DatasetError):
            read_packed(path)

        path.write_bytes(data[:-20])
        with pytest.raises(DatasetError):
            read_packed(path)

        path.write_bytes(data[:-8] + np.float64(0.5).tobytes())
        with pytest.raises(DatasetError):
            read_packed(path)


def _write_video(root: Path, name: str, sizes, label=None):
    video = root / name
    video.mkdir(parents=True)
    for i, size in enumerate(sizes):
        Image.fromarray(np.full((size, size, 3), 10 * i, dtype=np.uint8)).save(video / f"{i:03d}.png")
    if label is not None:
        (video / "label").write_text(f"{label}\n")


def test_frame_folder_loading():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        _write_video(root, "b_video", [8, 8, 8], label=1)
        _write_video(root, "a_video", [8, 8])
        dataset = load_frame_folder(root)
    assert [clip.length for clip in dataset.clips] == [2, 3]
    assert dataset.labels == [None, 1]
    assert dataset.clips[1].frames[2, 0, 0].tolist() == [20, 20, 20]
    assert dataset.p_k == {2: 0.5, 3: 0.5}


def test_frame_folder_errors_name_the_video():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        _write_video(root, "mixed", [8, 16])
        with pytest.raises(DatasetError, match="mixed"):
            load_frame_folder(root)

    with tempfile.TemporaryDirectory() as tmp:
        (Path(tmp) / "empty").mkdir()
        with pytest.raises(DatasetError, match="empty"):
            load_frame_folder(tmp)


def test_frame_folder_rejects_unreadable_inputs():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        _write_video(root, "walking", [8, 8], label="walk")
        with pytest.raises(DatasetError, match="walking"):
            load_frame_folder(root)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        _write_video(root, "broken", [8, 8])
        (root / "broken" / "001.png").write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="broken"):
            load_frame_folder(root)

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        _write_video(root, "video_0000", [8, 8])
        (root / "index.json").write_text("{not json")
        with pytest.raises(DatasetError, match="index"):
            load_frame_folder(root)


def test_exported_videos_reload_with_their_actions():
    frames = [np.full((4, 8, 8, 3), v, dtype=np.uint8) for v in (0, 128)]
    with tempfile.TemporaryDirectory() as tmp:
        index_path = export_videos(frames, tmp, [{"action": 1}, {"action": 0}])
        index = json.loads(index_path.read_text())
        assert [v["folder"] for v in index["videos"]] == ["video_0000", "video_0001"]
        dataset = load_clips(tmp)
    assert dataset.labels == [1, 0]
    assert np.array_equal(dataset.clips[1].frames, frames[1])


def test_clip_dataset_yields_channel_first_tensors():
    dataset = generate_shape_motion(ShapeMotionSpec(count=2, size=16, length=4))
    clip, label = ClipDataset(dataset)[1]
    assert clip.shape == (4, 3, 16, 16)
    assert clip.min() >= -1.0 and clip.max() <= 1.0
    assert label == 1


def run_all_tests():
    """Run the dataset tests without pytest"""
    tests = [value for name, value in globals().items() if name.startswith("test_") and callable(value)]
    for test in tests:
        test()
        print(f"ok  {test.__name__}")
    print(f"\nAll {len(tests)} dataset tests passed!")


if __name__ == "__main__":
    run_all_tests()
