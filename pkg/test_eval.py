import itertools
import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
from pydantic import ValidationError
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from checkpoint_store import save_checkpoint
from database import Base
from dataset_service import generate_shape_motion
from errors import CheckpointError, ConfigurationError, DatasetError
from latent_service import SeededRng
from models_data import PackedDataset, ShapeMotionSpec, VideoClip
from models_eval import ClassifierConfig, MetricRecord, MetricReport
from models_latent import LatentConfig
from models_networks import ArchConfig
from networks import build_bundle
from eval_service import (
    ActionClassifier,
    FrameEmbedder,
    MetricsService,
    acd_set,
    acd_single,
    build_classifier,
    cross_clip_distance,
    frame_shuffled_clips,
    inception_score_from_probs,
    load_classifier,
    mcs,
    mean_pairwise_distance,
    report_key,
    save_classifier,
    train_action_classifier,
)

COLOR = FrameEmbedder("average_color")


def _flat_clip(values, size: int = 8) -> torch.Tensor:
    """One constant-color frame per value"""
    return torch.stack([torch.full((3, size, size), float(v)) for v in values])


class _BrightnessOracle(ActionClassifier):
    """Class 1 for clips brighter than mid-grey, else class 0"""

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        bright = (clips.mean(dim=(1, 2, 3, 4)) > 0).long()
        return torch.nn.functional.one_hot(bright, 2).to(clips.dtype)


def _small_classifier(seed: int = 0) -> ActionClassifier:
    return build_classifier(2, 32, ClassifierConfig(T=8, base_channels=4, seed=seed))


def _session():
    engine = create_engine("sqlite:///:memory:")
    Base.metadata.create_all(bind=engine)
    return sessionmaker(bind=engine)()


def test_constant_clip_has_zero_content_distance():
    assert acd_single(_flat_clip([0.3] * 6), COLOR) == 0.0


def test_two_frame_content_distance():
    assert abs(acd_single(_flat_clip([0.0, 1.0]), COLOR) - math.sqrt(3)) < 1e-9


def test_mean_pairwise_distance_uses_unordered_pairs():
    assert abs(mean_pairwise_distance(torch.tensor([[0.0], [1.0], [2.0]])) - 4 / 3) < 1e-9
    with pytest.raises(DatasetError):
        mean_pairwise_distance(torch.zeros(1, 3))


def test_set_distance_is_mean_over_clips():
    a = 1 / math.sqrt(3)
    clips = [_flat_clip([0.5] * 4), _flat_clip([0.0, a, 2 * a])]
    assert abs(acd_set(clips, COLOR) - 2 / 3) < 1e-6


def test_content_distance_matches_brute_force():
    clip = torch.rand(6, 3, 8, 8, generator=torch.Generator().manual_seed(2)) * 2 - 1
    colors = clip.to(torch.float64).mean(dim=(2, 3)).tolist()
    pairs = list(itertools.combinations(range(6), 2))
    expected = sum(math.dist(colors[i], colors[j]) for i, j in pairs) / len(pairs)
    assert abs(acd_single(clip, COLOR) - expected) < 1e-9


def test_content_distance_ignores_frame_order_and_scales_linearly():
    clip = torch.rand(5, 3, 8, 8, generator=torch.Generator().manual_seed(3)) * 2 - 1
    base = acd_single(clip, COLOR)
    assert abs(acd_single(clip[torch.tensor([4, 2, 0, 1, 3])], COLOR) - base) < 1e-9
    assert abs(acd_single(clip * 0.5, COLOR) - 0.5 * base) < 1e-9


def test_single_frame_clip_is_rejected():
    with pytest.raises(DatasetError):
        acd_single(_flat_clip([0.0]), COLOR)
    with pytest.raises(DatasetError):
        acd_set([], COLOR)


def test_cross_clip_distance_uses_first_frames():
    clips = [_flat_clip([0.0, 0.9]), _flat_clip([0.5, -0.9])]
    assert abs(cross_clip_distance(clips, COLOR) - 0.5 * math.sqrt(3)) < 1e-9


def test_frame_shuffled_clips_mix_sources():
    clips = [_flat_clip([i] * 4) for i in range(3)] + [_flat_clip([3] * 6)]
    shuffled = frame_shuffled_clips(clips, SeededRng(0))
    assert len(shuffled) == 4
    assert all(clip.shape[0] == 4 for clip in shuffled)
    for k in range(4):
        assert sorted(int(clip[k, 0, 0, 0]) for clip in shuffled) == [0, 1, 2, 3]


def test_inception_score_bounds():
    uniform = torch.full((10, 4), 0.25)
    assert abs(inception_score_from_probs(uniform)[0] - 1.0) < 1e-9
    confident = torch.eye(4)
    assert abs(inception_score_from_probs(confident)[0] - 4.0) < 1e-6


def test_inception_score_matches_scalar_reference():
    probs = torch.softmax(torch.randn(7, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64), dim=1)
    rows = probs.tolist()
    marginal = [sum(row[c] for row in rows) / len(rows) for c in range(3)]
    kl = [sum(p * (math.log(p) - math.log(m)) for p, m in zip(row, marginal)) for row in rows]
    expected = math.exp(sum(kl) / len(kl))
    assert abs(inception_score_from_probs(probs)[0] - expected) < 1e-9


def test_inception_score_splits():
    probs = torch.eye(4)[torch.tensor([0, 1, 0, 1, 2, 3, 2, 3])]
    mean, std = inception_score_from_probs(probs, splits=2)
    assert abs(mean - 2.0) < 1e-6 and std < 1e-9
    with pytest.raises(ConfigurationError):
        inception_score_from_probs(probs, splits=9)
    with pytest.raises(DatasetError):
        inception_score_from_probs(probs[:1])


def test_motion_control_score_with_oracle():
    oracle = _BrightnessOracle(2, 8, T=5, base_channels=1)
    clips = [_flat_clip([v] * 6) for v in (0.8, -0.8, 0.5, -0.2)]
    assert mcs(clips, [1, 0, 1, 0], oracle) == 1.0
    assert mcs(clips, [0, 1, 1, 0], oracle) == 0.5
    with pytest.raises(ConfigurationError):
        mcs(clips, [0, 1, 2, 0], oracle)


def test_untrained_classifier_scores_chance_on_balanced_set():
    # zero head weights give a uniform prediction and argmax picks class 0
    classifier = ActionClassifier(2, 32, T=8, base_channels=4)
    clips = [torch.rand(8, 3, 32, 32, generator=torch.Generator().manual_seed(i)) for i in range(4)]
    assert mcs(clips, [0, 1, 0, 1], classifier) == 0.5


def test_classifier_windows():
    classifier = ActionClassifier(2, 8, T=5, base_channels=1)
    windows = classifier.windows(_flat_clip(range(12)))
    assert windows.shape == (3, 5, 3, 8, 8)
    assert [int(w[0, 0, 0, 0]) for w in windows] == [0, 5, 7]
    with pytest.raises(DatasetError):
        classifier.windows(_flat_clip(range(4)))
    with pytest.raises(ConfigurationError):
        classifier.windows(_flat_clip(range(6), size=16))


def test_classifier_save_and_load():
    classifier = _small_classifier(seed=3)
    clips = [torch.rand(10, 3, 32, 32, generator=torch.Generator().manual_seed(i)) * 2 - 1 for i in range(3)]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "classifier.mcgn"
        save_classifier(classifier, path, accuracy=0.75)
        loaded = load_classifier(path)
    assert loaded.describe() == classifier.describe()
    assert torch.equal(loaded.predict_proba(clips), classifier.predict_proba(clips))
    assert loaded.weights_digest() == classifier.weights_digest()


def test_classifier_digest_tells_trained_weights_apart():
    first, second = _small_classifier(seed=3), _small_classifier(seed=4)
    assert first.describe() == second.describe()
    assert first.weights_digest() != second.weights_digest()
    assert FrameEmbedder("classifier_feature", first).fingerprint() != \
        FrameEmbedder("classifier_feature", second).fingerprint()
    assert COLOR.fingerprint() == "average_color"


def test_loading_a_bundle_as_classifier_fails():
    latent = LatentConfig(d_c=8, d_m=4, d_e=4)
    bundle = build_bundle(ArchConfig(image_size=32, base_channels=2, latent_dim=12, T=8), latent)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt_0.mcgn"
        save_checkpoint(bundle, path)
        with pytest.raises(CheckpointError):
            load_classifier(path)


def test_classifier_training_needs_every_class():
    clips = [VideoClip(np.zeros((8, 32, 32, 3), dtype=np.uint8), label=0) for _ in range(4)]
    with pytest.raises(DatasetError):
        train_action_classifier(PackedDataset(clips=clips, p_k={8: 1.0}), 2, ClassifierConfig(T=8))
    unlabeled = PackedDataset(clips=[VideoClip(np.zeros((8, 32, 32, 3), dtype=np.uint8))], p_k={8: 1.0})
    with pytest.raises(DatasetError):
        train_action_classifier(unlabeled, 2, ClassifierConfig(T=8))


def test_short_classifier_training_run():
    dataset = generate_shape_motion(ShapeMotionSpec(count=10, size=32, length=8, seed=1))
    cfg = ClassifierConfig(T=8, base_channels=4, iterations=3, batch_size=4)
    classifier, accuracy = train_action_classifier(dataset, 2, cfg)
    assert 0.0 <= accuracy <= 1.0
    assert classifier.feature_dim == 16


def test_classifier_feature_embedder():
    classifier = _small_classifier()
    embedder = FrameEmbedder("classifier_feature", classifier)
    frames = torch.rand(5, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    embeddings = embedder.embed(frames)
    assert embeddings.shape == (5, embedder.dim)
    assert embeddings.dtype == torch.float64
    assert embedder.describe().startswith("classifier_feature:")
    with pytest.raises(ConfigurationError):
        FrameEmbedder("classifier_feature")
    with pytest.raises(ConfigurationError):
        FrameEmbedder("pixels")


def test_metric_report_validation():
    MetricReport(metric="acd", value=0.4, n=3, embedder="average_color", config_hash="x")
    with pytest.raises(ValidationError):
        MetricReport(metric="acd", value=-0.1, n=3, embedder="average_color", config_hash="x")
    with pytest.raises(ValidationError):
        MetricReport(metric="mcs", value=1.5, n=3, embedder="classifier", config_hash="x")
    with pytest.raises(ValidationError):
        MetricReport(metric="is", value=0.5, n=3, embedder="classifier", config_hash="x")


def test_report_key_tracks_data_and_settings():
    a = PackedDataset(clips=[VideoClip(np.zeros((2, 4, 4, 3), dtype=np.uint8))], p_k={2: 1.0})
    b = PackedDataset(clips=[VideoClip(np.ones((2, 4, 4, 3), dtype=np.uint8))], p_k={2: 1.0})
    assert report_key("acd", a, embedder="average_color") == report_key("acd", a, embedder="average_color")
    assert report_key("acd", a, embedder="average_color") != report_key("acd", b, embedder="average_color")
    assert report_key("acd", a, embedder="average_color") != report_key("acd", a, shuffled=True)


def test_metrics_ledger_caches_reports():
    db = _session()
    service = MetricsService(db)
    report = MetricReport(metric="acd", value=0.25, n=4, embedder="average_color", config_hash="abc")

    stored, cached = service.record(report)
    assert not cached and stored == report
    again, cached = service.record(report.model_copy(update={"value": 9.0}))
    assert cached and again.value == 0.25

    service.record(report.model_copy(update={"value": 0.5}), use_cache=False)
    assert db.query(MetricRecord).count() == 2
    assert service.lookup("acd", "abc").value == 0.5
    assert service.lookup("mcs", "abc") is None
    db.close()


def test_metric_report_json_file():
    report = MetricReport(metric="is", value=1.5, n=8, embedder="classifier", config_hash="k", std=0.1)
    with tempfile.TemporaryDirectory() as tmp:
        path = MetricsService.write(report, Path(tmp) / "out" / "is.json")
        assert MetricReport.model_validate_json(path.read_text()) == report


def run_all_tests():
    """Run the evaluation tests without pytest"""
    tests = [value for name, value in globals().items() if name.startswith("test_") and callable(value)]
    for test in tests:
        test()
        print(f"ok  {test.__name__}")
    print(f"\nAll {len(tests)} evaluation tests passed!")


if __name__ == "__main__":
    run_all_tests()
