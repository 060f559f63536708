import hashlib
import json
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from sqlalchemy.orm import Session

import backend
from backend import AdamState, LayerKind, safe_log
from checkpoint_store import read_tensor_file, write_tensor_file
from config import config_hash
from dataset_service import clip_to_tensor
from errors import CheckpointError, ConfigurationError, DatasetError
from latent_service import RngLike, SeededRng, as_generator
from models_data import PackedDataset
from models_eval import ClassifierConfig, MetricRecord, MetricReport
from networks import Block, ConvLayer, init_conv_weights
from training_service import sample_ST

logger = logging.getLogger(__name__)

IS_CLAMP = 1e-12
DEFAULT_EVAL_CLIPS = 256
DEFAULT_EVAL_LENGTH = 16

PathLike = Union[str, Path]


class ActionClassifier(nn.Module):
    """
    3D-conv trunk shaped like the video discriminator (downsample mode),
    global average pooling, then a linear softmax head over d_a classes.
    Inputs are (B, T, 3, S, S) clips in [-1, 1].
    """

    def __init__(self, d_a: int, image_size: int, T: int = 16, base_channels: int = 32):
        super().__init__()
        if d_a < 2:
            raise ConfigurationError(f"an action classifier needs at least 2 classes, got {d_a}")
        self.d_a = d_a
        self.image_size = image_size
        self.T = T
        self.base_channels = base_channels

        b = base_channels
        volume = (T, image_size, image_size)
        blocks = []
        for c_in, c_out, stride in ((3, b, (1, 2, 2)), (b, 2 * b, 2), (2 * b, 4 * b, 2)):
            conv = ConvLayer(LayerKind.CONV3D, c_in, c_out, 4, stride, 1)
            volume = conv.output_shape(volume)
            blocks.append(Block(conv, True, LayerKind.LEAKY_RELU))
        self.blocks = nn.ModuleList(blocks)
        self.feature_dim = 4 * b
        self.weight = nn.Parameter(torch.zeros(d_a, self.feature_dim))
        self.bias = nn.Parameter(torch.zeros(d_a))

    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        init_conv_weights(self, generator)
        backend.normal_(self.weight, 0.0, 0.02, generator)
        with torch.no_grad():
            self.bias.zero_()

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        """Penultimate activations, (B, feature_dim)"""
        x = clips.permute(0, 2, 1, 3, 4)
        for block in self.blocks:
            x = block(x)
        return x.mean(dim=(2, 3, 4))

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        logits = backend.layer_forward(LayerKind.LINEAR, self.features(clips),
                                       {"weight": self.weight, "bias": self.bias})
        return backend.layer_forward(LayerKind.SOFTMAX, logits, hyper={"axis": 1})

    def windows(self, clip: torch.Tensor) -> torch.Tensor:
        """Non-overlapping T-frame windows of a (K, 3, S, S) clip, the last one flush with the end"""
        if clip.shape[-1] != self.image_size or clip.shape[-2] != self.image_size:
            raise ConfigurationError(
                f"clip frames are {clip.shape[-1]}x{clip.shape[-2]}, the classifier expects {self.image_size}"
            )
        K = clip.shape[0]
        if K < self.T:
            raise DatasetError(f"clip has {K} frames, the classifier needs at least T={self.T}")
        starts = sorted(set(list(range(0, K - self.T + 1, self.T)) + [K - self.T]))
        return torch.stack([clip[s:s + self.T] for s in starts])

    def predict_proba(self, clips: Sequence[torch.Tensor]) -> torch.Tensor:
        """Class distribution per clip, averaged over its windows; eval mode, no grad"""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return torch.stack([self(self.windows(clip)).mean(dim=0) for clip in clips])
        finally:
            self.train(was_training)

    def describe(self) -> str:
        return f"action_classifier(d_a={self.d_a}, S={self.image_size}, T={self.T}, b={self.base_channels})"

    def weights_digest(self) -> str:
        """md5 over every named parameter and buffer, in name order"""
        digest = hashlib.md5()
        state = dict(self.named_parameters())
        state.update(dict(self.named_buffers()))
        for name in sorted(state):
            digest.update(name.encode())
            digest.update(state[name].detach().to(torch.float32).contiguous().cpu().numpy().tobytes())
        return digest.hexdigest()


def build_classifier(d_a: int, image_size: int, cfg: ClassifierConfig) -> ActionClassifier:
    classifier = ActionClassifier(d_a, image_size, cfg.T, cfg.base_channels)
    classifier.reset_parameters(SeededRng.for_purpose(cfg.seed, "classifier-init").torch())
    return classifier


def _labeled(dataset: PackedDataset, d_a: int) -> List[int]:
    labels = dataset.labels
    if any(label is None for label in labels):
        raise DatasetError("every clip needs a label to train or score a classifier")
    absent = sorted(set(range(d_a)) - set(labels))
    if absent:
        raise DatasetError(f"classes {absent} are absent from the labeled clips")
    out_of_range = sorted(set(labels) - set(range(d_a)))
    if out_of_range:
        raise ConfigurationError(f"labels {out_of_range} fall outside {d_a} classes")
    return labels


def classifier_accuracy(classifier: ActionClassifier, clips: Sequence[torch.Tensor], labels: Sequence[int]) -> float:
    if not clips:
        raise DatasetError("no clips to score")
    predicted = classifier.predict_proba(clips).argmax(dim=1)
    return float((predicted == torch.as_tensor(labels)).float().mean())


def train_action_classifier(
    dataset: PackedDataset,
    d_a: int,
    cfg: Optional[ClassifierConfig] = None,
) -> Tuple[ActionClassifier, float]:
    """Supervised cross-entropy training with Adam; returns the classifier and its held-out accuracy"""
    cfg = cfg or ClassifierConfig()
    labels = _labeled(dataset, d_a)
    clips = [clip_to_tensor(clip) for clip in dataset.clips]
    if len({c.shape[-1] for c in clips}) != 1:
        raise DatasetError("labeled clips mix frame sizes")

    order = torch.randperm(len(clips), generator=SeededRng.for_purpose(cfg.seed, "classifier-split").torch())
    n_holdout = max(1, int(round(len(clips) * cfg.holdout)))
    holdout, train = order[:n_holdout].tolist(), order[n_holdout:].tolist()
    if set(labels[i] for i in train) != set(range(d_a)):
        raise DatasetError("the training split is missing a class; add clips or lower the holdout fraction")

    classifier = build_classifier(d_a, clips[0].shape[-1], cfg)
    adam = {name: AdamState.for_parameter(p, cfg.lr, cfg.beta1, cfg.beta2) for name, p in classifier.named_parameters()}
    generator = SeededRng.for_purpose(cfg.seed, "classifier-train").torch()

    classifier.train()
    for step in range(cfg.iterations):
        picks = torch.randint(len(train), (min(cfg.batch_size, len(train)),), generator=generator).tolist()
        batch = torch.stack([sample_ST(clips[train[i]], cfg.T, generator) for i in picks])
        targets = torch.tensor([labels[train[i]] for i in picks])

        for p in classifier.parameters():
            p.grad = None
        probs = classifier(batch)
        loss = backend.check_finite("classifier_loss", (-safe_log(probs.gather(1, targets.view(-1, 1)))).mean())
        loss.backward()
        for name, p in classifier.named_parameters():
            backend.adam_step(p, adam[name], name)
        if (step + 1) % 100 == 0:
            logger.info("classifier step %d  loss %.4f", step + 1, float(loss))

    accuracy = classifier_accuracy(classifier, [clips[i] for i in holdout], [labels[i] for i in holdout])
    logger.info("Action classifier held-out accuracy %.4f on %d clips", accuracy, len(holdout))
    return classifier, accuracy


def save_classifier(classifier: ActionClassifier, path: PathLike, accuracy: Optional[float] = None):
    metadata = {
        "kind": "classifier",
        "d_a": classifier.d_a,
        "image_size": classifier.image_size,
        "T": classifier.T,
        "base_channels": classifier.base_channels,
        "accuracy": accuracy,
    }
    tensors = dict(classifier.named_parameters())
    tensors.update(dict(classifier.named_buffers()))
    write_tensor_file(path, metadata, tensors)
    logger.info("Saved classifier to %s", path)


def load_classifier(path: PathLike) -> ActionClassifier:
    metadata, tensors = read_tensor_file(path)
    if metadata.get("kind") != "classifier":
        raise CheckpointError(f"{path} holds a '{metadata.get('kind')}', not an action classifier")
    classifier = ActionClassifier(metadata["d_a"], metadata["image_size"], metadata["T"], metadata["base_channels"])
    own = dict(classifier.named_parameters())
    own.update(dict(classifier.named_buffers()))
    with torch.no_grad():
        for name, target in own.items():
            if name not in tensors or tuple(tensors[name].shape) != tuple(target.shape):
                raise CheckpointError(f"{path}: tensor '{name}' is missing or misshapen")
            target.copy_(tensors[name])
    return classifier


class FrameEmbedder:
    """Per-frame embedding; average RGB (dimension 3) or classifier features"""

    def __init__(self, kind: str = "average_color", classifier: Optional[ActionClassifier] = None):
        if kind not in ("average_color", "classifier_feature"):
            raise ConfigurationError(f"unknown embedder '{kind}'")
        if kind == "classifier_feature" and classifier is None:
            raise ConfigurationError("the classifier_feature embedder needs a trained classifier")
        self.kind = kind
        self.classifier = classifier

    @property
    def dim(self) -> int:
        return 3 if self.kind == "average_color" else self.classifier.feature_dim

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        """(K, 3, H, W) frames in [-1, 1] -> (K, dim) float64"""
        if self.kind == "average_color":
            return frames.to(torch.float64).mean(dim=(2, 3))
        if frames.shape[-1] != self.classifier.image_size:
            raise ConfigurationError(
                f"frames are {frames.shape[-1]} px, the classifier expects {self.classifier.image_size}"
            )
        # a still frame is fed as a static T-frame clip
        static = frames.unsqueeze(1).expand(-1, self.classifier.T, -1, -1, -1)
        was_training = self.classifier.training
        self.classifier.eval()
        try:
            with torch.no_grad():
                return self.classifier.features(static).to(torch.float64)
        finally:
            self.classifier.train(was_training)

    def describe(self) -> str:
        if self.kind == "average_color":
            return "average_color"
        return f"classifier_feature:{self.classifier.describe()}"

    def fingerprint(self) -> str:
        """describe() plus the classifier weights digest; used in ledger keys"""
        if self.kind == "average_color":
            return self.describe()
        return f"{self.describe()}@{self.classifier.weights_digest()}"


def mean_pairwise_distance(embeddings: torch.Tensor) -> float:
    """Mean L2 distance over unordered pairs i < j of the rows"""
    if embeddings.shape[0] < 2:
        raise DatasetError("pairwise distance needs at least 2 rows")
    return float(torch.pdist(embeddings.to(torch.float64)).mean())


def acd_single(clip: torch.Tensor, embedder: FrameEmbedder) -> float:
    if clip.shape[0] < 2:
        raise DatasetError(f"content distance needs at least 2 frames, got {clip.shape[0]}")
    return mean_pairwise_distance(embedder.embed(clip))


def acd_set(clips: Sequence[torch.Tensor], embedder: FrameEmbedder) -> float:
    if not clips:
        raise DatasetError("no clips to score")
    return float(np.mean([acd_single(clip, embedder) for clip in clips]))


def cross_clip_distance(clips: Sequence[torch.Tensor], embedder: FrameEmbedder) -> float:
    """Mean pairwise distance between the first-frame embeddings of different clips"""
    if len(clips) < 2:
        raise DatasetError("cross-clip distance needs at least 2 clips")
    firsts = torch.stack([clip[0] for clip in clips])
    return mean_pairwise_distance(embedder.embed(firsts))


def frame_shuffled_clips(clips: Sequence[torch.Tensor], rng: RngLike) -> List[torch.Tensor]:
    """Clips whose k-th frame is taken from an independently chosen source clip"""
    if not clips:
        raise DatasetError("no clips to shuffle")
    K = min(clip.shape[0] for clip in clips)
    generator = as_generator(rng)
    sources = torch.stack([torch.randperm(len(clips), generator=generator) for _ in range(K)], dim=1)
    return [torch.stack([clips[int(sources[i, k])][k] for k in range(K)]) for i in range(len(clips))]


def mcs(clips: Sequence[torch.Tensor], intended: Sequence[int], classifier: ActionClassifier) -> float:
    """Fraction of clips the classifier assigns to their intended action class"""
    if len(clips) != len(intended):
        raise ConfigurationError("need one intended label per clip")
    if any(not 0 <= label < classifier.d_a for label in intended):
        raise ConfigurationError(f"intended labels fall outside the classifier's {classifier.d_a} classes")
    return classifier_accuracy(classifier, clips, intended)


def inception_score_from_probs(probs: torch.Tensor, splits: int = 1) -> Tuple[float, float]:
    """
    exp(mean_i KL(p(y|x_i) || p(y))) per split; returns the mean and the
    population std over the splits.
    """
    probs = probs.to(torch.float64).clamp_min(IS_CLAMP)
    n = probs.shape[0]
    if n < 2:
        raise DatasetError("inception score needs at least 2 clips")
    if not 1 <= splits <= n:
        raise ConfigurationError(f"splits must lie in 1..{n}")
    scores = []
    for part in torch.tensor_split(probs, splits):
        marginal = part.mean(dim=0, keepdim=True)
        kl = (part * (part.log() - marginal.log())).sum(dim=1)
        scores.append(math.exp(float(kl.mean())))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(clips: Sequence[torch.Tensor], classifier: ActionClassifier, splits: int = 1) -> Tuple[float, float]:
    return inception_score_from_probs(classifier.predict_proba(clips), splits)


def dataset_digest(dataset: PackedDataset) -> str:
    digest = hashlib.md5()
    for clip in dataset.clips:
        digest.update(np.ascontiguousarray(clip.frames).tobytes())
        digest.update(str(clip.label).encode())
    return digest.hexdigest()


class MetricsService:
    """Writes MetricReports and keeps them in the SQLite ledger, keyed by config hash"""

    def __init__(self, db: Session):
        self.db = db

    def lookup(self, metric: str, key: str) -> Optional[MetricReport]:
        record = (
            self.db.query(MetricRecord)
            .filter(MetricRecord.metric == metric, MetricRecord.config_hash == key)
            .order_by(MetricRecord.id.desc())
            .first()
        )
        if record is None:
            return None
        return MetricReport.model_validate_json(record.report_json)

    def record(self, report: MetricReport, use_cache: bool = True) -> Tuple[MetricReport, bool]:
        """Returns (report, cached); a cached hit is returned instead of inserting a duplicate"""
        if use_cache:
            cached = self.lookup(report.metric, report.config_hash)
            if cached is not None:
                logger.info("Metric %s for %s served from the ledger", report.metric, report.config_hash)
                return cached, True
        self.db.add(MetricRecord(
            metric=report.metric,
            value=report.value,
            n=report.n,
            embedder=report.embedder,
            config_hash=report.config_hash,
            report_json=report.model_dump_json(exclude_none=True),
        ))
        self.db.commit()
        return report, False

    @staticmethod
    def write(report: MetricReport, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report.model_dump(exclude_none=True), indent=2, sort_keys=True) + "\n")
        return path


def report_key(metric: str, dataset: PackedDataset, **settings) -> str:
    return config_hash({"metric": metric, "data": dataset_digest(dataset), **settings})
