import functools
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, List, Optional

import torch
import typer
from pydantic import ValidationError

from checkpoint_store import load_checkpoint
from config import (
    dump_run_config,
    load_run_config,
    parse_overrides,
    setup_logging,
    write_resolved,
)
from database import SessionLocal, create_tables
from dataset_service import (
    clip_to_tensor,
    export_videos,
    generate_shape_motion,
    load_clips,
    tensor_to_frames,
    write_packed,
)
from errors import ConfigurationError, NonFiniteError, VideoGanError
from eval_service import (
    DEFAULT_EVAL_CLIPS,
    DEFAULT_EVAL_LENGTH,
    FrameEmbedder,
    MetricsService,
    acd_set,
    cross_clip_distance,
    frame_shuffled_clips,
    inception_score,
    load_classifier,
    mcs,
    report_key,
    save_classifier,
    train_action_classifier,
)
from latent_service import (
    SeededRng,
    cycle_schedule,
    sample_content,
    sample_motion_noise,
    sample_video_length,
    stream_id,
    sweep_latent_dims,
)
from models_data import ShapeMotionSpec
from models_eval import ClassifierConfig, MetricReport
from networks import build_bundle, content_motion_grid, generate_video
from training_service import train_loop, write_loss_csv

logger = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

app = typer.Typer(help="Motion/content decomposed video GAN: data, training, generation, evaluation.",
                  no_args_is_help=True)
dataset_app = typer.Typer(help="Synthetic datasets.", no_args_is_help=True)
eval_app = typer.Typer(help="Content consistency, motion control and inception scores.", no_args_is_help=True)
app.add_typer(dataset_app, name="dataset")
app.add_typer(eval_app, name="eval")


def handle_errors(command: Callable) -> Callable:
    """Map package errors onto exit codes: 3 for numeric aborts, 2 for everything else"""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except NonFiniteError as e:
            typer.echo(f"error: {e}", err=True)
            raise typer.Exit(EXIT_NUMERIC)
        except (VideoGanError, ValidationError) as e:
            typer.echo(f"error: {e}", err=True)
            raise typer.Exit(EXIT_CONFIG)

    return wrapper


@app.callback()
def main(log_level: Optional[str] = typer.Option(None, "--log-level", help="Overrides LOG_LEVEL")):
    setup_logging(log_level)


@dataset_app.command("gen")
@handle_errors
def dataset_gen(
    count: int = typer.Option(4000, help="Number of clips"),
    size: int = typer.Option(64, help="Frame side in pixels"),
    length: int = typer.Option(16, help="Frames per clip"),
    seed: int = typer.Option(0),
    workers: int = typer.Option(1, help="Render threads"),
    out: Path = typer.Option(..., "--out", "-o", help="Packed .smv file to write"),
):
    """Generate the shape-motion dataset (circles and squares on Bezier paths)."""
    spec = ShapeMotionSpec(count=count, size=size, length=length, seed=seed)
    dataset = generate_shape_motion(spec, workers=workers)
    write_packed(dataset, out)

    balance = Counter(dataset.labels)
    summary = {
        "count": len(dataset),
        "size": size,
        "length": length,
        "seed": seed,
        "class_balance": {spec.motions[k]: balance[k] for k in sorted(balance)},
        "p_k": {str(k): v for k, v in dataset.p_k.items()},
    }
    summary_path = out.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    typer.echo(json.dumps(summary, sort_keys=True))


@app.command()
@handle_errors
def train(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Flat key=value run config"),
    overrides: Optional[List[str]] = typer.Option(None, "--set", help="KEY=VALUE, wins over the file"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to continue from"),
):
    """Train a network bundle; writes config.resolved, loss.csv and ckpt_<iter>.mcgn."""
    cfg = load_run_config(config, parse_overrides(overrides))
    if not cfg.dataset_path:
        raise ConfigurationError("dataset_path is not set")
    dataset = load_clips(cfg.dataset_path)
    out_dir = Path(cfg.out_dir)
    write_resolved(cfg, out_dir)

    if resume is not None:
        bundle = load_checkpoint(resume, latent=cfg.latent_config(), arch=cfg.arch_config())
    else:
        bundle = build_bundle(cfg.arch_config(), cfg.latent_config(), cfg.seed)

    bundle.p_k = dict(dataset.p_k)
    bundle, history = train_loop(bundle, dataset, cfg.train_config(), out_dir)
    loss_path = write_loss_csv(history, out_dir / "loss.csv", append=resume is not None)
    logger.info("Loss history written to %s", loss_path)
    typer.echo(json.dumps({"iteration": bundle.iteration, "out_dir": str(out_dir)}))


def _generation_lengths(p_k: Optional[Dict[int, float]], count: int, seed: int) -> List[int]:
    if not p_k:
        logger.info("Checkpoint has no length histogram, generating %d-frame videos", DEFAULT_EVAL_LENGTH)
        return [DEFAULT_EVAL_LENGTH] * count
    return [sample_video_length(p_k, SeededRng.for_purpose(seed, "length", i)) for i in range(count)]


@app.command()
@handle_errors
def generate(
    checkpoint: Path = typer.Argument(..., help="ckpt_<iter>.mcgn"),
    k: Optional[int] = typer.Option(None, "--k", help="Frames per video, may exceed the training T; "
                                    "drawn per video from the training length histogram when omitted"),
    count: int = typer.Option(DEFAULT_EVAL_CLIPS, help="Number of videos"),
    action: Optional[int] = typer.Option(None, help="Action class for every video"),
    seed: int = typer.Option(0),
    fix_content: bool = typer.Option(False, "--fix-content", help="One z_C for all videos"),
    fix_motion: bool = typer.Option(False, "--fix-motion", help="One epsilon sequence for all videos"),
    action_every: Optional[int] = typer.Option(None, "--action-every", help="Switch action class every N frames"),
    out: Path = typer.Option(Path("generated"), "--out", "-o"),
):
    """Write PNG-frame folders plus index.json for sampled videos."""
    bundle = load_checkpoint(checkpoint)
    latent = bundle.latent
    if (action is not None or action_every is not None) and latent.d_a == 0:
        raise ConfigurationError("this checkpoint has no action categories (d_a=0)")
    if action is not None and not 0 <= action < latent.d_a:
        raise ConfigurationError(f"action must lie in 0..{latent.d_a - 1}")

    if k is None:
        lengths = _generation_lengths(bundle.p_k, count, seed)
    else:
        if k < 1:
            raise ConfigurationError(f"--k must be positive, got {k}")
        lengths = [k] * count

    videos, entries = [], []
    for i, length in enumerate(lengths):
        content_index = 0 if fix_content else i
        motion_index = 0 if fix_motion else i
        z_c = sample_content(latent, SeededRng.for_purpose(seed, "content", content_index))
        noise = sample_motion_noise(latent, length, SeededRng.for_purpose(seed, "motion", motion_index))

        cls = action
        if cls is None and latent.d_a > 0:
            cls = int(torch.randint(latent.d_a, (), generator=SeededRng.for_purpose(seed, "action", i).torch()))
        schedule = cycle_schedule(length, action_every, latent.d_a, cls) if action_every else None

        video = generate_video(bundle, length, SeededRng.for_purpose(seed, "video", i), action=cls,
                               content=z_c, noise=noise, action_schedule=schedule)
        videos.append(tensor_to_frames(video))
        entries.append({
            "seed": seed,
            "length": length,
            "content_stream": stream_id("content", content_index),
            "motion_stream": stream_id("motion", motion_index),
            "action": cls,
            "action_schedule": [list(p) for p in schedule] if schedule else None,
        })

    export_videos(videos, out, entries)
    typer.echo(json.dumps({"videos": count, "frames": k if k is not None else "p_k", "out": str(out)}))


@app.command()
@handle_errors
def grid(
    checkpoint: Path = typer.Argument(...),
    contents: int = typer.Option(3, help="Rows, one z_C each"),
    motions: int = typer.Option(3, help="Columns, one epsilon (and z_A) each"),
    k: int = typer.Option(16, "--k"),
    seed: int = typer.Option(0),
    out: Path = typer.Option(Path("grid"), "--out", "-o"),
):
    """Content x motion grid: rows share content, columns share motion."""
    bundle = load_checkpoint(checkpoint)
    videos = content_motion_grid(bundle, contents, motions, k, seed)
    frames, entries = [], []
    for i in range(contents):
        for j in range(motions):
            frames.append(tensor_to_frames(videos[i, j]))
            entries.append({"row": i, "col": j, "seed": seed})
    export_videos(frames, out, entries)
    typer.echo(json.dumps({"rows": contents, "cols": motions, "out": str(out)}))


@app.command()
@handle_errors
def sweep(
    config: Optional[Path] = typer.Option(None, "--config", "-c"),
    overrides: Optional[List[str]] = typer.Option(None, "--set"),
    total: int = typer.Option(60, help="d_c + d_m"),
    step: int = typer.Option(10),
    out: Path = typer.Option(Path("sweep"), "--out", "-o", help="Directory for the generated configs"),
):
    """Write one run config per (d_c, d_m) split of a fixed latent size."""
    base = parse_overrides(overrides)
    out.mkdir(parents=True, exist_ok=True)
    base_out = load_run_config(config, base).out_dir
    written = []
    for dims in sweep_latent_dims(total, step):
        name = f"dc{dims['d_c']}_dm{dims['d_m']}"
        cfg = load_run_config(config, {**base, **dims, "out_dir": f"{base_out}/{name}"})
        path = out / f"{name}.cfg"
        path.write_text(dump_run_config(cfg))
        written.append(str(path))
    typer.echo(json.dumps({"configs": written}))


def _emit(report_fn: Callable[[], MetricReport], metric: str, key: str, out: Optional[Path], no_cache: bool):
    create_tables()
    db = SessionLocal()
    try:
        service = MetricsService(db)
        report = None if no_cache else service.lookup(metric, key)
        if report is None:
            report, _ = service.record(report_fn(), use_cache=False)
    finally:
        db.close()
    MetricsService.write(report, out or Path(f"{metric}.json"))
    typer.echo(json.dumps(report.model_dump(exclude_none=True), sort_keys=True))


def _embedder(kind: str, classifier_path: Optional[Path]) -> FrameEmbedder:
    classifier = load_classifier(classifier_path) if classifier_path is not None else None
    return FrameEmbedder(kind, classifier)


@eval_app.command("acd")
@handle_errors
def eval_acd(
    inputs: Path = typer.Argument(..., help="Frame folder or packed .smv file"),
    embedder: str = typer.Option("average_color", help="average_color | classifier_feature"),
    classifier: Optional[Path] = typer.Option(None, help="Classifier checkpoint for classifier_feature"),
    shuffled: bool = typer.Option(False, help="Score the frame-shuffled baseline instead"),
    seed: int = typer.Option(0),
    out: Optional[Path] = typer.Option(None, "--out", "-o"),
    no_cache: bool = typer.Option(False, "--no-cache"),
):
    """Average content distance: mean pairwise frame-embedding distance within each clip."""
    dataset = load_clips(inputs)
    frame_embedder = _embedder(embedder, classifier)
    key = report_key("acd", dataset, embedder=frame_embedder.fingerprint(), shuffled=shuffled, seed=seed)

    def compute() -> MetricReport:
        clips = [clip_to_tensor(c) for c in dataset.clips]
        if shuffled:
            clips = frame_shuffled_clips(clips, SeededRng.for_purpose(seed, "shuffled-baseline"))
        return MetricReport(metric="acd", value=acd_set(clips, frame_embedder), n=len(clips),
                            embedder=frame_embedder.describe(), config_hash=key,
                            notes="unordered frame pairs" + (", frame-shuffled baseline" if shuffled else ""))

    _emit(compute, "acd", key, out, no_cache)


@eval_app.command("spread")
@handle_errors
def eval_spread(
    inputs: Path = typer.Argument(...),
    embedder: str = typer.Option("average_color"),
    classifier: Optional[Path] = typer.Option(None),
    out: Optional[Path] = typer.Option(None, "--out", "-o"),
    no_cache: bool = typer.Option(False, "--no-cache"),
):
    """Mean pairwise first-frame distance across clips."""
    dataset = load_clips(inputs)
    frame_embedder = _embedder(embedder, classifier)
    key = report_key("cross_clip_distance", dataset, embedder=frame_embedder.fingerprint())

    def compute() -> MetricReport:
        clips = [clip_to_tensor(c) for c in dataset.clips]
        return MetricReport(metric="cross_clip_distance", value=cross_clip_distance(clips, frame_embedder),
                            n=len(clips), embedder=frame_embedder.describe(), config_hash=key)

    _emit(compute, "cross_clip_distance", key, out, no_cache)


@eval_app.command("mcs")
@handle_errors
def eval_mcs(
    inputs: Path = typer.Argument(..., help="Generated folder whose index.json records the intended actions"),
    classifier: Path = typer.Option(..., help="Classifier checkpoint"),
    out: Optional[Path] = typer.Option(None, "--out", "-o"),
    no_cache: bool = typer.Option(False, "--no-cache"),
):
    """Motion control score: accuracy of the classifier against the intended action classes."""
    dataset = load_clips(inputs)
    model = load_classifier(classifier)
    if any(label is None for label in dataset.labels):
        raise ConfigurationError("every clip needs an intended action label")
    key = report_key("mcs", dataset, classifier=model.describe(), weights=model.weights_digest())

    def compute() -> MetricReport:
        clips = [clip_to_tensor(c) for c in dataset.clips]
        return MetricReport(metric="mcs", value=mcs(clips, dataset.labels, model), n=len(clips),
                            embedder=model.describe(), config_hash=key)

    _emit(compute, "mcs", key, out, no_cache)


@eval_app.command("is")
@handle_errors
def eval_is(
    inputs: Path = typer.Argument(...),
    classifier: Path = typer.Option(..., help="Classifier checkpoint"),
    splits: int = typer.Option(1, help="Average the score over equal splits"),
    out: Optional[Path] = typer.Option(None, "--out", "-o"),
    no_cache: bool = typer.Option(False, "--no-cache"),
):
    """Inception score under the locally trained action classifier."""
    dataset = load_clips(inputs)
    model = load_classifier(classifier)
    key = report_key("is", dataset, classifier=model.describe(), weights=model.weights_digest(), splits=splits)

    def compute() -> MetricReport:
        clips = [clip_to_tensor(c) for c in dataset.clips]
        value, std = inception_score(clips, model, splits)
        return MetricReport(metric="is", value=value, std=std, n=len(clips),
                            embedder=model.describe(), config_hash=key)

    _emit(compute, "is", key, out, no_cache)


@eval_app.command("train-classifier")
@handle_errors
def eval_train_classifier(
    inputs: Path = typer.Argument(..., help="Labeled clips"),
    d_a: Optional[int] = typer.Option(None, "--d-a", help="Number of classes (default: distinct labels)"),
    iterations: int = typer.Option(500),
    t: int = typer.Option(16, "--t", help="Window length"),
    batch_size: int = typer.Option(32),
    base_channels: int = typer.Option(32),
    seed: int = typer.Option(0),
    out: Path = typer.Option(Path("classifier.mcgn"), "--out", "-o"),
):
    """Train the spatio-temporal action classifier used by mcs, is and classifier_feature."""
    dataset = load_clips(inputs)
    labels = {label for label in dataset.labels if label is not None}
    classes = d_a if d_a is not None else len(labels)
    cfg = ClassifierConfig(T=t, iterations=iterations, batch_size=batch_size,
                           base_channels=base_channels, seed=seed)
    model, accuracy = train_action_classifier(dataset, classes, cfg)
    save_classifier(model, out, accuracy)
    report = MetricReport(metric="classifier_accuracy", value=accuracy, n=len(dataset),
                          embedder=model.describe(), config_hash=report_key("classifier", dataset, **cfg.model_dump()))
    typer.echo(json.dumps(report.model_dump(exclude_none=True), sort_keys=True))


if __name__ == "__main__":
    app()
