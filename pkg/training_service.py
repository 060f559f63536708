import csv
import logging
import math
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from torch.utils.data import DataLoader
from tqdm import tqdm

import backend
from backend import check_finite, safe_log
from checkpoint_store import save_checkpoint
from dataset_service import ClipDataset, collate_clips
from errors import ConfigurationError, ContractViolationError, DatasetError
from latent_service import RngLike, SeededRng, as_generator
from models_data import PackedDataset
from models_training import LossReport, TrainConfig
from networks import NetworkBundle, image_disc_forward, sample_fake_videos, video_disc_forward

logger = logging.getLogger(__name__)

LOSS_CSV_HEADER = ("iteration", "d_image", "d_video", "g", "info")
CHECKPOINT_PATTERN = "ckpt_{iteration}.mcgn"


def sample_S1(clip: torch.Tensor, rng: RngLike) -> torch.Tensor:
    """Uniformly random frame of a (K, 3, H, W) clip"""
    if clip.dim() != 4:
        raise ContractViolationError(f"clip must be (K, 3, H, W), got {tuple(clip.shape)}")
    if clip.shape[0] < 1:
        raise DatasetError("cannot sample a frame from an empty clip")
    index = int(torch.randint(clip.shape[0], (), generator=as_generator(rng)))
    return clip[index]


def sample_ST(clip: torch.Tensor, T: int, rng: RngLike) -> torch.Tensor:
    """T consecutive frames; the start index is uniform over 0..K-T"""
    if clip.dim() != 4:
        raise ContractViolationError(f"clip must be (K, 3, H, W), got {tuple(clip.shape)}")
    K = clip.shape[0]
    if K < T:
        raise DatasetError(f"clip has {K} frames, fewer than T={T}")
    start = int(torch.randint(K - T + 1, (), generator=as_generator(rng)))
    return clip[start:start + T]


def _bce_terms(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return (-safe_log(real)).mean() + (-safe_log(1.0 - fake)).mean()


def discriminator_losses(
    d_image_real: Optional[torch.Tensor],
    d_image_fake: Optional[torch.Tensor],
    d_video_real: torch.Tensor,
    d_video_fake: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    mean(-log D(real)) + mean(-log(1 - D(fake))) for the image and video
    discriminators. Patch outputs are averaged. Without an image
    discriminator the image term is 0.
    """
    if d_image_real is None or d_image_fake is None:
        d_image_loss = d_video_real.new_zeros(())
    else:
        d_image_loss = check_finite("d_image_loss", _bce_terms(d_image_real, d_image_fake))
    d_video_loss = check_finite("d_video_loss", _bce_terms(d_video_real, d_video_fake))
    return d_image_loss, d_video_loss


def generator_loss(d_image_fake: Optional[torch.Tensor], d_video_fake: torch.Tensor,
                   mode: str = "non_saturating") -> torch.Tensor:
    def term(p: torch.Tensor) -> torch.Tensor:
        if mode == "non_saturating":
            return (-safe_log(p)).mean()
        if mode == "saturating":
            return safe_log(1.0 - p).mean()
        raise ConfigurationError(f"unknown generator loss mode '{mode}'")

    loss = term(d_video_fake)
    if d_image_fake is not None:
        loss = term(d_image_fake) + loss
    return check_finite("g_loss", loss)


def info_lower_bound(q: torch.Tensor, z_a: torch.Tensor, d_a: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Returns (CE, L_I) where CE = -mean(log Q[true class]) is the term that
    gets minimized and L_I = ln d_A - CE is the mutual information bound.
    `z_a` is one-hot (B, d_a) or class indices (B,).
    """
    if q.dim() != 2 or q.shape[1] != d_a:
        raise ContractViolationError(f"Q output must be (B, {d_a}), got {tuple(q.shape)}")
    classes = z_a.argmax(dim=-1) if z_a.dim() == 2 else z_a.long()
    picked = q.gather(1, classes.view(-1, 1)).squeeze(1)
    ce = check_finite("info_loss", (-safe_log(picked)).mean())
    return ce, math.log(d_a) - ce


@contextmanager
def _frozen(params: Iterable[nn.Parameter]):
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


def _apply_adam(bundle: NetworkBundle, named_params: Iterable[Tuple[str, nn.Parameter]]):
    for name, param in named_params:
        # parameters outside the graph (e.g. an ablated D_I) keep their values
        if param.grad is None:
            continue
        backend.adam_step(param, bundle.adam[name], name)


def _pick_frames(videos: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """S_1 applied to every video of a (B, K, 3, S, S) batch"""
    B, K = videos.shape[:2]
    index = torch.randint(K, (B,), generator=generator)
    return videos[torch.arange(B), index]


def discriminator_update(
    bundle: NetworkBundle,
    real_frames: torch.Tensor,
    real_clips: torch.Tensor,
    cfg: TrainConfig,
    generator: torch.Generator,
    labels: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """D_I, D_V and Q step on real samples and detached fakes; G_I and R_M are left untouched"""
    d_a = bundle.latent.d_a
    use_image = cfg.use_image_discriminator
    bundle.zero_grad_all()
    with torch.no_grad():
        fake_videos, fake_actions = sample_fake_videos(bundle, real_clips.shape[0], cfg.T, generator)
    fake_frames = _pick_frames(fake_videos, generator)

    d_image_real = image_disc_forward(bundle.d_image, real_frames) if use_image else None
    d_image_fake = image_disc_forward(bundle.d_image, fake_frames) if use_image else None
    d_video_real, q_real = video_disc_forward(bundle.d_video, real_clips)
    d_video_fake, q_fake = video_disc_forward(bundle.d_video, fake_videos)
    d_image_loss, d_video_loss = discriminator_losses(d_image_real, d_image_fake, d_video_real, d_video_fake)

    total = d_image_loss + d_video_loss
    if d_a > 0:
        ce_fake, _ = info_lower_bound(q_fake, fake_actions, d_a)
        total = total + cfg.lambda_info * ce_fake
        if cfg.supervised_q and labels is not None:
            ce_real, _ = info_lower_bound(q_real, labels, d_a)
            total = total + cfg.lambda_info * ce_real
    total.backward()
    _apply_adam(bundle, bundle.discriminator_parameters())
    bundle.zero_grad_all()
    return d_image_loss.detach(), d_video_loss.detach()


def generator_update(
    bundle: NetworkBundle,
    batch: int,
    cfg: TrainConfig,
    generator: torch.Generator,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """G_I and R_M step on fresh fakes through frozen discriminators; returns (g_loss, info CE)"""
    d_a = bundle.latent.d_a
    bundle.zero_grad_all()
    with _frozen(p for _, p in bundle.discriminator_parameters()):
        fake_videos, fake_actions = sample_fake_videos(bundle, batch, cfg.T, generator)
        fake_frames = _pick_frames(fake_videos, generator)
        d_image_fake = image_disc_forward(bundle.d_image, fake_frames) if cfg.use_image_discriminator else None
        d_video_fake, q_fake = video_disc_forward(bundle.d_video, fake_videos)
        g_loss = generator_loss(d_image_fake, d_video_fake, cfg.gen_loss_mode)

        total = g_loss
        info_loss = g_loss.new_zeros(())
        if d_a > 0:
            info_loss, _ = info_lower_bound(q_fake, fake_actions, d_a)
            total = total + cfg.lambda_info * info_loss
        total.backward()
    _apply_adam(bundle, bundle.generator_parameters())
    bundle.zero_grad_all()
    return g_loss.detach(), info_loss.detach()


def train_step(
    bundle: NetworkBundle,
    clips: Sequence[torch.Tensor],
    cfg: TrainConfig,
    rng: RngLike,
    labels: Optional[torch.Tensor] = None,
) -> LossReport:
    """
    One discriminator update followed by one generator update. `clips` are
    (K, 3, S, S) tensors with K >= T; `labels` (class per clip) feed the
    supervised Q term when cfg.supervised_q is set.
    """
    if not clips:
        raise DatasetError("empty minibatch")
    if cfg.T != bundle.arch.T:
        raise ConfigurationError(f"train T={cfg.T} does not match the bundle's T={bundle.arch.T}")
    generator = as_generator(rng)

    # real frame and real window come from the same video
    real_frames = torch.stack([sample_S1(clip, generator) for clip in clips])
    real_clips = torch.stack([sample_ST(clip, cfg.T, generator) for clip in clips])

    bundle.train()
    bundle.ensure_adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    d_image_loss, d_video_loss = discriminator_update(bundle, real_frames, real_clips, cfg, generator, labels)
    g_loss, info_loss = generator_update(bundle, len(clips), cfg, generator)

    bundle.iteration += 1
    return LossReport(
        iteration=bundle.iteration,
        d_image_loss=float(d_image_loss),
        d_video_loss=float(d_video_loss),
        g_loss=float(g_loss),
        info_loss=float(info_loss),
    )


def validate_training_data(dataset: PackedDataset, bundle: NetworkBundle, cfg: TrainConfig):
    if len(dataset) == 0:
        raise DatasetError("training dataset is empty")
    size = bundle.arch.image_size
    for i, clip in enumerate(dataset.clips):
        if clip.length < cfg.T:
            raise DatasetError(f"clip {i} has {clip.length} frames, fewer than T={cfg.T}")
        if (clip.height, clip.width) != (size, size):
            raise DatasetError(f"clip {i} is {clip.width}x{clip.height}, the networks expect {size}x{size}")
    if cfg.supervised_q:
        if bundle.latent.d_a == 0:
            raise ConfigurationError("supervised_q needs d_a > 0")
        if any(label is None for label in dataset.labels):
            raise DatasetError("supervised_q needs every training clip to carry a label")


def checkpoint_path(out_dir: Union[str, Path], iteration: int) -> Path:
    return Path(out_dir) / CHECKPOINT_PATTERN.format(iteration=iteration)


def train_loop(
    bundle: NetworkBundle,
    dataset: PackedDataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[NetworkBundle, List[LossReport]]:
    """
    Runs cfg.iterations steps over shuffled minibatches. Step n draws from the
    stream ("train", n) of cfg.seed, so a resumed run continues the same
    sequence. With `out_dir`, writes ckpt_<iter>.mcgn at the cadence and once
    at the end.
    """
    validate_training_data(dataset, bundle, cfg)
    loader = DataLoader(
        ClipDataset(dataset),
        batch_size=min(cfg.batch_size, len(dataset)),
        shuffle=True,
        generator=SeededRng.for_purpose(cfg.seed, "shuffle").torch(),
        collate_fn=collate_clips,
        num_workers=cfg.num_workers,
        drop_last=False,
    )

    history: List[LossReport] = []
    batches = iter(loader)
    last_saved = None
    show_progress = logger.isEnabledFor(logging.INFO)
    for _ in tqdm(range(cfg.iterations), desc="train", disable=not show_progress):
        try:
            clips, labels = next(batches)
        except StopIteration:
            batches = iter(loader)
            clips, labels = next(batches)

        rng = SeededRng.for_purpose(cfg.seed, "train", bundle.iteration)
        report = train_step(bundle, clips, cfg, rng, labels if cfg.supervised_q else None)
        history.append(report)

        if report.iteration % cfg.log_every == 0:
            logger.info(
                "iter %d  d_image %.4f  d_video %.4f  g %.4f  info %.4f",
                report.iteration, report.d_image_loss, report.d_video_loss, report.g_loss, report.info_loss,
            )
        if out_dir is not None and cfg.checkpoint_every and report.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(bundle, checkpoint_path(out_dir, report.iteration))
            last_saved = report.iteration

    if out_dir is not None and last_saved != bundle.iteration:
        save_checkpoint(bundle, checkpoint_path(out_dir, bundle.iteration))
    logger.info("Finished %d iterations (bundle at iteration %d)", len(history), bundle.iteration)
    return bundle, history


def write_loss_csv(history: Sequence[LossReport], path: Union[str, Path], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_header = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if write_header:
            writer.writerow(LOSS_CSV_HEADER)
        for r in history:
            writer.writerow([r.iteration, repr(r.d_image_loss), repr(r.d_video_loss), repr(r.g_loss), repr(r.info_loss)])
    return path
