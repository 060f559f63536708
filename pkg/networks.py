import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

import backend
from backend import AdamState, LayerKind
from errors import ConfigurationError, ContractViolationError
from latent_service import (
    MotionRnn,
    RngLike,
    SeededRng,
    as_generator,
    build_latent_path,
    one_hot,
    sample_action,
    sample_content,
    sample_motion_noise,
    scheduled_actions,
    stream_id,
)
from models_latent import LatentConfig
from models_networks import ArchConfig

logger = logging.getLogger(__name__)

Kernel = Union[int, Tuple[int, ...]]


class ConvLayer(nn.Module):
    """Parameter holder for one conv / transposed conv / conv3d layer"""

    def __init__(self, kind: LayerKind, in_channels: int, out_channels: int, kernel: Kernel,
                 stride: Kernel = 1, padding: Kernel = 0, bias: bool = False):
        super().__init__()
        self.kind = LayerKind(kind)
        rank = 3 if self.kind is LayerKind.CONV3D else 2
        kernel = (kernel,) * rank if isinstance(kernel, int) else tuple(kernel)
        if self.kind is LayerKind.CONV_TRANSPOSE2D:
            shape = (in_channels, out_channels, *kernel)
        else:
            shape = (out_channels, in_channels, *kernel)
        self.weight = nn.Parameter(torch.zeros(shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return backend.layer_forward(self.kind, x, params, {"stride": self.stride, "padding": self.padding})

    def output_shape(self, spatial: Sequence[int]) -> Tuple[int, ...]:
        return backend.conv_output_shape(
            spatial, self.kernel, self.stride, self.padding,
            transposed=self.kind is LayerKind.CONV_TRANSPOSE2D,
        )

    def describe(self) -> str:
        tag = {LayerKind.CONV2D: "CONV", LayerKind.CONV_TRANSPOSE2D: "DCONV", LayerKind.CONV3D: "CONV3D"}[self.kind]

        def fmt(v):
            if isinstance(v, int):
                return str(v)
            return str(v[0]) if len(set(v)) == 1 else "x".join(str(i) for i in v)

        return f"{tag}-(N{self.out_channels}, K{fmt(self.kernel)}, S{fmt(self.stride)}, P{fmt(self.padding)})"


class BatchNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return backend.layer_forward(
            LayerKind.BATCH_NORM,
            x,
            {
                "weight": self.weight,
                "bias": self.bias,
                "running_mean": self.running_mean,
                "running_var": self.running_var,
            },
            {"training": self.training},
        )


class Block(nn.Module):
    """conv, optional BN, activation"""

    def __init__(self, conv: ConvLayer, batch_norm: bool, activation: LayerKind):
        super().__init__()
        self.conv = conv
        self.bn = BatchNorm(conv.out_channels) if batch_norm else None
        self.activation = LayerKind(activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        return backend.layer_forward(self.activation, x)

    def describe(self) -> str:
        names = {LayerKind.LEAKY_RELU: "LeakyReLU", LayerKind.SIGMOID: "Sigmoid", LayerKind.TANH: "Tanh"}
        parts = [self.conv.describe()]
        if self.bn is not None:
            parts.append("BN")
        parts.append(names[self.activation])
        return ", ".join(parts)


class ImageGenerator(nn.Module):
    """
    Latent vector -> 3xSxS image. The first transposed conv lifts the 1x1
    input to a KxK map (K=6 for 96, 4 otherwise), every later block doubles
    the resolution; the last block ends in tanh without BN.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.input_dim = arch.generator_input_dim
        n_up = int(round(math.log2(arch.image_size / arch.first_kernel)))
        channels = [arch.base_channels * 2 ** (n_up - 1 - i) for i in range(n_up)]

        blocks = [Block(ConvLayer(LayerKind.CONV_TRANSPOSE2D, self.input_dim, channels[0],
                                  arch.first_kernel, 1, 0), True, LayerKind.LEAKY_RELU)]
        for c_in, c_out in zip(channels, channels[1:]):
            blocks.append(Block(ConvLayer(LayerKind.CONV_TRANSPOSE2D, c_in, c_out, 4, 2, 1),
                                True, LayerKind.LEAKY_RELU))
        blocks.append(Block(ConvLayer(LayerKind.CONV_TRANSPOSE2D, channels[-1], 3, 4, 2, 1, bias=True),
                            False, LayerKind.TANH))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        x = latents.reshape(-1, self.input_dim, 1, 1)
        for block in self.blocks:
            x = block(x)
        return x

    def describe(self) -> List[str]:
        return [block.describe() for block in self.blocks]


class ImageDiscriminator(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        b = arch.base_channels
        self.blocks = nn.ModuleList([
            Block(ConvLayer(LayerKind.CONV2D, 3, b, 4, 2, 1), True, LayerKind.LEAKY_RELU),
            Block(ConvLayer(LayerKind.CONV2D, b, 2 * b, 4, 2, 1), True, LayerKind.LEAKY_RELU),
            Block(ConvLayer(LayerKind.CONV2D, 2 * b, 4 * b, 4, 2, 1), True, LayerKind.LEAKY_RELU),
            Block(ConvLayer(LayerKind.CONV2D, 4 * b, 1, 4, 2, 1, bias=True), False, LayerKind.SIGMOID),
        ])

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = images
        for block in self.blocks:
            x = block(x)
        return x

    def describe(self) -> List[str]:
        return [block.describe() for block in self.blocks]


class VideoDiscriminator(nn.Module):
    """
    Spatio-temporal discriminator over (B, T, 3, S, S) clips with an optional
    Q head (softmax over d_a classes) branching off the last feature layer.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        b = arch.base_channels
        if arch.dv_mode == "table_literal":
            specs = [(4, 1, 0)] * 3
            final = (4, 1, 0)
        else:
            specs = [(4, (1, 2, 2), 1), (4, 2, 1), (4, 2, 1)]
            final = None

        layers = []
        c_in = 3
        volume = (arch.T, arch.image_size, arch.image_size)
        for c_out, (k, s, p) in zip((b, 2 * b, 4 * b), specs):
            conv = ConvLayer(LayerKind.CONV3D, c_in, c_out, k, s, p)
            volume = conv.output_shape(volume)
            layers.append(Block(conv, True, LayerKind.LEAKY_RELU))
            c_in = c_out

        if final is None:
            # temporal kernel shrinks to whatever depth is left
            final = ((min(volume[0], 4), 4, 4), (1, 2, 2), (0, 1, 1))
        head = ConvLayer(LayerKind.CONV3D, c_in, 1, *final, bias=True)
        head.output_shape(volume)
        layers.append(Block(head, False, LayerKind.SIGMOID))
        self.blocks = nn.ModuleList(layers)

        self.q_head = ConvLayer(LayerKind.CONV3D, c_in, arch.d_a, *final, bias=True) if arch.d_a > 0 else None

    def forward(self, clips: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        x = clips.permute(0, 2, 1, 3, 4)
        for block in self.blocks[:-1]:
            x = block(x)
        probs = self.blocks[-1](x)
        if self.q_head is None:
            return probs, None
        logits = self.q_head(x).mean(dim=(2, 3, 4))
        return probs, backend.layer_forward(LayerKind.SOFTMAX, logits, hyper={"axis": 1})

    def describe(self) -> List[str]:
        return [block.describe() for block in self.blocks]


def init_conv_weights(root: nn.Module, generator: Optional[torch.Generator] = None):
    """normal(0, 0.02) conv weights, BN gamma ~ normal(1, 0.02), zero biases"""
    for module in root.modules():
        if isinstance(module, ConvLayer):
            backend.normal_(module.weight, 0.0, 0.02, generator)
            if module.bias is not None:
                with torch.no_grad():
                    module.bias.zero_()
        elif isinstance(module, BatchNorm):
            backend.normal_(module.weight, 1.0, 0.02, generator)
            with torch.no_grad():
                module.bias.zero_()


def generator_forward(g: ImageGenerator, latents: torch.Tensor) -> torch.Tensor:
    """Maps (N, d) or (B, K, d) latents to (N, 3, S, S) or (B, K, 3, S, S) images"""
    if latents.shape[-1] != g.input_dim:
        raise ContractViolationError(f"generator expects latent dimension {g.input_dim}, got {latents.shape[-1]}")
    images = g(latents)
    size = g.arch.image_size
    return images.reshape(*latents.shape[:-1], 3, size, size)


def image_disc_forward(d: ImageDiscriminator, images: torch.Tensor) -> torch.Tensor:
    size = d.arch.image_size
    if images.dim() != 4 or tuple(images.shape[1:]) != (3, size, size):
        raise ContractViolationError(f"image discriminator expects (B, 3, {size}, {size}), got {tuple(images.shape)}")
    return d(images)


def video_disc_forward(d: VideoDiscriminator, clips: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    size = d.arch.image_size
    if clips.dim() != 5:
        raise ContractViolationError(f"video discriminator expects (B, T, 3, S, S), got {tuple(clips.shape)}")
    if clips.shape[1] != d.arch.T:
        raise ContractViolationError(f"clip length {clips.shape[1]} does not match T={d.arch.T}")
    if tuple(clips.shape[2:]) != (3, size, size):
        raise ContractViolationError(f"clip frames must be 3x{size}x{size}, got {tuple(clips.shape[2:])}")
    return d(clips)


class NetworkBundle(nn.Module):
    """G_I, D_I, D_V (+Q), R_M and their Adam states; the unit that gets checkpointed"""

    def __init__(self, arch: ArchConfig, latent: LatentConfig):
        super().__init__()
        if arch.latent_dim != latent.d:
            raise ConfigurationError(f"arch latent_dim {arch.latent_dim} != d_c + d_m = {latent.d}")
        if arch.d_a != latent.d_a:
            raise ConfigurationError(f"arch d_a {arch.d_a} != latent d_a {latent.d_a}")
        self.arch = arch
        self.latent = latent
        self.g_image = ImageGenerator(arch)
        self.d_image = ImageDiscriminator(arch)
        self.d_video = VideoDiscriminator(arch)
        self.motion_rnn = MotionRnn.from_config(latent, action_in_rnn=arch.action_target == "rnn")
        self.iteration = 0
        self.adam: Dict[str, AdamState] = {}
        # length histogram of the training clips, used to draw generation lengths
        self.p_k: Optional[Dict[int, float]] = None

    @property
    def q_head(self) -> Optional[ConvLayer]:
        return self.d_video.q_head

    def generator_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        for name, param in self.named_parameters():
            if name.startswith(("g_image.", "motion_rnn.")):
                yield name, param

    def discriminator_parameters(self) -> Iterator[Tuple[str, nn.Parameter]]:
        for name, param in self.named_parameters():
            if name.startswith(("d_image.", "d_video.")):
                yield name, param

    def init_weights(self, generator: Optional[torch.Generator] = None):
        init_conv_weights(self, generator)
        self.motion_rnn.reset_parameters(generator)

    def ensure_adam(self, lr: float, beta1: float, beta2: float, eps: float):
        for name, param in self.named_parameters():
            state = self.adam.get(name)
            if state is None:
                self.adam[name] = AdamState.for_parameter(param, lr, beta1, beta2, eps)
            else:
                state.lr, state.beta1, state.beta2, state.eps = lr, beta1, beta2, eps

    def zero_grad_all(self):
        for param in self.parameters():
            param.grad = None


def build_bundle(arch: ArchConfig, latent: LatentConfig, seed: int = 0) -> NetworkBundle:
    bundle = NetworkBundle(arch, latent)
    bundle.init_weights(SeededRng.for_purpose(seed, "init").torch())
    logger.info(
        "Built bundle: %d generator / %d discriminator parameters",
        sum(p.numel() for _, p in bundle.generator_parameters()),
        sum(p.numel() for _, p in bundle.discriminator_parameters()),
    )
    return bundle


def _frame_latents(bundle: NetworkBundle, z_c: torch.Tensor, noise: torch.Tensor,
                   actions: Optional[torch.Tensor]) -> torch.Tensor:
    if bundle.arch.action_target == "generator":
        path = build_latent_path(z_c, bundle.motion_rnn(noise))
        if actions is None:
            return path
        if actions.dim() == path.dim() - 1:
            actions = actions.unsqueeze(-2).expand(*path.shape[:-1], actions.shape[-1])
        return torch.cat([path, actions.to(path.dtype)], dim=-1)
    return build_latent_path(z_c, bundle.motion_rnn(noise, actions))


def sample_fake_videos(bundle: NetworkBundle, batch: int, K: int, rng: RngLike,
                       actions: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """
    Differentiable batch of K-frame videos, (B, K, 3, S, S). Returns the
    one-hot action codes used (sampled when the bundle is conditional and
    none are given).
    """
    generator = as_generator(rng)
    z_c = sample_content(bundle.latent, generator, batch=batch)
    noise = sample_motion_noise(bundle.latent, K, generator, batch=batch)
    if bundle.latent.d_a > 0 and actions is None:
        actions = sample_action(bundle.latent, generator, batch=batch)
    latents = _frame_latents(bundle, z_c, noise, actions)
    return generator_forward(bundle.g_image, latents), actions


def generate_video(
    bundle: NetworkBundle,
    K: int,
    rng: RngLike,
    action: Optional[Union[int, torch.Tensor]] = None,
    *,
    content: Optional[torch.Tensor] = None,
    noise: Optional[torch.Tensor] = None,
    action_schedule: Optional[Sequence[Tuple[int, int]]] = None,
) -> torch.Tensor:
    """
    One K-frame video (K, 3, S, S) generated in eval mode. z_C is drawn once;
    `content` and `noise` pin z_C or the epsilon sequence; `action_schedule`
    switches z_A mid-video.
    """
    if K < 1:
        raise ContractViolationError(f"video length must be at least 1, got {K}")
    generator = as_generator(rng)
    z_c = content if content is not None else sample_content(bundle.latent, generator)
    eps = noise if noise is not None else sample_motion_noise(bundle.latent, K, generator)
    if eps.shape[0] != K:
        raise ContractViolationError(f"noise has {eps.shape[0]} steps, expected {K}")

    actions = None
    d_a = bundle.latent.d_a
    if action_schedule is not None:
        actions = scheduled_actions(action_schedule, K, d_a)
    elif isinstance(action, int):
        actions = one_hot(action, d_a)
    elif action is not None:
        actions = action
    elif d_a > 0:
        actions = sample_action(bundle.latent, generator)

    # generation always reads the frozen BN statistics
    was_training = bundle.training
    bundle.eval()
    try:
        with torch.no_grad():
            latents = _frame_latents(bundle, z_c, eps, actions)
            return generator_forward(bundle.g_image, latents)
    finally:
        bundle.train(was_training)


def content_motion_grid(bundle: NetworkBundle, n_contents: int, n_motions: int, K: int,
                        seed: int) -> torch.Tensor:
    """(n_contents, n_motions, K, 3, S, S): rows share z_C, columns share epsilon and z_A"""
    contents = [sample_content(bundle.latent, SeededRng.for_purpose(seed, "content", i)) for i in range(n_contents)]
    motions = [sample_motion_noise(bundle.latent, K, SeededRng.for_purpose(seed, "motion", j)) for j in range(n_motions)]
    actions = [
        sample_action(bundle.latent, SeededRng.for_purpose(seed, "action", j)) if bundle.latent.d_a > 0 else None
        for j in range(n_motions)
    ]
    rows = []
    for z_c in contents:
        row = [
            generate_video(bundle, K, SeededRng(seed, stream_id("grid")), action=a, content=z_c, noise=eps)
            for eps, a in zip(motions, actions)
        ]
        rows.append(torch.stack(row))
    return torch.stack(rows)
