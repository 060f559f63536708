import hashlib
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import backend
from errors import ConfigurationError, ContractViolationError
from models_latent import LatentConfig

U64_MASK = (1 << 64) - 1


def stream_id(tag: str, index: int = 0) -> int:
    """Stable 64-bit id for a (purpose, index) pair"""
    digest = hashlib.blake2b(f"{tag}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class SeededRng:
    """(base seed, stream id) pair; the pair alone fixes every sample drawn from it"""

    seed: int
    stream: int = 0

    @classmethod
    def for_purpose(cls, seed: int, tag: str, index: int = 0) -> "SeededRng":
        return cls(seed=seed, stream=stream_id(tag, index))

    def _mixed_seed(self) -> int:
        payload = (self.seed & U64_MASK).to_bytes(8, "little") + (self.stream & U64_MASK).to_bytes(8, "little")
        digest = hashlib.blake2b(payload, digest_size=8).digest()
        return int.from_bytes(digest, "little") & ((1 << 63) - 1)

    def torch(self) -> torch.Generator:
        generator = torch.Generator()
        generator.manual_seed(self._mixed_seed())
        return generator

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed & U64_MASK, self.stream & U64_MASK]))


RngLike = Union[SeededRng, torch.Generator]


def as_generator(rng: RngLike) -> torch.Generator:
    # a SeededRng always restarts its stream; a Generator keeps its position
    if isinstance(rng, SeededRng):
        return rng.torch()
    return rng


def sample_content(cfg: LatentConfig, rng: RngLike, batch: Optional[int] = None) -> torch.Tensor:
    shape = (cfg.d_c,) if batch is None else (batch, cfg.d_c)
    return torch.randn(shape, generator=as_generator(rng))


def sample_motion_noise(cfg: LatentConfig, K: int, rng: RngLike, batch: Optional[int] = None) -> torch.Tensor:
    if K < 1:
        raise ContractViolationError(f"video length must be at least 1, got {K}")
    shape = (K, cfg.d_e) if batch is None else (batch, K, cfg.d_e)
    return torch.randn(shape, generator=as_generator(rng))


def one_hot(classes: Union[int, Sequence[int], torch.Tensor], d_a: int) -> torch.Tensor:
    classes = torch.as_tensor(classes, dtype=torch.long)
    if bool(((classes < 0) | (classes >= d_a)).any()):
        raise ConfigurationError(f"action class out of range for {d_a} categories")
    return F.one_hot(classes, d_a).to(torch.get_default_dtype())


def sample_action(cfg: LatentConfig, rng: RngLike, batch: Optional[int] = None) -> torch.Tensor:
    if cfg.d_a < 2:
        raise ConfigurationError(f"categorical actions need d_a >= 2, got {cfg.d_a}")
    shape = () if batch is None else (batch,)
    classes = torch.randint(cfg.d_a, shape, generator=as_generator(rng))
    return one_hot(classes, cfg.d_a)


def sample_video_length(p_k: Mapping[int, float], rng: RngLike, count: Optional[int] = None) -> Union[int, List[int]]:
    if not p_k:
        raise ConfigurationError("length histogram is empty")
    lengths = sorted(p_k)
    if any(int(k) < 1 for k in lengths):
        raise ConfigurationError("video lengths must be positive")
    probs = [float(p_k[k]) for k in lengths]
    if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, rel_tol=0.0, abs_tol=1e-9):
        raise ConfigurationError(f"length histogram does not sum to 1 (sum={sum(probs)!r})")

    draws = torch.multinomial(
        torch.tensor(probs, dtype=torch.float64),
        1 if count is None else count,
        replacement=True,
        generator=as_generator(rng),
    )
    picked = [int(lengths[i]) for i in draws.tolist()]
    return picked[0] if count is None else picked


class MotionRnn(nn.Module):
    """One-layer GRU mapping i.i.d. noise (optionally prefixed by z_A) to motion codes"""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for gate in ("r", "u", "h"):
            self.register_parameter(f"w_{gate}", nn.Parameter(torch.zeros(hidden_dim, input_dim)))
            self.register_parameter(f"u_{gate}", nn.Parameter(torch.zeros(hidden_dim, hidden_dim)))
            self.register_parameter(f"b_{gate}", nn.Parameter(torch.zeros(hidden_dim)))

    @classmethod
    def from_config(cls, cfg: LatentConfig, action_in_rnn: bool = True) -> "MotionRnn":
        input_dim = cfg.rnn_input_dim if action_in_rnn else cfg.d_e
        return cls(input_dim, cfg.d_m)

    def reset_parameters(self, generator: Optional[torch.Generator] = None):
        bound = 1.0 / math.sqrt(self.hidden_dim)
        for name, param in self.named_parameters():
            if name.startswith("b_"):
                with torch.no_grad():
                    param.zero_()
            else:
                backend.uniform_(param, -bound, bound, generator)

    def gru_params(self) -> backend.GruParams:
        return backend.GruParams(
            w_r=self.w_r, u_r=self.u_r, b_r=self.b_r,
            w_u=self.w_u, u_u=self.u_u, b_u=self.b_u,
            w_h=self.w_h, u_h=self.u_h, b_h=self.b_h,
        )

    def forward(self, noise: torch.Tensor, action: Optional[torch.Tensor] = None) -> torch.Tensor:
        return motion_rnn_unroll(self, noise, action)


def motion_rnn_unroll(rnn: MotionRnn, noise: torch.Tensor, action: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    noise: (K, d_e) or (B, K, d_e). action: one code per video ((d_a,) / (B, d_a))
    or one per step ((K, d_a) / (B, K, d_a)). Returns the K motion codes, h_0 = 0.
    """
    if noise.dim() not in (2, 3):
        raise ContractViolationError(f"noise must be (K, d_e) or (B, K, d_e), got {tuple(noise.shape)}")
    K = noise.shape[-2]
    if K < 1:
        raise ContractViolationError("noise sequence is empty")

    steps = noise
    if action is not None:
        if action.dim() == noise.dim() - 1:
            action = action.unsqueeze(-2).expand(*noise.shape[:-1], action.shape[-1])
        if action.shape[:-1] != noise.shape[:-1]:
            raise ContractViolationError("action codes do not line up with the noise sequence")
        # z_A goes before epsilon at every step
        steps = torch.cat([action.to(noise.dtype), noise], dim=-1)
    if steps.shape[-1] != rnn.input_dim:
        raise ContractViolationError(
            f"motion RNN expects input dimension {rnn.input_dim}, got {steps.shape[-1]}"
        )

    params = rnn.gru_params()
    h = noise.new_zeros(*noise.shape[:-2], rnn.hidden_dim)
    codes = []
    for k in range(K):
        h = backend.gru_cell(steps[..., k, :], h, params)
        codes.append(h)
    return torch.stack(codes, dim=-2)


def build_latent_path(z_c: torch.Tensor, motion: torch.Tensor) -> torch.Tensor:
    """Frame k of the path is [z_C; z_M^(k)]; z_c is (d_c,) or (B, d_c)"""
    if motion.dim() < 2 or motion.shape[-2] < 1:
        raise ContractViolationError("motion sequence is empty")
    if z_c.shape[:-1] != motion.shape[:-2]:
        raise ContractViolationError("content codes and motion codes have different batch shapes")
    content = z_c.unsqueeze(-2).expand(*motion.shape[:-1], z_c.shape[-1])
    return torch.cat([content, motion], dim=-1)


def cycle_schedule(K: int, every: int, d_a: int, start_class: int = 0) -> List[Tuple[int, int]]:
    """Switch the action class every `every` frames, cycling through all classes"""
    if every < 1:
        raise ConfigurationError("action switch interval must be positive")
    return [(start, (start_class + i) % d_a) for i, start in enumerate(range(0, K, every))]


def scheduled_actions(schedule: Sequence[Tuple[int, int]], K: int, d_a: int) -> torch.Tensor:
    """Per-frame one-hot codes (K, d_a) from (start_frame, class) switch points"""
    if not schedule or schedule[0][0] != 0:
        raise ConfigurationError("an action schedule must start at frame 0")
    classes = torch.empty(K, dtype=torch.long)
    points = sorted(schedule) + [(K, -1)]
    for (start, cls), (end, _) in zip(points, points[1:]):
        classes[start:end] = cls
    return one_hot(classes, d_a)


def sweep_latent_dims(total: int = 60, step: int = 10) -> List[Dict[str, int]]:
    """(d_c, d_m) pairs with a fixed sum, d_c stepping from `step` up to `total - step`"""
    if step < 1 or total <= step:
        raise ConfigurationError("sweep needs 0 < step < total")
    return [{"d_c": d_c, "d_m": total - d_c} for d_c in range(step, total, step)]
