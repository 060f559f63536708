"""
Numeric contract for the rest of the package.

Every network, loss and optimizer above this module goes through the
functions defined here: the GRU cell, the layer vocabulary, Adam and the
finite-difference gradient check. Training runs in float32; the float64
mode exists for gradient checks only.
"""

from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Mapping, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from errors import ConfigurationError, ContractViolationError, NonFiniteError


Tensor = torch.Tensor
Parameter = torch.nn.Parameter

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_CLAMP = 1e-7

IntOrTuple = Union[int, Sequence[int]]


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    CONV_TRANSPOSE2D = "conv_transpose2d"
    CONV3D = "conv3d"
    BATCH_NORM = "batch_norm"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTMAX = "softmax"
    LINEAR = "linear"


@contextmanager
def high_precision():
    """Switch the default dtype to float64 for the duration of a gradient check"""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def check_finite(name: str, tensor: Tensor) -> Tensor:
    if not bool(torch.isfinite(tensor).all()):
        raise NonFiniteError(name)
    return tensor


def normal_(tensor: Tensor, mean: float, std: float, generator: Optional[torch.Generator] = None) -> Tensor:
    """In-place normal fill driven by an explicit generator"""
    with torch.no_grad():
        sample = torch.randn(tensor.shape, generator=generator, dtype=tensor.dtype)
        tensor.copy_(sample * std + mean)
    return tensor


def uniform_(tensor: Tensor, low: float, high: float, generator: Optional[torch.Generator] = None) -> Tensor:
    with torch.no_grad():
        sample = torch.rand(tensor.shape, generator=generator, dtype=tensor.dtype)
        tensor.copy_(sample * (high - low) + low)
    return tensor


def safe_log(p: Tensor, clamp: float = PROB_CLAMP) -> Tensor:
    return torch.log(p.clamp(clamp, 1.0 - clamp))


@dataclass
class GruParams:
    """Weights of one GRU cell; W_* act on the input, U_* on the hidden state"""

    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_u: Tensor
    u_u: Tensor
    b_u: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @property
    def input_dim(self) -> int:
        return self.w_r.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w_r.shape[0]

    def tensors(self) -> Tuple[Tensor, ...]:
        return (self.w_r, self.u_r, self.b_r, self.w_u, self.u_u, self.b_u, self.w_h, self.u_h, self.b_h)

    def validate(self):
        d_in, d_h = self.input_dim, self.hidden_dim
        for name in ("w_r", "w_u", "w_h"):
            if tuple(getattr(self, name).shape) != (d_h, d_in):
                raise ContractViolationError(f"GRU weight {name} must be {d_h}x{d_in}")
        for name in ("u_r", "u_u", "u_h"):
            if tuple(getattr(self, name).shape) != (d_h, d_h):
                raise ContractViolationError(f"GRU weight {name} must be {d_h}x{d_h}")
        for name in ("b_r", "b_u", "b_h"):
            if tuple(getattr(self, name).shape) != (d_h,):
                raise ContractViolationError(f"GRU bias {name} must have length {d_h}")


def gru_cell(x: Tensor, h: Tensor, params: GruParams) -> Tensor:
    """
    One GRU step: r and u gates, candidate state, then
    h' = (1 - u) * h + u * h_candidate. Accepts a single vector or a batch.
    """
    params.validate()
    if x.shape[-1] != params.input_dim:
        raise ContractViolationError(f"GRU input has dimension {x.shape[-1]}, expected {params.input_dim}")
    if h.shape[-1] != params.hidden_dim:
        raise ContractViolationError(f"GRU hidden state has dimension {h.shape[-1]}, expected {params.hidden_dim}")
    if x.shape[:-1] != h.shape[:-1]:
        raise ContractViolationError("GRU input and hidden state have different batch shapes")

    r = torch.sigmoid(F.linear(x, params.w_r) + F.linear(h, params.u_r) + params.b_r)
    u = torch.sigmoid(F.linear(x, params.w_u) + F.linear(h, params.u_u) + params.b_u)
    h_candidate = torch.tanh(F.linear(x, params.w_h) + F.linear(r * h, params.u_h) + params.b_h)
    return (1 - u) * h + u * h_candidate


@dataclass
class AdamState:
    m: Tensor
    v: Tensor
    step: int = 0
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_parameter(cls, param: Tensor, lr: float = 0.0002, beta1: float = 0.5,
                      beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m=torch.zeros_like(param, memory_format=torch.contiguous_format).detach(),
            v=torch.zeros_like(param, memory_format=torch.contiguous_format).detach(),
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(param: Tensor, state: AdamState, name: str = "parameter") -> Tuple[Tensor, AdamState]:
    """Bias-corrected Adam update of `param` in place from its populated `.grad`"""
    if state.step < 0:
        raise ContractViolationError(f"Adam step counter of '{name}' is negative")
    if param.grad is None:
        raise ContractViolationError(f"parameter '{name}' has no gradient")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise ContractViolationError(f"Adam moments of '{name}' do not match the parameter shape")
    grad = param.grad
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteError(name, "gradient")

    with torch.no_grad():
        state.step += 1
        state.m.mul_(state.beta1).add_(grad, alpha=1 - state.beta1)
        state.v.mul_(state.beta2).addcmul_(grad, grad, value=1 - state.beta2)
        m_hat = state.m / (1 - state.beta1 ** state.step)
        v_hat = state.v / (1 - state.beta2 ** state.step)
        param.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps))
    return param, state


def _expand(value: IntOrTuple, n: int) -> Tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ConfigurationError(f"expected {n} values, got {value}")
    return value


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size - 1) * stride - 2 * padding + kernel


def conv_output_shape(
    spatial: Sequence[int],
    kernel: IntOrTuple,
    stride: IntOrTuple = 1,
    padding: IntOrTuple = 0,
    transposed: bool = False,
) -> Tuple[int, ...]:
    """Spatial output dims of a (transposed) convolution; raises before any allocation"""
    n = len(spatial)
    kernel, stride, padding = _expand(kernel, n), _expand(stride, n), _expand(padding, n)
    if any(s < 1 for s in stride):
        raise ConfigurationError(f"stride must be positive, got {stride}")
    size_fn = conv_transpose_output_size if transposed else conv_output_size
    out = tuple(size_fn(s, k, st, p) for s, k, st, p in zip(spatial, kernel, stride, padding))
    if any(o < 1 for o in out):
        raise ConfigurationError(
            f"non-positive output size {out} for input {tuple(spatial)}, "
            f"kernel {kernel}, stride {stride}, padding {padding}"
        )
    return out


def _require_rank(kind: LayerKind, tensor: Tensor, rank: int):
    if tensor.dim() != rank:
        raise ContractViolationError(f"{kind.value} expects a rank-{rank} input, got shape {tuple(tensor.shape)}")


def _conv(kind: LayerKind, x: Tensor, params: Mapping[str, Tensor], hyper: Mapping) -> Tensor:
    spatial_rank = 3 if kind is LayerKind.CONV3D else 2
    _require_rank(kind, x, spatial_rank + 2)
    weight = params["weight"]
    bias = params.get("bias")
    transposed = kind is LayerKind.CONV_TRANSPOSE2D
    in_channels = weight.shape[0] if transposed else weight.shape[1]
    if x.shape[1] != in_channels:
        raise ContractViolationError(f"{kind.value} expects {in_channels} input channels, got {x.shape[1]}")

    stride = _expand(hyper.get("stride", 1), spatial_rank)
    padding = _expand(hyper.get("padding", 0), spatial_rank)
    kernel = tuple(weight.shape[2:])
    conv_output_shape(x.shape[2:], kernel, stride, padding, transposed=transposed)

    if kind is LayerKind.CONV2D:
        return F.conv2d(x, weight, bias, stride=stride, padding=padding)
    if kind is LayerKind.CONV3D:
        return F.conv3d(x, weight, bias, stride=stride, padding=padding)
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding)


def layer_forward(
    kind: Union[LayerKind, str],
    x: Tensor,
    params: Optional[Mapping[str, Tensor]] = None,
    hyper: Optional[Mapping] = None,
) -> Tensor:
    """
    Apply one layer of the vocabulary.

    conv2d / conv_transpose2d / conv3d: params weight (+ optional bias); hyper stride, padding.
    batch_norm: params weight, bias, running_mean, running_var; hyper training, momentum, eps.
    leaky_relu: hyper slope. softmax: hyper axis. linear: params weight, bias.
    """
    kind = LayerKind(kind)
    params = params or {}
    hyper = hyper or {}

    if kind in (LayerKind.CONV2D, LayerKind.CONV_TRANSPOSE2D, LayerKind.CONV3D):
        return _conv(kind, x, params, hyper)

    if kind is LayerKind.BATCH_NORM:
        if x.dim() < 2:
            raise ContractViolationError("batch_norm expects a batch with a channel axis")
        if params["weight"].shape[0] != x.shape[1]:
            raise ContractViolationError(
                f"batch_norm has {params['weight'].shape[0]} channels, input has {x.shape[1]}"
            )
        return F.batch_norm(
            x,
            params["running_mean"],
            params["running_var"],
            params["weight"],
            params["bias"],
            training=bool(hyper.get("training", True)),
            momentum=hyper.get("momentum", BN_MOMENTUM),
            eps=hyper.get("eps", BN_EPS),
        )

    if kind is LayerKind.LEAKY_RELU:
        return F.leaky_relu(x, negative_slope=hyper.get("slope", LEAKY_SLOPE))
    if kind is LayerKind.SIGMOID:
        return torch.sigmoid(x)
    if kind is LayerKind.TANH:
        return torch.tanh(x)
    if kind is LayerKind.SOFTMAX:
        return torch.softmax(x, dim=hyper.get("axis", -1))

    # linear
    weight = params["weight"]
    if x.shape[-1] != weight.shape[1]:
        raise ContractViolationError(f"linear expects input dimension {weight.shape[1]}, got {x.shape[-1]}")
    return F.linear(x, weight, params.get("bias"))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6) -> float:
    """
    Max relative error between autograd and central-difference gradients of
    the scalar `f()` with respect to every coordinate of `params`.
    Run it inside `high_precision()` with float64 parameters.
    """
    params = list(params)
    low = [i for i, p in enumerate(params) if p.dtype != torch.float64]
    if low:
        raise ContractViolationError(f"gradient checks need float64 parameters; params {low} are not")
    analytic = torch.autograd.grad(f(), params, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(params, analytic):
            flat = param.view(-1)
            grad_flat = grad.reshape(-1) if grad is not None else torch.zeros_like(flat)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                f_plus = f().item()
                flat[i] = original - h
                f_minus = f().item()
                flat[i] = original

                numeric = (f_plus - f_minus) / (2 * h)
                exact = grad_flat[i].item()
                error = abs(exact - numeric) / max(1e-12, abs(exact) + abs(numeric))
                worst = max(worst, error)
    return worst
