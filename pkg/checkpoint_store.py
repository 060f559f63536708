"""
MCGN tensor container.

Layout (little-endian): magic "MCGN", version u32, metadata length u32,
UTF-8 JSON metadata, then one record per tensor: name length u16, UTF-8
name, rank u8, dims u64 each, raw float32 data.
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, BinaryIO, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import torch

from backend import AdamState
from errors import (
    BadMagicError,
    CheckpointError,
    ConfigMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from models_latent import LatentConfig
from models_networks import ArchConfig
from networks import NetworkBundle

logger = logging.getLogger(__name__)

MAGIC = b"MCGN"
FORMAT_VERSION = 1

HEADER = struct.Struct("<4sI")
U32 = struct.Struct("<I")
U16 = struct.Struct("<H")
U8 = struct.Struct("<B")
U64 = struct.Struct("<Q")

PathLike = Union[str, Path]


def _read_exact(reader: BinaryIO, n: int, what: str) -> bytes:
    data = reader.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"file ends inside {what} (wanted {n} bytes, got {len(data)})")
    return data


def write_tensor_file(path: PathLike, metadata: Dict[str, Any], tensors: Mapping[str, torch.Tensor]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = dict(metadata, tensor_count=len(tensors))
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")

    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION))
        f.write(U32.pack(len(meta_bytes)))
        f.write(meta_bytes)
        for name, tensor in tensors.items():
            name_bytes = name.encode("utf-8")
            array = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
            f.write(U16.pack(len(name_bytes)))
            f.write(name_bytes)
            f.write(U8.pack(array.ndim))
            for dim in array.shape:
                f.write(U64.pack(dim))
            f.write(array.astype("<f4", copy=False).tobytes())
    os.replace(tmp_path, path)


def read_tensor_file(path: PathLike) -> Tuple[Dict[str, Any], "OrderedDict[str, torch.Tensor]"]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")

    with open(path, "rb") as f:
        head = f.read(HEADER.size)
        if len(head) < len(MAGIC) or head[: len(MAGIC)] != MAGIC:
            raise BadMagicError(f"{path} is not an MCGN file (bad magic)")
        if len(head) != HEADER.size:
            raise TruncatedCheckpointError(f"{path}: header is truncated")
        _, version = HEADER.unpack(head)
        if version != FORMAT_VERSION:
            raise VersionMismatchError(version, FORMAT_VERSION)

        (meta_len,) = U32.unpack(_read_exact(f, U32.size, "metadata length"))
        try:
            metadata = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: metadata is not valid JSON") from e

        tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        while True:
            raw = f.read(U16.size)
            if not raw:
                break
            if len(raw) != U16.size:
                raise TruncatedCheckpointError(f"{path}: tensor table is truncated")
            (name_len,) = U16.unpack(raw)
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            (rank,) = U8.unpack(_read_exact(f, U8.size, f"rank of '{name}'"))
            dims = [U64.unpack(_read_exact(f, U64.size, f"dims of '{name}'"))[0] for _ in range(rank)]
            count = int(np.prod(dims)) if dims else 1
            data = _read_exact(f, 4 * count, f"data of '{name}'")
            array = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
            tensors[name] = torch.from_numpy(array.copy())

    expected = metadata.get("tensor_count")
    if expected is not None and expected != len(tensors):
        raise TruncatedCheckpointError(f"{path}: expected {expected} tensors, found {len(tensors)}")
    return metadata, tensors


def _check_config(saved: Mapping[str, Any], expected: Optional[Any]):
    if expected is None:
        return
    for field, value in expected.model_dump().items():
        if saved.get(field) != value:
            raise ConfigMismatchError(field, saved.get(field), value)


def save_checkpoint(bundle: NetworkBundle, path: PathLike):
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for name, param in bundle.named_parameters():
        tensors[name] = param
    for name, buf in bundle.named_buffers():
        tensors[name] = buf
    adam_meta = {}
    for name, state in bundle.adam.items():
        tensors[f"adam.m.{name}"] = state.m
        tensors[f"adam.v.{name}"] = state.v
        adam_meta[name] = {"step": state.step, "lr": state.lr, "beta1": state.beta1,
                           "beta2": state.beta2, "eps": state.eps}

    metadata = {
        "kind": "bundle",
        "arch": bundle.arch.model_dump(),
        "latent": bundle.latent.model_dump(),
        "iteration": bundle.iteration,
        "adam": adam_meta,
        "p_k": {str(k): float(v) for k, v in sorted(bundle.p_k.items())} if bundle.p_k else None,
    }
    write_tensor_file(path, metadata, tensors)
    logger.info("Saved checkpoint (iteration %d) to %s", bundle.iteration, path)


def load_checkpoint(path: PathLike, latent: Optional[LatentConfig] = None,
                    arch: Optional[ArchConfig] = None) -> NetworkBundle:
    """Rebuild a bundle; `latent` / `arch`, when given, must match what was saved"""
    metadata, tensors = read_tensor_file(path)
    if metadata.get("kind") != "bundle":
        raise CheckpointError(f"{path} holds a '{metadata.get('kind')}', not a network bundle")
    _check_config(metadata["latent"], latent)
    _check_config(metadata["arch"], arch)

    bundle = NetworkBundle(ArchConfig(**metadata["arch"]), LatentConfig(**metadata["latent"]))
    own = dict(bundle.named_parameters())
    own.update(dict(bundle.named_buffers()))
    missing = sorted(set(own) - set(tensors))
    if missing:
        raise TruncatedCheckpointError(f"{path}: missing tensors {missing[:3]}")
    with torch.no_grad():
        for name, target in own.items():
            if tuple(target.shape) != tuple(tensors[name].shape):
                raise CheckpointError(f"{path}: tensor '{name}' has shape {tuple(tensors[name].shape)}, "
                                      f"expected {tuple(target.shape)}")
            target.copy_(tensors[name])

    for name, info in metadata.get("adam", {}).items():
        bundle.adam[name] = AdamState(
            m=tensors[f"adam.m.{name}"], v=tensors[f"adam.v.{name}"], step=int(info["step"]),
            lr=info["lr"], beta1=info["beta1"], beta2=info["beta2"], eps=info["eps"],
        )
    bundle.iteration = int(metadata.get("iteration", 0))
    if metadata.get("p_k"):
        bundle.p_k = {int(k): float(v) for k, v in metadata["p_k"].items()}
    logger.info("Loaded checkpoint %s (iteration %d)", path, bundle.iteration)
    return bundle
