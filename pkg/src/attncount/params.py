"""Named parameter sets, the Adam optimizer and the binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import SplitMix64
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ADCN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint bytes."""


class CheckpointMismatch(CheckpointError):
    """Checkpoint tensors do not match the network's declared parameters."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    epochs: int = 1
    rng_seed: int = 0
    precision: int = 32

    def __post_init__(self):
        if not self.learning_rate >= 0:
            # zero is allowed: it is the "parameters unchanged" control
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    adam_m: np.ndarray
    adam_v: np.ndarray


@dataclass
class NetworkParams:
    """Ordered, uniquely named learnable tensors plus Adam state."""

    entries: list[ParamEntry] = field(default_factory=list)
    step_count: int = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if any(e.name == name for e in self.entries):
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)
        self.entries.append(ParamEntry(name, t, np.zeros_like(t.data), np.zeros_like(t.data)))
        return t

    def __getitem__(self, name: str) -> Tensor:
        for e in self.entries:
            if e.name == name:
                return e.tensor
        raise KeyError(name)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return ((e.name, e.tensor) for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def count(self) -> int:
        return int(sum(e.tensor.data.size for e in self.entries))

    def zero_grad(self) -> None:
        for e in self.entries:
            e.tensor.grad = None

    def freeze(self, frozen: bool = True) -> None:
        for e in self.entries:
            e.tensor.requires_grad = not frozen

    def astype(self, dtype) -> None:
        """Cast parameters (and moments) in place, e.g. to float64 for gradient checks."""
        for e in self.entries:
            e.tensor.data = e.tensor.data.astype(dtype)
            e.adam_m = e.adam_m.astype(dtype)
            e.adam_v = e.adam_v.astype(dtype)
            e.tensor.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {e.name: e.tensor.data.copy() for e in self.entries}


def he_normal(rng: SplitMix64, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    """Fan-in scaled Gaussian init, std = sqrt(2 / (C*kh*kw))."""
    fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(int(np.prod(shape)), std=std).reshape(shape).astype(dtype)


def adam_step(params: NetworkParams, config: TrainConfig,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> NetworkParams:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    missing = [e.name for e in params.entries if e.tensor.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    params.step_count += 1
    t = params.step_count
    lr = config.learning_rate
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for e in params.entries:
        g = e.tensor.grad
        e.adam_m = beta1 * e.adam_m + (1.0 - beta1) * g
        e.adam_v = beta2 * e.adam_v + (1.0 - beta2) * (g * g)
        if lr:
            m_hat = e.adam_m / c1
            v_hat = e.adam_v / c2
            step = lr * m_hat / (np.sqrt(v_hat) + eps)
            e.tensor.data = (e.tensor.data - step).astype(e.tensor.data.dtype)
        e.tensor.grad = np.zeros_like(e.tensor.data)
    return params


# ---------------------------------------------------------------------------
# checkpoint format: "ADCN", u32 version, u32 count, then per tensor
# u32 name length, utf-8 name, u32 rank, u32 dims..., f32 values (all little-endian)


def checkpoint_bytes(params: NetworkParams) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(params.entries))
    for e in params.entries:
        name = e.name.encode("utf-8")
        data = e.tensor.data
        out += struct.pack("<I", len(name)) + name
        out += struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape)
        out += np.ascontiguousarray(data, dtype="<f4").tobytes()
    return bytes(out)


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    """Decode checkpoint bytes into an ordered name -> float32 array mapping."""
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos} (need {n} more bytes)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at byte 0")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid utf-8 tensor name before byte {pos}") from exc
        (rank,) = struct.unpack("<I", take(4))
        if rank > 4:
            raise CheckpointError(f"tensor {name!r} has rank {rank} > 4 (byte {pos - 4})")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32)
        tensors[name] = vals.reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes after last tensor at byte {pos}")
    return tensors


def load_into(params: NetworkParams, tensors: dict[str, np.ndarray]) -> None:
    """Copy decoded tensors into ``params``; names and shapes must match exactly."""
    expected = {e.name: e.tensor.shape for e in params.entries}
    unknown = sorted(set(tensors) - set(expected))
    missing = sorted(set(expected) - set(tensors))
    if unknown or missing:
        raise CheckpointMismatch(f"checkpoint names differ: unknown={unknown[:5]} missing={missing[:5]}")
    for e in params.entries:
        arr = tensors[e.name]
        if arr.shape != e.tensor.shape:
            raise CheckpointMismatch(f"{e.name}: checkpoint shape {arr.shape} != {e.tensor.shape}")
        e.tensor.data = arr.astype(e.tensor.data.dtype).copy()
        e.adam_m = np.zeros_like(e.tensor.data)
        e.adam_v = np.zeros_like(e.tensor.data)
        e.tensor.grad = None
    params.step_count = 0


def save_checkpoint(params: NetworkParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(params: NetworkParams, path: str | Path) -> None:
    load_into(params, parse_checkpoint(Path(path).read_bytes()))
