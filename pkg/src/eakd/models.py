"""ReLU MLP classifiers, Glorot initialisation and the binary checkpoint format."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor

ModelParams = dict[str, Tensor]

MAGIC = b"EAKD"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = field(default_factory=tuple)
    class_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.class_count < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"all MLP dimensions must be >= 1: {self}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_dims, self.class_count]
        return list(zip(widths[:-1], widths[1:]))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for i, (fan_in, fan_out) in enumerate(self.layer_dims):
            shapes[f"layer{i}.weight"] = (fan_in, fan_out)
            shapes[f"layer{i}.bias"] = (fan_out,)
        return shapes


def init_params(spec: MlpSpec, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases; bitwise reproducible for a given seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: ModelParams = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"layer{i}.weight"] = Tensor(w, requires_grad=True, name=f"layer{i}.weight")
        params[f"layer{i}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"layer{i}.bias")
    return params


def num_layers(params: ModelParams) -> int:
    return sum(1 for name in params if name.endswith(".weight"))


def forward(params: ModelParams, batch) -> Tensor:
    """Affine + ReLU for every hidden layer, plain affine at the output."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    depth = num_layers(params)
    first = params["layer0.weight"]
    if x.data.ndim != 2 or x.shape[1] != first.shape[0]:
        raise DimensionError(f"batch shape {x.shape} does not match input width {first.shape[0]}")
    for i in range(depth):
        x = tn.add(tn.matmul(x, params[f"layer{i}.weight"]), params[f"layer{i}.bias"])
        if i < depth - 1:
            x = tn.relu(x)
    return x


def spec_from_params(params: ModelParams) -> MlpSpec:
    depth = num_layers(params)
    dims = [params[f"layer{i}.weight"].shape for i in range(depth)]
    return MlpSpec(dims[0][0], tuple(d[1] for d in dims[:-1]), dims[-1][1])


def validate_params(params: ModelParams, spec: MlpSpec) -> None:
    """Raise :class:`DimensionError` naming the first layer that does not fit ``spec``."""
    expected = spec.param_shapes()
    for name, shape in expected.items():
        if name not in params:
            raise DimensionError(f"checkpoint is missing layer {name!r} (expected shape {shape})")
        if params[name].shape != shape:
            raise DimensionError(f"layer {name!r} has shape {params[name].shape}, expected {shape}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise DimensionError(f"checkpoint has unexpected layer {extra[0]!r}")


def clone_params(params: ModelParams, requires_grad: bool = True) -> ModelParams:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}


def save_checkpoint(params: ModelParams, path) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}Q", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        buf = f.read()
    return parse_checkpoint(buf, path=os.fspath(path))


def parse_checkpoint(buf: bytes, path: str | None = None) -> ModelParams:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos, path)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes, not an EAKD checkpoint", 0, path)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params: ModelParams = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start + 2, path) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * n, f"data of {name!r}"), dtype="<f8").astype(np.float64)
        params[name] = Tensor(data.reshape(dims), requires_grad=True, name=name)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after last tensor", pos, path)
    return params
