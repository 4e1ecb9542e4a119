"""Neural building blocks, gradients, AdamW, seeded RNG streams and checkpoints.

Tensors are plain ``torch.Tensor`` objects; a parameter set is a mapping of
parameter names to tensors, iterated in sorted-name order. Every layer kind
used by the denoiser, generator and discriminator is defined here as a small
module that validates its input shape and raises ``ConfigurationError``
naming the layer and the offending dimensions.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, ContractError, ParseError, TrainingError

__all__ = [
    "RngStream",
    "sample_gaussian",
    "Conv1d",
    "ConvTranspose1d",
    "Dense",
    "LSTM",
    "Sigmoid",
    "Activation",
    "GroupNorm",
    "TimestepEmbedding",
    "ResidualAdd",
    "Concat",
    "build_layer",
    "layer_forward",
    "timestep_embedding",
    "init_parameters",
    "parameter_set",
    "backward",
    "clip_grad_norm",
    "AdamWState",
    "adamw_step",
    "save_container",
    "load_container",
    "encode_container",
    "decode_container",
]

_MASK64 = (1 << 64) - 1


class RngStream:
    """Seeded random stream with named, independent substreams.

    A substream is keyed by ``(seed, path)`` only, so creating a new consumer
    never shifts the values another consumer sees.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)
        key = tuple(zlib.crc32(p.encode()) for p in self.path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self.numpy = np.random.Generator(np.random.PCG64(seq))
        torch_seed = int(seq.generate_state(1, dtype=np.uint64)[0]) >> 1
        self.torch = torch.Generator().manual_seed(torch_seed)

    def spawn(self, name: str) -> "RngStream":
        return RngStream(self.seed, self.path + (name,))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={'/'.join(self.path) or '.'})"


def sample_gaussian(rng: RngStream, shape, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """I.i.d. standard normal tensor drawn from ``rng``."""
    return torch.randn(tuple(shape), generator=rng.torch, dtype=dtype)


# ---------------------------------------------------------------- layers


def _shape_error(layer: str, what: str, expected, got) -> ConfigurationError:
    return ConfigurationError(f"layer {layer!r}: expected {what} {expected}, got {got}")


class Conv1d(nn.Module):
    """'Same'-padded 1D convolution over ``[batch, channels, length]``."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, name: str = "conv1d"):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigurationError(f"layer {name!r}: stride must be 1 or 2, got {stride}")
        self.name = name
        self.in_channels = in_channels
        self.stride = stride
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size, stride=stride,
                              padding=kernel_size // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.in_channels:
            raise _shape_error(self.name, "input [B, C, L] with C =", self.in_channels, tuple(x.shape))
        if self.stride == 2 and x.shape[2] % 2:
            raise _shape_error(self.name, "even length for stride 2, length", "even", x.shape[2])
        return self.conv(x)


class ConvTranspose1d(nn.Module):
    """Transposed convolution doubling the sequence length."""

    def __init__(self, in_channels: int, out_channels: int, name: str = "conv_transpose1d"):
        super().__init__()
        self.name = name
        self.in_channels = in_channels
        self.conv = nn.ConvTranspose1d(in_channels, out_channels, 4, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[1] != self.in_channels:
            raise _shape_error(self.name, "input [B, C, L] with C =", self.in_channels, tuple(x.shape))
        return self.conv(x)


class Dense(nn.Module):
    def __init__(self, in_features: int, out_features: int, name: str = "dense"):
        super().__init__()
        self.name = name
        self.in_features = in_features
        self.linear = nn.Linear(in_features, out_features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise _shape_error(self.name, "last dimension", self.in_features, tuple(x.shape))
        return self.linear(x)


class LSTM(nn.Module):
    """Batch-first LSTM over ``[batch, length, features]``; returns the hidden sequence."""

    def __init__(self, input_size: int, hidden_size: int, num_layers: int = 1, name: str = "lstm"):
        super().__init__()
        self.name = name
        self.input_size = input_size
        self.lstm = nn.LSTM(input_size, hidden_size, num_layers=num_layers, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[2] != self.input_size:
            raise _shape_error(self.name, "input [B, L, F] with F =", self.input_size, tuple(x.shape))
        out, _ = self.lstm(x)
        return out


class Sigmoid(nn.Module):
    def __init__(self, name: str = "sigmoid"):
        super().__init__()
        self.name = name

    def forward(self, x):
        return torch.sigmoid(x)


class Activation(nn.Module):
    KINDS = ("silu", "relu")

    def __init__(self, function: str = "silu", name: str = "activation"):
        super().__init__()
        if function not in self.KINDS:
            raise ConfigurationError(f"layer {name!r}: unknown activation {function!r}")
        self.name = name
        self.kind = function

    def forward(self, x):
        return F.silu(x) if self.kind == "silu" else F.relu(x)


class GroupNorm(nn.Module):
    def __init__(self, num_groups: int, num_channels: int, name: str = "group_norm"):
        super().__init__()
        if num_channels % num_groups:
            raise ConfigurationError(
                f"layer {name!r}: {num_channels} channels not divisible into {num_groups} groups")
        self.name = name
        self.num_channels = num_channels
        self.norm = nn.GroupNorm(num_groups, num_channels)

    def forward(self, x):
        if x.dim() != 3 or x.shape[1] != self.num_channels:
            raise _shape_error(self.name, "input [B, C, L] with C =", self.num_channels, tuple(x.shape))
        return self.norm(x)


def timestep_embedding(steps: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape ``[batch, dim]``."""
    half = dim // 2
    dtype = steps.dtype if steps.is_floating_point() else torch.float32
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = steps.to(dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, dim: int, name: str = "timestep_embedding"):
        super().__init__()
        self.name = name
        self.dim = dim

    def forward(self, steps):
        if steps.dim() != 1:
            raise _shape_error(self.name, "1-D step vector, got shape", "[B]", tuple(steps.shape))
        return timestep_embedding(steps, self.dim)


class ResidualAdd(nn.Module):
    def __init__(self, name: str = "residual_add"):
        super().__init__()
        self.name = name

    def forward(self, x, y):
        if x.shape != y.shape:
            raise _shape_error(self.name, "matching shapes", tuple(x.shape), tuple(y.shape))
        return x + y


class Concat(nn.Module):
    """Channel concatenation for skip connections."""

    def __init__(self, name: str = "concat"):
        super().__init__()
        self.name = name

    def forward(self, x, y):
        if x.dim() != 3 or y.dim() != 3 or x.shape[0] != y.shape[0] or x.shape[2] != y.shape[2]:
            raise _shape_error(self.name, "[B, *, L] inputs agreeing on B and L", tuple(x.shape), tuple(y.shape))
        return torch.cat([x, y], dim=1)


_LAYERS = {
    "conv1d": Conv1d,
    "conv_transpose1d": ConvTranspose1d,
    "dense": Dense,
    "lstm": LSTM,
    "sigmoid": Sigmoid,
    "activation": Activation,
    "group_norm": GroupNorm,
    "timestep_embedding": TimestepEmbedding,
    "residual_add": ResidualAdd,
    "concat": Concat,
}


def build_layer(kind: str, **options) -> nn.Module:
    try:
        cls = _LAYERS[kind]
    except KeyError:
        raise ConfigurationError(f"unsupported layer kind {kind!r}") from None
    return cls(**options)


def layer_forward(layer: nn.Module, params: Mapping[str, torch.Tensor] | None, *inputs):
    """Run ``layer`` on ``inputs``, optionally substituting its parameters."""
    if params is None:
        return layer(*inputs)
    return torch.func.functional_call(layer, dict(params), inputs)


# ------------------------------------------------------- initialisation


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled uniform weights, orthogonal LSTM recurrences, zero biases."""
    with torch.no_grad():
        for name, sub in sorted(module.named_modules(), key=lambda kv: kv[0]):
            if isinstance(sub, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
                fan_in, _ = nn.init._calculate_fan_in_and_fan_out(sub.weight)
                if isinstance(sub, nn.ConvTranspose1d):
                    fan_in = sub.weight.shape[1] * sub.weight.shape[2] // sub.stride[0]
                bound = math.sqrt(3.0 / fan_in)
                nn.init.uniform_(sub.weight, -bound, bound, generator=generator)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.LSTM):
                for pname, p in sorted(sub.named_parameters()):
                    if pname.startswith("weight_ih"):
                        bound = math.sqrt(3.0 / p.shape[1])
                        nn.init.uniform_(p, -bound, bound, generator=generator)
                    elif pname.startswith("weight_hh"):
                        for gate in p.chunk(4, dim=0):
                            nn.init.orthogonal_(gate, generator=generator)
                    else:
                        p.zero_()
            elif isinstance(sub, nn.GroupNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()


# ------------------------------------------------------------ gradients


def parameter_set(module: nn.Module) -> dict[str, torch.Tensor]:
    return dict(sorted(module.named_parameters(), key=lambda kv: kv[0]))


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` for every trainable entry."""
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = [n for n in sorted(params) if params[n].requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names], allow_unused=True)
    return {n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)}


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> tuple[dict[str, torch.Tensor], float]:
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))
    if max_norm is None or max_norm <= 0 or total <= max_norm or not math.isfinite(total):
        return dict(grads), total
    scale = max_norm / (total + 1e-6)
    return {n: g * scale for n, g in grads.items()}, total


# ---------------------------------------------------------------- AdamW


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
               state: AdamWState) -> AdamWState:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    for name in sorted(grads):
        if not torch.isfinite(grads[name]).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    with torch.no_grad():
        for name in sorted(grads):
            p, g = params[name], grads[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            p.mul_(1.0 - state.lr * state.weight_decay)
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


# ---------------------------------------------------------- checkpoints

MAGIC = b"DGCK"
FORMAT_VERSION = 1


def encode_container(arrays: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> bytes:
    """Serialise named float32 arrays plus JSON metadata.

    Layout: ``DGCK`` magic, u16 format version, u64 header length, UTF-8 JSON
    header (sorted keys), then each array as raw little-endian float32 in
    header order.
    """
    entries, payloads, offset = [], [], 0
    for name in sorted(arrays):
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.asarray(a, dtype="<f4")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": "<f4",
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": dict(meta or {}), "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<HQ", FORMAT_VERSION, len(header)) + header + b"".join(payloads)


def decode_container(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise ParseError("not a checkpoint container (bad magic)")
    version, hlen = struct.unpack_from("<HQ", blob, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint format version {version}")
    start = 4 + struct.calcsize("<HQ")
    header = json.loads(blob[start:start + hlen].decode())
    base = start + hlen
    arrays = {}
    for e in header["tensors"]:
        chunk = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ParseError(f"truncated payload for {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_container(path, arrays: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> None:
    Path(path).write_bytes(encode_container(arrays, meta))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_container(Path(path).read_bytes())
