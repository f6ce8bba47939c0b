"""Recurrent convolutional segmentation network producing a signed score field.

Layer plan: plain conv (1 -> C), three recurrent conv layers (C -> C), plain
conv (C -> 1).  Every convolution is followed by per-channel batch
normalization and a per-channel PReLU, the last one included, so the output is
an unbounded score whose sign gives the class.

A recurrent layer with ``T`` time steps computes

    x0 = prelu(bn(Wf * u))
    xt = prelu(bn(Wf * u + Wr * x(t-1)))   for t = 1..T

with one ``Wf``/``Wr`` pair, one affine normalization and one PReLU shared
across time steps.  Running statistics are tracked per time step so that eval
mode normalizes each step with the statistics it saw in training.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
CHECKPOINT_MAGIC = b"ACWERCNN"
CHECKPOINT_VERSION = 1
LAYER_PLAN = ("plain", "recurrent", "recurrent", "recurrent", "plain")


class CheckpointError(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    feature_channels: int = 32
    kernel: int = 3
    time_steps: int = 3
    prelu_init_slope: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.in_channels != 1:
            raise ValueError("only single-channel input is supported")
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")
        if self.feature_channels < 1:
            raise ValueError("feature_channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd size")

    @property
    def recurrent_depth(self) -> int:
        return self.time_steps + 1

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform_fan_in(shape, generator) -> torch.Tensor:
    fan_in = shape[1] * shape[2] * shape[3]
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=generator, dtype=torch.float32) * 2.0 - 1.0) * bound


class NormPReLU(nn.Module):
    """Batch normalization with ``n_slots`` sets of running statistics, then PReLU."""

    def __init__(self, channels: int, slope: float, n_slots: int = 1):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.slope = nn.Parameter(torch.full((channels,), float(slope)))
        self.register_buffer("running_mean", torch.zeros(n_slots, channels))
        self.register_buffer("running_var", torch.ones(n_slots, channels))

    def forward(self, x: torch.Tensor, slot: int = 0) -> torch.Tensor:
        x = F.batch_norm(
            x,
            self.running_mean[slot],
            self.running_var[slot],
            self.weight,
            self.bias,
            training=self.training,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )
        return F.prelu(x, self.slope)


class PlainConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, config: NetworkConfig, generator):
        super().__init__()
        k = config.kernel
        self.weight = nn.Parameter(_uniform_fan_in((c_out, c_in, k, k), generator))
        self.norm = NormPReLU(c_out, config.prelu_init_slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(F.conv2d(x, self.weight, padding=self.weight.shape[-1] // 2))


class RecurrentConv(nn.Module):
    def __init__(self, channels: int, config: NetworkConfig, generator):
        super().__init__()
        k = config.kernel
        self.time_steps = config.time_steps
        self.weight_ff = nn.Parameter(_uniform_fan_in((channels, channels, k, k), generator))
        self.weight_rec = nn.Parameter(_uniform_fan_in((channels, channels, k, k), generator))
        self.norm = NormPReLU(channels, config.prelu_init_slope, n_slots=config.time_steps + 1)

    def forward(self, u: torch.Tensor, time_steps: int | None = None) -> torch.Tensor:
        steps = self.time_steps if time_steps is None else time_steps
        if steps < 1:
            raise ValueError("time_steps must be >= 1")
        if steps + 1 > self.norm.running_mean.shape[0]:
            raise ValueError(f"layer tracks statistics for at most {self.norm.running_mean.shape[0] - 1} steps")
        if u.shape[1] != self.weight_ff.shape[1]:
            raise ValueError(f"expected {self.weight_ff.shape[1]} input channels, got {u.shape[1]}")
        pad = self.weight_ff.shape[-1] // 2
        ff = F.conv2d(u, self.weight_ff, padding=pad)
        x = self.norm(ff, slot=0)
        for t in range(1, steps + 1):
            x = self.norm(ff + F.conv2d(x, self.weight_rec, padding=pad), slot=t)
        return x


class RCNN(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(int(config.seed))
        c = config.feature_channels
        layers = []
        for i, kind in enumerate(LAYER_PLAN):
            if kind == "recurrent":
                layers.append(RecurrentConv(c, config, gen))
            else:
                c_in = config.in_channels if i == 0 else c
                c_out = 1 if i == len(LAYER_PLAN) - 1 else c
                layers.append(PlainConv(c_in, c_out, config, gen))
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor, check_finite: bool = False) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if check_finite and not torch.isfinite(x).all():
                raise NonFiniteActivation(f"non-finite activations after layer {i} ({LAYER_PLAN[i]})")
        return x


def init_params(config: NetworkConfig | None = None) -> RCNN:
    """Build a freshly initialized network; deterministic in ``config.seed``."""
    return RCNN(config or NetworkConfig())


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def rcl_forward(layer: RecurrentConv, features, time_steps: int, mode: str = "eval") -> torch.Tensor:
    _set_mode(layer, mode)
    x = torch.as_tensor(features, dtype=torch.float32)
    with torch.set_grad_enabled(mode == "train"):
        return layer(x, time_steps)


def _set_mode(module: nn.Module, mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")


def as_batch(images) -> torch.Tensor:
    """Stack 2D images (or an (N, H, W) array) into an (N, 1, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (N, H, W) images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr))[:, None]


def forward(net: RCNN, images, mode: str = "eval") -> np.ndarray:
    """Score fields of shape (N, H, W) for a batch of normalized images."""
    _set_mode(net, mode)
    with torch.no_grad():
        out = net(as_batch(images), check_finite=True)
    return out[:, 0].numpy().astype(np.float64)


# -- checkpoints ---------------------------------------------------------------
#
# Layout: 8-byte magic, uint32 little-endian header length, UTF-8 JSON header,
# then raw little-endian float32 tensor data.  Offsets in the header are bytes
# from the start of the data block.


def save_checkpoint(net: RCNN, path, extra: dict | None = None) -> Path:
    path = Path(path)
    tensors = []
    blobs = []
    offset = 0
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": "acwe-rcnn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "tensors": tensors,
        "data_bytes": offset,
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header length")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    for key in ("format", "version", "config", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing field '{key}'")
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported field 'version' = {header['version']!r}")
    return header, raw[12 + n:]


def load_checkpoint(path, expect: NetworkConfig | None = None) -> RCNN:
    header, data = read_checkpoint_header(path)
    try:
        config = NetworkConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid field 'config' ({exc})") from None
    if expect is not None and expect != config:
        raise CheckpointError(f"{path}: field 'config' does not match the expected network configuration")
    net = RCNN(config)
    state = net.state_dict()
    entries = {t.get("name"): t for t in header["tensors"]}
    missing = set(state) - set(entries)
    if missing:
        raise CheckpointError(f"{path}: field 'tensors' lacks {sorted(missing)[0]!r}")
    loaded = {}
    for name, ref in state.items():
        entry = entries[name]
        shape = tuple(entry.get("shape", ()))
        if shape != tuple(ref.shape):
            raise CheckpointError(f"{path}: field 'tensors.{name}.shape' is {list(shape)}, expected {list(ref.shape)}")
        count = int(np.prod(shape)) if shape else 1
        start = int(entry.get("offset", -1))
        if start < 0 or start + 4 * count > len(data):
            raise CheckpointError(f"{path}: field 'tensors.{name}.offset' points outside the data block")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start).reshape(shape)
        loaded[name] = torch.from_numpy(arr.astype(np.float32))
    net.load_state_dict(loaded)
    return net
