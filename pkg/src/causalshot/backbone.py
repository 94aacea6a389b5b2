"""Compact convolutional encoder that keeps a spatial grid at its output."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class EncoderConfig:
    """Shape contract of the encoder.

    ``channel_plan`` lists the width of each conv block and must end in ``k``.
    Every block is conv3x3 -> ReLU; the first ``log2(input_size / n)`` blocks
    are followed by a 2x2 max pool, the rest keep their resolution.
    """

    input_size: int = 32
    channel_plan: tuple = (16, 32, 32, 32)
    k: int = 32
    n: int = 4

    def __post_init__(self):
        object.__setattr__(self, "channel_plan", tuple(int(c) for c in self.channel_plan))
        if not self.channel_plan or self.channel_plan[-1] != self.k:
            raise ValueError("channel_plan must end with k")
        ratio = self.input_size / self.n
        pools = math.log2(ratio) if ratio >= 1 else -1
        if pools < 0 or not float(pools).is_integer():
            raise ValueError("input_size / n must be a power of two")
        if int(pools) > len(self.channel_plan):
            raise ValueError("not enough conv blocks to reach the target spatial size")

    @property
    def n_pools(self) -> int:
        return int(round(math.log2(self.input_size / self.n)))


PRESETS = {
    "desk": EncoderConfig(input_size=32, channel_plan=(16, 32, 32, 32), k=32, n=4),
    "tiny": EncoderConfig(input_size=16, channel_plan=(8, 8, 8), k=8, n=4),
    # full-scale output contract: 512 maps of 4x4 from 128x128 slices
    "full": EncoderConfig(input_size=128, channel_plan=(32, 64, 128, 256, 512), k=512, n=4),
}


def preset(name: str) -> EncoderConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown encoder preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class Encoder:
    config: EncoderConfig
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.config, self.seed)

    def __call__(self, images) -> ad.Tensor:
        return encode(images, self.params, self.config)

    def parameters(self) -> list:
        return [self.params[name] for name in sorted(self.params)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def init_params(cfg: EncoderConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    c_in = 1
    for i, c_out in enumerate(cfg.channel_plan):
        fan_in = c_in * 9
        bound = math.sqrt(6.0 / fan_in)
        params[f"conv{i}.weight"] = ad.Tensor(rng.uniform(-bound, bound, (c_out, c_in, 3, 3)), requires_grad=True)
        params[f"conv{i}.bias"] = ad.Tensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out
    return params


def encode(images, params: dict, cfg: EncoderConfig) -> ad.Tensor:
    """Map a ``[B, 1, S, S]`` batch to non-negative ``[B, k, n, n]`` feature maps."""
    x = ad.as_tensor(images)
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ad.ShapeError(f"expected [B, 1, {cfg.input_size}, {cfg.input_size}] input, got {x.shape}")
    for i in range(len(cfg.channel_plan)):
        x = ad.conv2d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=1, padding=1)
        x = ad.relu(x)
        if i < cfg.n_pools:
            x = ad.maxpool2d(x, 2)
    return x


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"CSCK"


def save_checkpoint(path, params: dict, header: dict) -> None:
    """Write a JSON header plus raw little-endian float64 blobs.

    The layout is ``MAGIC | u64 header length | header JSON | blobs``; the
    header lists every blob's name, shape and byte offset.
    """
    names = sorted(params)
    layout, offset = [], 0
    blobs = []
    for name in names:
        arr = ad.as_tensor(params[name]).data
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    meta = dict(header)
    meta["tensors"] = layout
    head = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(arrays, header)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    meta = json.loads(buf[12:12 + hlen])
    base = 12 + hlen
    arrays = {}
    for entry in meta.pop("tensors"):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(buf[start:start + 8 * count], dtype="<f8").reshape(entry["shape"]).copy()
    return arrays, meta


def config_to_dict(cfg: EncoderConfig) -> dict:
    d = asdict(cfg)
    d["channel_plan"] = list(cfg.channel_plan)
    return d
