"""Encoder-decoder 3D segmentation networks and parameter containers.

One builder covers all three roles: the base network (in 1ch, out 2ch:
kidney + tumor), the protuberance detector (in 1ch, out 1ch, half the
channels) and the fusion network (in 2ch, out 1ch). Encoder: a two-conv
stem at full resolution, a stride-2 convolution for the first
downsampling, max-pooling for the rest, channels doubling per stage.
Decoder: per resolution one trilinear upsample, skip concatenation and a
single convolution. Sigmoid heads, ReLU elsewhere, no normalization.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from ..volume import NumericFault
from . import tensor as T
from .tensor import Tensor


@dataclass
class NetworkConfig:
    in_channels: int = 1
    out_channels: int = 2
    base_channels: int = 16
    num_downsamplings: int = 5
    output_names: tuple[str, ...] = ("kidney", "tumor")
    dtype: str = "float32"

    def __post_init__(self):
        self.output_names = tuple(self.output_names)
        if min(self.in_channels, self.out_channels, self.base_channels,
               self.num_downsamplings) < 1:
            raise ValueError("all channel/depth counts must be >= 1")
        if len(self.output_names) != self.out_channels:
            raise ValueError("need one output name per output channel")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def base_network_config(base_channels=16, depth=5) -> NetworkConfig:
    return NetworkConfig(1, 2, base_channels, depth, ("kidney", "tumor"))


def protuberance_network_config(base_channels=8, depth=5) -> NetworkConfig:
    return NetworkConfig(1, 1, base_channels, depth, ("protuberance",))


def fusion_network_config(base_channels=16, depth=5) -> NetworkConfig:
    return NetworkConfig(2, 1, base_channels, depth, ("tumor",))


class ParamSet:
    """Named parameter tensors with freeze flags and momentum buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self.momentum: dict[str, np.ndarray] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self.momentum[name] = np.zeros_like(data)
        return t

    def names(self) -> list[str]:
        return sorted(self.params)

    def freeze_all(self) -> None:
        self.frozen = set(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name in self.names():
            out.add(name, self.params[name].data.astype(dtype))
            out.momentum[name] = self.momentum[name].astype(dtype)
        out.frozen = set(self.frozen)
        return out


@dataclass
class Network:
    cfg: NetworkConfig
    params: ParamSet
    conv_plan: list[tuple]  # (name, stride) per encoder stage, etc.

    def named_outputs(self, out: Tensor) -> dict[str, Tensor]:
        return {name: T.narrow_channels(out, i, i + 1)
                for i, name in enumerate(self.cfg.output_names)}


def _he_init(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_network(cfg: NetworkConfig, rng) -> Network:
    """Allocate parameters for the architecture described above."""
    ps = ParamSet()
    dt = cfg.np_dtype
    depth = cfg.num_downsamplings

    def conv_param(name, cin, cout, k=3):
        ps.add(f"{name}.w", _he_init(rng, (cout, cin, k, k, k), dt))
        ps.add(f"{name}.b", np.zeros(cout, dtype=dt))

    ch = [cfg.base_channels * (2 ** i) for i in range(depth + 1)]
    conv_param("enc0.conv0", cfg.in_channels, ch[0])
    conv_param("enc0.conv1", ch[0], ch[0])
    for i in range(1, depth + 1):
        # stage 1 downsamples with a stride-2 conv, later stages with maxpool
        conv_param(f"enc{i}.conv0", ch[i - 1], ch[i])
        conv_param(f"enc{i}.conv1", ch[i], ch[i])
    for i in range(depth, 0, -1):
        conv_param(f"dec{i}.conv", ch[i] + ch[i - 1], ch[i - 1])
    conv_param("head", ch[0], cfg.out_channels, k=1)
    return Network(cfg, ps, [])


def forward(net: Network, x: Tensor, check: bool = True) -> Tensor:
    """Run the network; output spatial dims equal input spatial dims.

    Raises NumericFault naming the layer if non-finite values appear.
    """
    cfg = net.cfg
    depth = cfg.num_downsamplings
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, "
                         f"got {x.shape[1]}")
    for n in x.shape[2:]:
        if n % (2 ** depth):
            raise ValueError(f"grid {x.shape[2:]} not divisible by "
                             f"2^{depth}")
    p = net.params.params

    def conv(name, h, stride=1):
        out = T.conv3d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride)
        if check:
            T.check_finite(out, name)
        return out

    h = T.relu(conv("enc0.conv0", x))
    h = T.relu(conv("enc0.conv1", h))
    skips = [h]
    for i in range(1, depth + 1):
        if i == 1:
            h = T.relu(conv(f"enc{i}.conv0", h, stride=2))
        else:
            h = T.maxpool3d(h)
            h = T.relu(conv(f"enc{i}.conv0", h))
        h = T.relu(conv(f"enc{i}.conv1", h))
        if i < depth:
            skips.append(h)
    for i in range(depth, 0, -1):
        h = T.upsample2x(h)
        h = T.concat_channels(h, skips[i - 1])
        h = T.relu(conv(f"dec{i}.conv", h))
    logits = T.conv3d(h, p["head.w"], p["head.b"])
    if check:
        T.check_finite(logits, "head")
    return T.sigmoid(logits)


# ---------------------------------------------------------------------------
# checkpoint container

_CKPT_MAGIC = b"PCKP"
_CKPT_VERSION = 1


def save_checkpoint(path, net: Network) -> None:
    """Header (JSON: version, config echo, manifest) + f32 payloads in
    manifest order, momentum buffers alongside for resumable training."""
    names = net.params.names()
    header = {
        "version": _CKPT_VERSION,
        "config": asdict(net.cfg) | {"output_names": list(net.cfg.output_names)},
        "manifest": [
            {"name": n, "shape": list(net.params.params[n].shape),
             "dtype": "f32"}
            for n in names
        ],
        "frozen": sorted(net.params.frozen),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<HI", _CKPT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(net.params.params[n].data.astype("<f4").tobytes())
        for n in names:
            f.write(net.params.momentum[n].astype("<f4").tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[10:10 + hlen])
    cfg_d = dict(header["config"])
    cfg_d["output_names"] = tuple(cfg_d["output_names"])
    cfg = NetworkConfig(**cfg_d)
    ps = ParamSet()
    off = 10 + hlen
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        ps.add(entry["name"], data.reshape(shape).astype(cfg.np_dtype))
        off += 4 * n
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        ps.momentum[entry["name"]] = data.reshape(shape).astype(cfg.np_dtype)
        off += 4 * n
    ps.frozen = set(header["frozen"])
    return Network(cfg, ps, [])
