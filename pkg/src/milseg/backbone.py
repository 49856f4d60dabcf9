"""Trimmed three-stage fully convolutional backbone with side outputs.

Each stage is a run of 3x3 same-padding convolutions followed (from the
second stage on) by a 2x2 max pooling, so the stages produce feature maps
at strides 1, 2 and 4.  The last convolution of every stage feeds a 1x1
single-channel head with a sigmoid, giving one probability map per scale;
the maps are bilinearly upsampled to the input size and merged by a fixed
convex fusion:

    fused = sum_t alpha_t * side_t

Default channel widths are deliberately small (16, 32, 64) so training is
feasible on a desktop CPU; the receptive-field/stride arithmetic only
depends on kernel sizes and pooling, not on width.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .pooling import EPSILON
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DWSM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be read back."""


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture description: (conv_count, channels) per stage."""

    stages: tuple[tuple[int, int], ...] = ((2, 16), (2, 32), (3, 64))
    kernel_size: int = 3
    input_channels: int = 3
    fusion_weights: tuple[float, ...] = (0.2, 0.35, 0.45)

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("backbone needs at least one stage")
        for n_conv, channels in self.stages:
            if n_conv < 1:
                raise ValueError("every stage needs at least one convolution")
            if channels < 1:
                raise ValueError("stage channel count must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd number")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if len(self.fusion_weights) != len(self.stages):
            raise ValueError(
                f"need one fusion weight per stage: {len(self.fusion_weights)} "
                f"weights for {len(self.stages)} stages"
            )

    @property
    def num_stages(self) -> int:
        return len(self.stages)


@dataclass
class SideOutputs:
    """Per-scale probability maps plus their fused combination.

    All maps are (B, 1, H, W) at the input resolution with values strictly
    inside (0, 1).
    """

    side_maps: list[Tensor]
    fused: Tensor

    def side_array(self, t: int) -> np.ndarray:
        return self.side_maps[t].data

    def fused_array(self) -> np.ndarray:
        return self.fused.data


class NetworkState:
    """Parameters of one backbone instance, keyed by layer name.

    Names follow the ``c<stage>_<conv>`` convention with ``side<t>`` for
    the 1x1 heads; iteration order is the construction order, which the
    trainer and the checkpoint format both rely on.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self):
        return self.params.items()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @staticmethod
    def is_side_param(name: str) -> bool:
        return name.startswith("side")


def _param_shapes(config: BackboneConfig):
    """Yield (name, shape) in network order."""
    k = config.kernel_size
    in_ch = config.input_channels
    for s, (n_conv, channels) in enumerate(config.stages, start=1):
        for i in range(1, n_conv + 1):
            yield f"c{s}_{i}.weight", (channels, in_ch, k, k)
            yield f"c{s}_{i}.bias", (channels,)
            in_ch = channels
        yield f"side{s}.weight", (1, channels, 1, 1)
        yield f"side{s}.bias", (1,)


def build_network(config: BackboneConfig, seed: int, dtype=np.float32) -> NetworkState:
    """Initialize parameters with fan-in-scaled uniform noise.

    Weights and biases of a layer are drawn from U(-b, b) with
    b = 1/sqrt(fan_in); the same seed always reproduces the same tensors.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    bound = 1.0
    for name, shape in _param_shapes(config):
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / np.sqrt(fan_in)
        values = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(values, requires_grad=True)
    return NetworkState(config, params)


def forward(network: NetworkState, image) -> SideOutputs:
    """Run the backbone and return all side maps plus the fused map.

    Accepts a (C,H,W) array/tensor or a (B,C,H,W) batch.  Side maps are
    computed at their native stride, clamped away from {0,1}, upsampled
    to the input size, and fused with the configured weights.
    """
    config = network.config
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim == 3:
        src = x
        x = T.wrap_op(src.data[None], (src,), lambda g: src.accumulate_grad(g[0]))
    if x.data.ndim != 4:
        raise T.ShapeError(f"expected a C,H,W or B,C,H,W image, got dims {x.dims}")
    if x.dims[1] != config.input_channels:
        raise T.ShapeError(
            f"image has {x.dims[1]} channels, network expects {config.input_channels}"
        )
    h, w = x.dims[2], x.dims[3]
    pad = (config.kernel_size - 1) // 2

    side_maps: list[Tensor] = []
    feat = x
    for s in range(1, config.num_stages + 1):
        if s > 1:
            feat = T.maxpool2x2(feat)
        n_conv = config.stages[s - 1][0]
        for i in range(1, n_conv + 1):
            feat = T.relu(T.conv2d(feat, network.params[f"c{s}_{i}.weight"],
                                   network.params[f"c{s}_{i}.bias"], padding=pad))
        raw = T.conv2d(feat, network.params[f"side{s}.weight"],
                       network.params[f"side{s}.bias"])
        prob = T.clamp(T.sigmoid(raw), EPSILON, 1.0 - EPSILON)
        side_maps.append(T.bilinear_upsample(prob, h, w))

    fused = T.scale(side_maps[0], config.fusion_weights[0])
    for t in range(1, config.num_stages):
        fused = T.add(fused, T.scale(side_maps[t], config.fusion_weights[t]))
    return SideOutputs(side_maps, fused)


def receptive_field_report(config: BackboneConfig) -> list[tuple[str, int, int]]:
    """Receptive field size and stride of every tapped layer.

    Uses the recurrence rf' = rf + (k - 1) * stride_in, with each 2x2
    pooling acting as a k=2 layer that doubles the running stride.
    """
    rows = []
    rf, stride = 1, 1
    k = config.kernel_size
    for s, (n_conv, _channels) in enumerate(config.stages, start=1):
        if s > 1:
            rf += stride  # 2x2 pooling: rf += (2-1) * stride
            stride *= 2
        for _ in range(n_conv):
            rf += (k - 1) * stride
        rows.append((f"c{s}_{n_conv}", rf, stride))
    return rows


# ---------------------------------------------------------------------------
# checkpoint format
#
#   "DWSM" | version u32 LE | config length u32 LE | config (UTF-8 key=value
#   lines) | array count u32 LE | per array: name length u32 LE, UTF-8 name,
#   rank u32 LE, dims u32 LE each, float32 LE payload


def _config_text(config: BackboneConfig) -> str:
    lines = [
        "conv_counts=" + ",".join(str(n) for n, _ in config.stages),
        "channels=" + ",".join(str(c) for _, c in config.stages),
        f"kernel_size={config.kernel_size}",
        f"input_channels={config.input_channels}",
        "fusion_weights=" + ",".join(repr(float(a)) for a in config.fusion_weights),
    ]
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> BackboneConfig:
    values: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line in checkpoint: {line!r}")
        key, _, val = line.partition("=")
        values[key] = val
    try:
        counts = [int(v) for v in values["conv_counts"].split(",")]
        channels = [int(v) for v in values["channels"].split(",")]
        return BackboneConfig(
            stages=tuple(zip(counts, channels)),
            kernel_size=int(values["kernel_size"]),
            input_channels=int(values["input_channels"]),
            fusion_weights=tuple(float(v) for v in values["fusion_weights"].split(",")),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"invalid checkpoint config block: {exc}") from exc


def save_checkpoint(network: NetworkState, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    config_bytes = _config_text(network.config).encode("utf-8")
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<I", len(network.params)))
    for name, tensor in network.parameters():
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", tensor.data.ndim))
        for d in tensor.dims:
            buf.write(struct.pack("<I", d))
        buf.write(tensor.data.astype("<f4", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path) -> NetworkState:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}"
            )
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config = _config_from_text(_read_exact(fh, config_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = struct.unpack(
                "<" + "I" * rank, _read_exact(fh, 4 * rank, f"dims of {name}")
            )
            n_values = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 4 * n_values, f"payload of {name}")
            values = np.frombuffer(payload, dtype="<f4").reshape(dims)
            params[name] = Tensor(values.astype(np.float32), requires_grad=True)
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last declared array")

    expected = [name for name, _ in _param_shapes(config)]
    if list(params.keys()) != expected:
        raise CheckpointError(
            "checkpoint arrays do not match the declared architecture: "
            f"got {list(params.keys())}, expected {expected}"
        )
    for name, shape in _param_shapes(config):
        if params[name].dims != shape:
            raise CheckpointError(
                f"array {name} has dims {params[name].dims}, expected {shape}"
            )
    return NetworkState(config, params)
