"""SR model zoo: network builders, binary weight files, a desk-scale
trainer, and receptive-field analysis.

Three architectures, all ending in a single pixel-shuffle upsampling
stage:

* ``plain_cnn``   -- ``depth`` conv+PReLU pairs, the last conv widening
  to 3*scale^2 channels. Receptive field 2*depth + 1.
* ``residual_net``-- head conv, ``blocks`` two-conv residual blocks with
  an identity skip and a PReLU between the convs, a global skip adding
  the head output onto the block chain, then a tail conv. Receptive
  field 2*(2*blocks + 2) + 1.
* ``linear_upsampler`` -- fixed bicubic interpolation written as a 5x5
  conv plus pixel shuffle; exactly linear and not trainable.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .dataset import cubic, downsample
from .engine import Tensor, conv2d, pixel_shuffle, prelu
from .errors import (
    AnalysisError,
    BadMagicError,
    ConfigError,
    DataError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionError,
    WeightLoadError,
)

__all__ = [
    "ConvLayer",
    "PReLULayer",
    "PixelShuffleLayer",
    "SRNetwork",
    "TrainConfig",
    "Adam",
    "build_plain_cnn",
    "build_residual_net",
    "build_linear_upsampler",
    "save_weights",
    "load_weights",
    "train_tiny",
    "receptive_field",
    "probe_receptive_field",
]

_SCALES = (1, 2, 3, 4)
_UPSAMPLER_SCALES = (2, 3, 4)
_DEFAULT_SLOPE = 0.25


@dataclass
class ConvLayer:
    kernel: Tensor  # (c_out, c_in, k, k)
    bias: Tensor    # (c_out,)
    padding: int

    op = "conv"

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.kernel, self.bias, self.padding)

    def descriptor(self) -> tuple[int, int, int, int]:
        c_out, c_in, k, _ = self.kernel.shape
        return (c_in, c_out, k, self.padding)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("kernel", self.kernel), ("bias", self.bias)]


@dataclass
class PReLULayer:
    slope: Tensor  # (1,)

    op = "prelu"

    def forward(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)

    def descriptor(self) -> tuple[int, int, int, int]:
        return (0, 0, 0, 0)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [("slope", self.slope)]


@dataclass
class PixelShuffleLayer:
    upscale: int
    channels_in: int

    op = "pixel_shuffle"

    def forward(self, x: Tensor) -> Tensor:
        return pixel_shuffle(x, self.upscale)

    def descriptor(self) -> tuple[int, int, int, int]:
        s2 = self.upscale * self.upscale
        return (self.channels_in, self.channels_in // s2, 0, 0)

    def tensors(self) -> list[tuple[str, Tensor]]:
        return []


Layer = Union[ConvLayer, PReLULayer, PixelShuffleLayer]


@dataclass
class SRNetwork:
    """A super-resolution network: a kind tag, scale, and flat layer list.

    The kind tag fixes the wiring (where the skips go); the flat list is
    what the weight file stores, so loading needs no side channel.
    """

    kind: str
    scale: int
    layers: list[Layer]

    def forward(self, x: Tensor) -> Tensor:
        if self.kind == "residual_net":
            head, blocks, tail_conv, shuffle = _residual_parts(self.layers)
            h0 = head.forward(x)
            r = h0
            for conv_a, act, conv_b in blocks:
                r = r + conv_b.forward(act.forward(conv_a.forward(r)))
            return shuffle.forward(tail_conv.forward(r + h0))
        out = x
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def weights(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.tensors():
                named.append((f"layer{i}.{layer.op}.{name}", tensor))
        return named

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.weights())

    def set_requires_grad(self, flag: bool) -> None:
        for _, tensor in self.weights():
            tensor.requires_grad = flag

    @property
    def input_channels(self) -> int:
        return self.layers[0].descriptor()[0]


def _residual_parts(layers: Sequence[Layer]):
    head = layers[0]
    tail_conv, shuffle = layers[-2], layers[-1]
    body = layers[1:-2]
    blocks = [tuple(body[i:i + 3]) for i in range(0, len(body), 3)]
    return head, blocks, tail_conv, shuffle


def _validate_structure(kind: str, scale: int, layers: Sequence[Layer]) -> None:
    ops = [layer.op for layer in layers]
    if kind == "plain_cnn":
        good = (len(ops) >= 5 and len(ops) % 2 == 1 and ops[-1] == "pixel_shuffle"
                and all(op == ("conv" if i % 2 == 0 else "prelu")
                        for i, op in enumerate(ops[:-1])))
    elif kind == "residual_net":
        body = ops[1:-2]
        good = (len(ops) >= 6 and ops[0] == "conv" and ops[-2] == "conv"
                and ops[-1] == "pixel_shuffle" and len(body) % 3 == 0 and len(body) > 0
                and all(op == ("prelu" if i % 3 == 1 else "conv")
                        for i, op in enumerate(body)))
    elif kind == "linear_upsampler":
        good = ops == ["conv", "pixel_shuffle"]
    else:
        raise WeightLoadError(f"unknown network kind {kind!r}")
    if not good:
        raise WeightLoadError(f"layer sequence {ops} does not form a {kind}")
    shuffle = layers[-1]
    if isinstance(shuffle, PixelShuffleLayer) and shuffle.upscale != scale:
        raise WeightLoadError(
            f"pixel shuffle factor {shuffle.upscale} does not match scale {scale}")


# ------------------------------------------------------------------- builders


def _he_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int,
             padding: int) -> ConvLayer:
    std = math.sqrt(2.0 / (c_in * k * k))
    kernel = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(np.float32)
    return ConvLayer(kernel=Tensor(kernel), bias=Tensor(np.zeros(c_out, np.float32)),
                     padding=padding)


def _prelu_layer() -> PReLULayer:
    return PReLULayer(slope=Tensor(np.full(1, _DEFAULT_SLOPE, np.float32)))


def _check_build_args(scale: int, width: int) -> None:
    if scale not in _SCALES:
        raise ConfigError(f"scale must be one of {_SCALES}, got {scale}")
    if width < 4:
        raise ConfigError(f"width must be >= 4, got {width}")


def build_plain_cnn(depth: int, width: int, scale: int, seed: int) -> SRNetwork:
    """A stack of ``depth`` 3x3 conv+PReLU pairs and a pixel-shuffle head."""
    _check_build_args(scale, width)
    if depth < 2:
        raise ConfigError(f"depth must be >= 2, got {depth}")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    c_in = 3
    for i in range(depth):
        c_out = width if i < depth - 1 else 3 * scale * scale
        layers.append(_he_conv(rng, c_in, c_out, 3, 1))
        layers.append(_prelu_layer())
        c_in = c_out
    layers.append(PixelShuffleLayer(upscale=scale, channels_in=c_in))
    return SRNetwork(kind="plain_cnn", scale=scale, layers=layers)


def build_residual_net(blocks: int, width: int, scale: int, seed: int) -> SRNetwork:
    """Head conv, ``blocks`` residual blocks, global skip, conv + pixel-shuffle tail."""
    _check_build_args(scale, width)
    if blocks < 1:
        raise ConfigError(f"blocks must be >= 1, got {blocks}")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [_he_conv(rng, 3, width, 3, 1)]
    for _ in range(blocks):
        layers.append(_he_conv(rng, width, width, 3, 1))
        layers.append(_prelu_layer())
        layers.append(_he_conv(rng, width, width, 3, 1))
    layers.append(_he_conv(rng, width, 3 * scale * scale, 3, 1))
    layers.append(PixelShuffleLayer(upscale=scale, channels_in=3 * scale * scale))
    return SRNetwork(kind="residual_net", scale=scale, layers=layers)


def build_linear_upsampler(scale: int) -> SRNetwork:
    """Bicubic x-scale upsampling as a fixed 5x5 conv plus pixel shuffle.

    Output pixel (scale*i + d) interpolates the input at coordinate
    i + (d + 0.5)/scale - 0.5 (pixel-center convention, matching
    ``dataset.downsample``), which touches at most the five neighbors
    i-2..i+2. Each weight row is normalized to sum to exactly 1, so
    constants pass through unchanged wherever the window stays inside
    the image (the conv zero-pads, dimming the outer two LR pixels).
    """
    if scale not in _UPSAMPLER_SCALES:
        raise ConfigError(f"upsampler scale must be one of {_UPSAMPLER_SCALES}, got {scale}")
    s2 = scale * scale
    kernel = np.zeros((3 * s2, 3, 5, 5), dtype=np.float64)
    offsets = np.arange(-2, 3, dtype=np.float64)
    for dy in range(scale):
        wy = cubic((dy + 0.5) / scale - 0.5 - offsets)
        wy /= wy.sum()
        for dx in range(scale):
            wx = cubic((dx + 0.5) / scale - 0.5 - offsets)
            wx /= wx.sum()
            tap = np.outer(wy, wx)
            for c in range(3):
                kernel[c * s2 + dy * scale + dx, c] = tap
    layers: list[Layer] = [
        ConvLayer(kernel=Tensor(kernel.astype(np.float32)),
                  bias=Tensor(np.zeros(3 * s2, np.float32)), padding=2),
        PixelShuffleLayer(upscale=scale, channels_in=3 * s2),
    ]
    return SRNetwork(kind="linear_upsampler", scale=scale, layers=layers)


# ------------------------------------------------------------------ weight IO

# Layout, all little-endian: magic "LAMW"; u16 version; u8 network kind;
# u8 scale; u16 layer count; per layer u8 op kind + 4 x u16 descriptor
# (c_in, c_out, k, padding; unused slots 0); then every weight tensor in
# layer order as u32 rank, u32 dims, raw float32 payload. No padding.

_MAGIC = b"LAMW"
_FORMAT_VERSION = 1
_KIND_CODES = {"plain_cnn": 1, "residual_net": 2, "linear_upsampler": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_OP_CODES = {"conv": 1, "prelu": 2, "pixel_shuffle": 3}
_OP_NAMES = {v: k for k, v in _OP_CODES.items()}


def serialize_weights(net: SRNetwork) -> bytes:
    blob = bytearray()
    blob += struct.pack("<4sHBBH", _MAGIC, _FORMAT_VERSION, _KIND_CODES[net.kind],
                        net.scale, len(net.layers))
    for layer in net.layers:
        blob += struct.pack("<B4H", _OP_CODES[layer.op], *layer.descriptor())
    for layer in net.layers:
        for _, tensor in layer.tensors():
            arr = tensor.data
            blob += struct.pack("<I", arr.ndim)
            blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
            blob += arr.astype("<f4").tobytes()
    return bytes(blob)


def save_weights(net: SRNetwork, path) -> None:
    Path(path).write_bytes(serialize_weights(net))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(f"file truncated while reading {what}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_weights(path) -> SRNetwork:
    """Reconstruct a network from its weight file.

    Raises BadMagicError, VersionError, TruncatedFileError (naming the
    offending tensor), or ShapeMismatchError. Non-finite weight values
    are not rejected here; ``cli.cmd_verify`` checks for them.
    """
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4, "magic")
    if magic != _MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    (version,) = reader.unpack("<H", "version")
    if version != _FORMAT_VERSION:
        raise VersionError(f"unsupported weight format version {version}")
    kind_code, scale, layer_count = reader.unpack("<BBH", "header")
    kind = _KIND_NAMES.get(kind_code)
    if kind is None:
        raise WeightLoadError(f"unknown network kind code {kind_code}")
    if scale < 1:
        raise WeightLoadError(f"invalid scale {scale}")

    descriptors = []
    for i in range(layer_count):
        op_code, *hyper = reader.unpack("<B4H", f"layer {i} descriptor")
        op = _OP_NAMES.get(op_code)
        if op is None:
            raise WeightLoadError(f"unknown layer op code {op_code} at layer {i}")
        descriptors.append((op, tuple(hyper)))

    def read_tensor(name: str, expected: tuple[int, ...]) -> Tensor:
        (rank,) = reader.unpack("<I", f"{name} rank")
        if rank > 8:
            raise WeightLoadError(f"{name}: implausible tensor rank {rank}")
        dims = reader.unpack(f"<{rank}I", f"{name} dims") if rank else ()
        if tuple(dims) != expected:
            raise ShapeMismatchError(f"{name}: stored shape {tuple(dims)}, expected {expected}")
        count = int(np.prod(dims)) if dims else 1
        payload = reader.take(4 * count, f"{name} data")
        data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        return Tensor(data)

    layers: list[Layer] = []
    for i, (op, hyper) in enumerate(descriptors):
        if op == "conv":
            c_in, c_out, k, padding = hyper
            layers.append(ConvLayer(
                kernel=read_tensor(f"layer{i}.conv.kernel", (c_out, c_in, k, k)),
                bias=read_tensor(f"layer{i}.conv.bias", (c_out,)),
                padding=padding,
            ))
        elif op == "prelu":
            layers.append(PReLULayer(slope=read_tensor(f"layer{i}.prelu.slope", (1,))))
        else:
            c_in, c_out = hyper[0], hyper[1]
            if c_out == 0 or c_in % c_out:
                raise ShapeMismatchError(
                    f"layer{i}.pixel_shuffle: channels {c_in} -> {c_out} invalid")
            s = math.isqrt(c_in // c_out)
            if s * s * c_out != c_in:
                raise ShapeMismatchError(
                    f"layer{i}.pixel_shuffle: {c_in} channels do not split into "
                    f"{c_out} x square factor")
            layers.append(PixelShuffleLayer(upscale=s, channels_in=c_in))
    if reader.pos != len(reader.blob):
        raise WeightLoadError(f"{len(reader.blob) - reader.pos} trailing bytes after weights")
    _validate_structure(kind, scale, layers)
    return SRNetwork(kind=kind, scale=scale, layers=layers)


# ------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 1000
    patch_size: int = 32
    minibatch: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 < beta < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {beta}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.patch_size < 2:
            raise ConfigError(f"patch_size must be >= 2, got {self.patch_size}")
        if self.minibatch < 1:
            raise ConfigError(f"minibatch must be >= 1, got {self.minibatch}")


class Adam:
    """Adam over engine tensors; first/second moments kept in float64."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float,
                 beta1: float, beta2: float, eps: float = 1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, np.float64) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = (p.data.astype(np.float64) - update).astype(np.float32)


def train_tiny(net: SRNetwork, hr_images: Sequence[np.ndarray],
               cfg: TrainConfig) -> list[float]:
    """L1 training on random LR patches cropped from downsampled HR images.

    Updates the network in place and returns the per-iteration loss
    history. Patch sampling and therefore the whole run is deterministic
    in ``cfg.seed``; ``iterations = 0`` leaves the weights untouched.
    """
    if net.kind == "linear_upsampler":
        raise ConfigError("the linear upsampler is a fixed operator and cannot be trained")
    hr_images = [np.asarray(im, dtype=np.float32) for im in hr_images]
    if not hr_images:
        raise DataError("train_tiny needs at least one HR image")
    scale = net.scale
    need = scale * cfg.patch_size
    for i, im in enumerate(hr_images):
        if im.ndim != 3 or im.shape[0] != net.input_channels:
            raise DataError(f"HR image {i} has shape {im.shape}, expected "
                            f"({net.input_channels}, h, w)")
        if im.shape[1] < need or im.shape[2] < need:
            raise DataError(f"HR image {i} is {im.shape[1]}x{im.shape[2]}, "
                            f"smaller than {need}x{need}")
    lr_images = [downsample(im, scale) for im in hr_images]

    params = [tensor for _, tensor in net.weights()]
    history: list[float] = []
    net.set_requires_grad(True)
    try:
        optimizer = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2)
        rng = np.random.default_rng(cfg.seed)
        ps = cfg.patch_size
        for _ in range(cfg.iterations):
            for p in params:
                p.grad = None
            total = 0.0
            for _ in range(cfg.minibatch):
                pick = int(rng.integers(len(lr_images)))
                lr = lr_images[pick]
                r0 = int(rng.integers(lr.shape[1] - ps + 1))
                c0 = int(rng.integers(lr.shape[2] - ps + 1))
                lr_patch = lr[:, r0:r0 + ps, c0:c0 + ps]
                hr_patch = hr_images[pick][:, scale * r0:scale * (r0 + ps),
                                           scale * c0:scale * (c0 + ps)]
                pred = net.forward(Tensor(lr_patch))
                gap = abs(pred - Tensor(hr_patch)).sum()
                loss = gap * (1.0 / (pred.size * cfg.minibatch))
                loss.backward()
                total += loss.item()
            optimizer.step()
            history.append(total)
    finally:
        net.set_requires_grad(False)
    return history


# ------------------------------------------------------------ receptive field


def receptive_field(net: SRNetwork) -> int:
    """Receptive-field side length in LR pixels, composed analytically.

    Each stride-1 conv adds k-1; PReLU and the final pixel shuffle add
    nothing; a residual block grows by the larger of its two branches
    (the conv branch). The result is an exact bound, verifiable by an
    impulse probe.
    """
    for layer in net.layers:
        if layer.op not in ("conv", "prelu", "pixel_shuffle"):
            raise AnalysisError(f"unsupported layer kind {layer.op!r}")
    if net.kind == "residual_net":
        head, blocks, tail_conv, _ = _residual_parts(net.layers)
        side = 1 + _growth(head) + _growth(tail_conv)
        for conv_a, _, conv_b in blocks:
            side += max(_growth(conv_a) + _growth(conv_b), 0)
        return side
    return 1 + sum(_growth(layer) for layer in net.layers)


def _growth(layer: Layer) -> int:
    if layer.op == "conv":
        return layer.kernel.shape[2] - 1
    return 0


def probe_receptive_field(net: SRNetwork, input_size: int, seed: int = 0) -> int:
    """Measured receptive-field side around one LR pixel, on a random input.

    Runs backward from every SR sub-pixel of the centered LR cell and
    takes the union of the nonzero input-gradient supports. Single
    sub-pixels can see narrower windows (bicubic rows have boundary
    zeros), but the cell union is what feeds an attribution patch.
    ``input_size`` must exceed the expected field so nothing clips.
    """
    rng = np.random.default_rng(seed)
    shape = (net.input_channels, input_size, input_size)
    x0 = rng.random(shape, dtype=np.float32)
    center = input_size // 2
    support = np.zeros((input_size, input_size), dtype=bool)
    for dy in range(net.scale):
        for dx in range(net.scale):
            leaf = Tensor(x0, requires_grad=True)
            sr = net.forward(leaf)
            sr[0, net.scale * center + dy, net.scale * center + dx].backward()
            support |= np.abs(leaf.grad).sum(axis=0) > 0
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    if rows.size == 0:
        return 0
    return int(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))
