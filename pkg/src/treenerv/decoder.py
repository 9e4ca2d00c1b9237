"""Cascaded pixel-shuffle decoder: one E-NeRV block followed by standard NeRV blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, conv2d, gelu, permute, pixel_shuffle, sigmoid

__all__ = ["DecoderConfig", "NervBlock", "Decoder", "param_count", "enerv_bottleneck"]


def enerv_bottleneck(d: int, o: int) -> int:
    return max(1, min(d, o) // 4)


@dataclass
class DecoderConfig:
    input_shape: tuple = (4, 8, 16)
    strides: tuple = (2, 2, 2)
    channel_schedule: tuple = (32, 16, 8)
    min_channels: int = 8
    output_channels: int = 3
    frame_size: Optional[tuple] = None

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.strides = tuple(int(s) for s in self.strides)
        self.channel_schedule = tuple(int(c) for c in self.channel_schedule)
        if self.frame_size is not None:
            self.frame_size = tuple(int(v) for v in self.frame_size)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (h, w, d) with positive extents, got {self.input_shape}")
        if not self.strides or min(self.strides) < 1:
            raise ValueError(f"strides must be a non-empty list of factors >= 1, got {self.strides}")
        if not self.channel_schedule or min(self.channel_schedule) < 1:
            raise ValueError(f"channel_schedule must hold positive channel counts, got {self.channel_schedule}")
        if self.min_channels < 1:
            raise ValueError("min_channels must be >= 1")
        if self.output_channels not in (1, 3):
            raise ValueError(f"output_channels must be 1 or 3, got {self.output_channels}")
        if self.frame_size is not None and self.frame_size != self.output_size:
            raise ValueError(
                f"input {self.input_shape[:2]} upscaled by {self.strides} gives {self.output_size}, "
                f"not the target frame size {self.frame_size}"
            )

    @property
    def upscale(self) -> int:
        return math.prod(self.strides)

    @property
    def output_size(self) -> tuple:
        h, w, _ = self.input_shape
        return h * self.upscale, w * self.upscale

    @property
    def block_channels(self) -> tuple:
        """Per-block output channels; a short schedule is continued by halving."""
        chans = list(self.channel_schedule[: len(self.strides)])
        while len(chans) < len(self.strides):
            chans.append(chans[-1] // 2)
        return tuple(max(self.min_channels, c) for c in chans)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(**d)


def _kaiming_uniform(rng: np.random.Generator, c_out: int, c_in: int, k: int):
    fan_in = c_in * k * k
    w = rng.uniform(-math.sqrt(6.0 / fan_in), math.sqrt(6.0 / fan_in), size=(c_out, c_in, k, k))
    b = rng.uniform(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), size=(c_out,))
    return w, b


@dataclass
class NervBlock:
    kind: str
    in_channels: int
    out_channels: int
    stride: int
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    bottleneck: Optional[int] = None

    @classmethod
    def create(cls, kind: str, d: int, o: int, s: int, rng: np.random.Generator, dtype=np.float32) -> "NervBlock":
        block = cls(kind, d, o, s)
        if kind == "standard":
            shapes = [(o * s * s, d)]
        elif kind == "enerv":
            dp = enerv_bottleneck(d, o)
            block.bottleneck = dp
            shapes = [(dp * s * s, d), (o, dp)]
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        for c_out, c_in in shapes:
            w, b = _kaiming_uniform(rng, c_out, c_in, 3)
            block.weights.append(Tensor(w, requires_grad=True, dtype=dtype))
            block.biases.append(Tensor(b, requires_grad=True, dtype=dtype))
        return block

    def forward(self, x: Tensor) -> Tensor:
        y = pixel_shuffle(conv2d(x, self.weights[0], self.biases[0]), self.stride)
        y = gelu(y)
        if self.kind == "enerv":
            y = gelu(conv2d(y, self.weights[1], self.biases[1]))
        return y

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


class Decoder:
    """Maps an ``h x w x d`` time embedding to a ``C x H x W`` frame in (0, 1)."""

    def __init__(self, config: DecoderConfig, blocks: list, head_weight: Tensor, head_bias: Tensor):
        self.config = config
        self.blocks = blocks
        self.head_weight = head_weight
        self.head_bias = head_bias

    @classmethod
    def build(cls, config: DecoderConfig, seed: int = 0, dtype=np.float32) -> "Decoder":
        rng = np.random.default_rng(seed)
        d = config.input_shape[2]
        blocks = []
        for i, (s, o) in enumerate(zip(config.strides, config.block_channels)):
            blocks.append(NervBlock.create("enerv" if i == 0 else "standard", d, o, s, rng, dtype))
            d = o
        hw, hb = _kaiming_uniform(rng, config.output_channels, d, 1)
        return cls(config, blocks, Tensor(hw, True, dtype), Tensor(hb, True, dtype))

    def forward(self, embedding: Tensor) -> Tensor:
        if tuple(embedding.shape) != self.config.input_shape:
            raise ShapeError(f"embedding shape {tuple(embedding.shape)} != decoder input {self.config.input_shape}")
        x = permute(embedding, (2, 0, 1))
        for block in self.blocks:
            x = block.forward(x)
        return sigmoid(conv2d(x, self.head_weight, self.head_bias))

    __call__ = forward

    def named_parameters(self) -> list:
        out = []
        for i, block in enumerate(self.blocks):
            for j, (w, b) in enumerate(zip(block.weights, block.biases)):
                out.append((f"block{i}.conv{j}.weight", w))
                out.append((f"block{i}.conv{j}.bias", b))
        out.append(("head.weight", self.head_weight))
        out.append(("head.bias", self.head_bias))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def weight_tensors(self) -> list:
        """Convolution kernels only (biases excluded)."""
        return [p for name, p in self.named_parameters() if name.endswith("weight")]

    def astype(self, dtype) -> "Decoder":
        blocks = []
        for b in self.blocks:
            nb = NervBlock(b.kind, b.in_channels, b.out_channels, b.stride, bottleneck=b.bottleneck)
            nb.weights = [w.astype(dtype) for w in b.weights]
            nb.biases = [x.astype(dtype) for x in b.biases]
            blocks.append(nb)
        return Decoder(self.config, blocks, self.head_weight.astype(dtype), self.head_bias.astype(dtype))

    def copy(self) -> "Decoder":
        return self.astype(self.head_weight.data.dtype)


def param_count(obj) -> tuple[int, int]:
    """``(weights, weights + biases)`` from the layer-shape formulas.

    standard: 9*d*O*S^2; enerv: 9*d*d'*S^2 + 9*d'*O; the decoder total adds
    the 1x1 output head.
    """
    if isinstance(obj, NervBlock):
        d, o, s = obj.in_channels, obj.out_channels, obj.stride
        if obj.kind == "standard":
            return 9 * d * o * s * s, 9 * d * o * s * s + o * s * s
        dp = obj.bottleneck
        weights = 9 * dp * (d * s * s + o)
        return weights, weights + dp * s * s + o
    if isinstance(obj, Decoder):
        w_total = b_total = 0
        for block in obj.blocks:
            w, wb = param_count(block)
            w_total += w
            b_total += wb
        c_out = obj.config.output_channels
        c_in = obj.config.block_channels[-1]
        return w_total + c_in * c_out, b_total + c_in * c_out + c_out
    raise TypeError(f"param_count does not handle {type(obj).__name__}")
