"""Layer specifications, parameter initialization and forward evaluation.

Three families are built from the same stem / backbone / neck / head recipe:

* ``liresnet``: backbone blocks are linear residual blocks ``x + s * beta * Conv(x)``
* ``resnet``:   conventional blocks ``x + beta * Conv(MinMax(Conv(x)))``
* ``convnet``:  plain ``Conv(x)`` blocks

Every backbone block is followed by a MinMax activation.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Union

import numpy as np

from .tensor_core import (
    GradTape,
    ShapeError,
    check_finite,
    conv2d,
    conv2d_adjoint,
    conv2d_kernel_grad,
    conv_output_hw,
    dense_apply,
    minmax_apply,
    minmax_backward,
)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Stem:
    out_channels: int
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class ConvBlock:
    channels: int
    kernel: int
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class LinearResidualBlock:
    channels: int
    kernel_size: int
    depth_scale: float
    beta_per_channel: bool = True


@dataclass(frozen=True)
class ConventionalResidualBlock:
    channels: int
    kernel_size: int
    beta_per_channel: bool = True


@dataclass(frozen=True)
class MinMax:
    pass


@dataclass(frozen=True)
class Neck:
    out_channels: int
    kernel: int
    stride: int
    out_dim: int


@dataclass(frozen=True)
class DenseHead:
    num_classes: int


LayerSpec = Union[Stem, ConvBlock, LinearResidualBlock, ConventionalResidualBlock, MinMax, Neck, DenseHead]

_LAYER_TYPES = {
    "stem": Stem,
    "conv_block": ConvBlock,
    "linear_residual": LinearResidualBlock,
    "conventional_residual": ConventionalResidualBlock,
    "minmax": MinMax,
    "neck": Neck,
    "dense_head": DenseHead,
}
_TYPE_NAMES = {v: k for k, v in _LAYER_TYPES.items()}


@dataclass(frozen=True)
class NetworkSpec:
    family: str
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    @property
    def num_blocks(self) -> int:
        return sum(
            isinstance(l, (LinearResidualBlock, ConventionalResidualBlock, ConvBlock)) for l in self.layers
        )

    @property
    def num_classes(self) -> int:
        return self.layers[-1].num_classes

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["network"] = {
            "family": self.family,
            "input_shape": ",".join(str(s) for s in self.input_shape),
            "num_layers": str(len(self.layers)),
        }
        for i, layer in enumerate(self.layers):
            sec = {"type": _TYPE_NAMES[type(layer)]}
            sec.update({k: repr(v) for k, v in asdict(layer).items()})
            cp[f"layer.{i}"] = sec
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
            net = cp["network"]
            family = net["family"]
            input_shape = tuple(int(s) for s in net["input_shape"].split(","))
            layers = []
            for i in range(int(net["num_layers"])):
                sec = dict(cp[f"layer.{i}"])
                kind = _LAYER_TYPES[sec.pop("type")]
                kwargs = {}
                for f in fields(kind):
                    if f.name in sec:
                        raw = sec.pop(f.name)
                        kwargs[f.name] = raw == "True" if raw in ("True", "False") else (
                            float(raw) if "." in raw or "e" in raw else int(raw)
                        )
                if sec:
                    raise SpecError(f"unknown keys in layer.{i}: {sorted(sec)}")
                layers.append(kind(**kwargs))
        except (KeyError, ValueError, configparser.Error) as exc:
            raise SpecError(f"malformed network spec: {exc}") from exc
        return cls(family, input_shape, tuple(layers))


def liresnet_spec(
    input_shape: tuple[int, ...],
    num_classes: int,
    width: int = 16,
    depth: int = 4,
    family: str = "liresnet",
    stem_kernel: int = 3,
    stem_stride: int = 1,
    stem_padding: int = 1,
    block_kernel: int = 3,
    neck_kernel: int = 1,
    neck_stride: int = 1,
    neck_dim: int = 32,
) -> NetworkSpec:
    """Stem -> (block -> MinMax) x depth -> neck -> dense head.

    For 32x32 images the usual stem is kernel 5, stride 2, padding 2 and the
    neck kernel 4, stride 4.
    """
    if family == "liresnet":
        block = LinearResidualBlock(width, block_kernel, 1.0 / math.sqrt(depth))
    elif family == "resnet":
        block = ConventionalResidualBlock(width, block_kernel)
    elif family == "convnet":
        block = ConvBlock(width, block_kernel, 1, block_kernel // 2)
    else:
        raise SpecError(f"unknown family {family!r}")
    layers: list[LayerSpec] = [Stem(width, stem_kernel, stem_stride, stem_padding), MinMax()]
    for _ in range(depth):
        layers += [block, MinMax()]
    layers += [Neck(2 * width, neck_kernel, neck_stride, neck_dim), DenseHead(num_classes)]
    return NetworkSpec(family, tuple(input_shape), tuple(layers))


def _layer_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-layer input shapes (without batch axis), plus the final output shape."""
    shape = tuple(spec.input_shape)
    shapes = [shape]
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, DenseHead):
            if i != len(spec.layers) - 1:
                raise SpecError("DenseHead must be the last layer")
            shape = (layer.num_classes,)
        elif isinstance(layer, MinMax):
            if shape[0] % 2:
                raise SpecError(f"MinMax at layer {i} sees odd channel count {shape[0]}")
        elif isinstance(layer, Stem):
            if len(shape) != 3:
                raise SpecError("Stem needs a (C, H, W) input")
            try:
                oh, ow = conv_output_hw(shape[1], shape[2], layer.kernel, layer.kernel, layer.stride, layer.padding)
            except ShapeError as exc:
                raise SpecError(str(exc)) from exc
            shape = (layer.out_channels, oh, ow)
        elif isinstance(layer, (LinearResidualBlock, ConventionalResidualBlock)):
            if len(shape) != 3 or shape[0] != layer.channels:
                raise SpecError(f"residual block at layer {i} expects {layer.channels} channels, got {shape}")
            if layer.kernel_size % 2 != 1:
                raise SpecError("residual block kernel size must be odd")
        elif isinstance(layer, ConvBlock):
            if len(shape) != 3 or shape[0] != layer.channels:
                raise SpecError(f"conv block at layer {i} expects {layer.channels} channels, got {shape}")
            oh, ow = conv_output_hw(shape[1], shape[2], layer.kernel, layer.kernel, layer.stride, layer.padding)
            shape = (layer.channels, oh, ow)
        elif isinstance(layer, Neck):
            if len(shape) != 3:
                raise SpecError("Neck needs a (C, H, W) input")
            if layer.out_channels % 2:
                raise SpecError("Neck conv width must be even (MinMax follows it)")
            oh, ow = conv_output_hw(shape[1], shape[2], layer.kernel, layer.kernel, layer.stride, 0)
            shape = (layer.out_dim,)
        else:
            raise SpecError(f"unsupported layer {layer!r}")
        shapes.append(shape)
    if not spec.layers or not isinstance(spec.layers[-1], DenseHead):
        raise SpecError("network must end in a DenseHead")
    return shapes


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        if not self.shapes:
            self.shapes = _layer_shapes(self.spec)

    @property
    def head_index(self) -> int:
        return len(self.spec.layers) - 1

    @property
    def head_weight(self) -> np.ndarray:
        return self.params[f"{self.head_index}.W"]

    def copy(self) -> "Network":
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()}, list(self.shapes))

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            v = np.ascontiguousarray(self.params[k])
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(str(v.shape).encode())
            h.update(v.tobytes())
        return h.hexdigest()


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    shapes = _layer_shapes(spec)
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for i, layer in enumerate(spec.layers):
        c_in = shapes[i][0]
        if isinstance(layer, Stem):
            params[f"{i}.W"] = _kaiming(rng, (layer.out_channels, c_in, layer.kernel, layer.kernel))
        elif isinstance(layer, ConvBlock):
            params[f"{i}.W"] = _kaiming(rng, (layer.channels, c_in, layer.kernel, layer.kernel))
        elif isinstance(layer, LinearResidualBlock):
            k = layer.kernel_size
            params[f"{i}.W"] = _kaiming(rng, (layer.channels, layer.channels, k, k))
            params[f"{i}.beta"] = np.ones(layer.channels)
        elif isinstance(layer, ConventionalResidualBlock):
            k = layer.kernel_size
            params[f"{i}.W1"] = _kaiming(rng, (layer.channels, layer.channels, k, k))
            params[f"{i}.W2"] = _kaiming(rng, (layer.channels, layer.channels, k, k))
            params[f"{i}.beta"] = np.zeros(layer.channels)
        elif isinstance(layer, Neck):
            params[f"{i}.conv"] = _kaiming(rng, (layer.out_channels, c_in, layer.kernel, layer.kernel))
            oh, ow = conv_output_hw(shapes[i][1], shapes[i][2], layer.kernel, layer.kernel, layer.stride, 0)
            flat = layer.out_channels * oh * ow
            params[f"{i}.dense"] = _kaiming(rng, (layer.out_dim, flat))
            params[f"{i}.bias"] = np.zeros(layer.out_dim)
        elif isinstance(layer, DenseHead):
            d = int(np.prod(shapes[i]))
            params[f"{i}.W"] = _kaiming(rng, (layer.num_classes, d))
            params[f"{i}.b"] = np.zeros(layer.num_classes)
    return Network(spec, params, shapes)


def scaled_residual_kernel(block: LinearResidualBlock, W: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """The residual branch ``depth_scale * beta * W`` as a single kernel."""
    return block.depth_scale * beta[:, None, None, None] * W


def delta_kernel(channels: int, kernel_size: int) -> np.ndarray:
    k0 = kernel_size // 2
    d = np.zeros((channels, channels, kernel_size, kernel_size))
    d[np.arange(channels), np.arange(channels), k0, k0] = 1.0
    return d


def equivalent_kernel(block: LinearResidualBlock, W: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Single convolution kernel reproducing ``x + s * beta * Conv_W(x)``.

    The identity path is the center-tap kernel with ones on the channel
    diagonal; stride 1 and padding ``kernel_size // 2`` are implied.
    """
    o, c, kh, kw = W.shape
    if o != c or o != block.channels:
        raise SpecError(f"residual add needs square channel map, got kernel {W.shape}")
    if kh != kw or kh % 2 != 1:
        raise SpecError(f"equivalent kernel needs a square odd kernel, got {kh}x{kw}")
    return scaled_residual_kernel(block, W, beta) + delta_kernel(o, kh)


def forward(
    net: Network,
    x: np.ndarray,
    record: bool = False,
    params: dict[str, np.ndarray] | None = None,
    stop: int | None = None,
):
    """Evaluate the network on a batch.

    ``stop`` truncates evaluation before layer ``stop`` (``stop=net.head_index``
    gives the penultimate features). With ``record=True`` also returns the tape.
    """
    p = net.params if params is None else params
    if tuple(x.shape[1:]) != tuple(net.spec.input_shape):
        raise ShapeError(f"batch shape {x.shape[1:]} != network input shape {net.spec.input_shape}")
    check_finite(x, "network input")
    tape = GradTape() if record else None
    layers = net.spec.layers if stop is None else net.spec.layers[:stop]
    h = x
    for i, layer in enumerate(layers):
        h = _apply_layer(i, layer, p, h, tape)
    return (h, tape) if record else h


def _apply_layer(i: int, layer: LayerSpec, p: dict[str, np.ndarray], x: np.ndarray, tape: GradTape | None):
    if isinstance(layer, MinMax):
        out, swap = minmax_apply(x)
        if tape is not None:
            tape.record("minmax", lambda g: (minmax_backward(g, swap), {}))
        return out

    if isinstance(layer, (Stem, ConvBlock)):
        W = p[f"{i}.W"]
        stride = layer.stride
        pad = layer.padding
        out = conv2d(x, W, stride, pad)
        if tape is not None:
            tape.record(
                "conv",
                lambda g: (
                    conv2d_adjoint(g, W, stride, pad, x.shape),
                    lambda: {f"{i}.W": conv2d_kernel_grad(x, g, W.shape, stride, pad)},
                ),
                (f"{i}.W",),
            )
        return out

    if isinstance(layer, LinearResidualBlock):
        W, beta = p[f"{i}.W"], p[f"{i}.beta"]
        s = layer.depth_scale
        pad = layer.kernel_size // 2
        c = conv2d(x, W, 1, pad)
        out = x + s * beta[None, :, None, None] * c
        if tape is not None:
            def back(g):
                gb = s * beta[None, :, None, None] * g
                return (
                    g + conv2d_adjoint(gb, W, 1, pad, x.shape),
                    lambda: {
                        f"{i}.W": conv2d_kernel_grad(x, gb, W.shape, 1, pad),
                        f"{i}.beta": s * np.einsum("nchw,nchw->c", g, c),
                    },
                )
            tape.record("linear_residual", back, (f"{i}.W", f"{i}.beta"))
        return check_finite(out, f"layer {i}")

    if isinstance(layer, ConventionalResidualBlock):
        W1, W2, beta = p[f"{i}.W1"], p[f"{i}.W2"], p[f"{i}.beta"]
        pad = layer.kernel_size // 2
        a = conv2d(x, W1, 1, pad)
        m, swap = minmax_apply(a)
        c = conv2d(m, W2, 1, pad)
        out = x + beta[None, :, None, None] * c
        if tape is not None:
            def back(g):
                gc = beta[None, :, None, None] * g
                gm = conv2d_adjoint(gc, W2, 1, pad, m.shape)
                ga = minmax_backward(gm, swap)
                return (
                    g + conv2d_adjoint(ga, W1, 1, pad, x.shape),
                    lambda: {
                        f"{i}.W1": conv2d_kernel_grad(x, ga, W1.shape, 1, pad),
                        f"{i}.W2": conv2d_kernel_grad(m, gc, W2.shape, 1, pad),
                        f"{i}.beta": np.einsum("nchw,nchw->c", g, c),
                    },
                )
            tape.record("conventional_residual", back, (f"{i}.W1", f"{i}.W2", f"{i}.beta"))
        return check_finite(out, f"layer {i}")

    if isinstance(layer, Neck):
        Wc, Wd, b = p[f"{i}.conv"], p[f"{i}.dense"], p[f"{i}.bias"]
        a = conv2d(x, Wc, layer.stride, 0)
        m, swap = minmax_apply(a)
        flat = m.reshape(m.shape[0], -1)
        out = dense_apply(flat, Wd, b)
        if tape is not None:
            def back(g):
                gflat = g @ Wd
                ga = minmax_backward(gflat.reshape(m.shape), swap)
                return (
                    conv2d_adjoint(ga, Wc, layer.stride, 0, x.shape),
                    lambda: {
                        f"{i}.conv": conv2d_kernel_grad(x, ga, Wc.shape, layer.stride, 0),
                        f"{i}.dense": g.T @ flat,
                        f"{i}.bias": g.sum(axis=0),
                    },
                )
            tape.record("neck", back, (f"{i}.conv", f"{i}.dense", f"{i}.bias"))
        return out

    if isinstance(layer, DenseHead):
        W, b = p[f"{i}.W"], p[f"{i}.b"]
        flat = x.reshape(x.shape[0], -1)
        out = dense_apply(flat, W, b)
        if tape is not None:
            tape.record(
                "dense_head",
                lambda g: ((g @ W).reshape(x.shape), lambda: {f"{i}.W": g.T @ flat, f"{i}.b": g.sum(axis=0)}),
                (f"{i}.W", f"{i}.b"),
            )
        return out

    raise SpecError(f"unsupported layer {layer!r}")
