"""Dense array primitives for the fixed layer set, plus a sequential gradient tape.

Arrays are plain ``numpy.ndarray`` objects in row-major (C) order. Convolutions
are cross-correlations with zero padding, laid out NCHW with kernels OIHW.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} / padding={padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _pad2d(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    # np.pad has a large fixed overhead for the small maps this library works on
    if not ph and not pw:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    # (n, c*kh*kw, oh*ow): the window axes stay innermost, which keeps the copy cheap
    n, c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    xp = _pad2d(x, padding, padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)
    return cols, oh, ow


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[O,C,kh,kw]``."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input channels {x.shape[1]} != kernel in-channels {kernel.shape[1]}")
    o, _, kh, kw = kernel.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = (kernel.reshape(o, -1) @ cols).reshape(x.shape[0], o, oh, ow)
    return check_finite(out, "conv2d output")


def conv2d_adjoint(
    cot: np.ndarray,
    kernel: np.ndarray,
    stride: int,
    padding: int,
    input_shape: tuple[int, ...],
) -> np.ndarray:
    """Apply the transpose of the conv2d linear map to ``cot``.

    ``input_shape`` is the full ``(N, C, H, W)`` shape of the forward input.
    """
    n, c, h, w = input_shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise ShapeError(f"kernel in-channels {ci} != input channels {c}")
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    if cot.shape != (n, o, oh, ow):
        raise ShapeError(f"cotangent shape {cot.shape} != conv output shape {(n, o, oh, ow)}")
    if stride == 1 and padding < min(kh, kw):
        # transpose of a stride-1 correlation is a full correlation with the flipped kernel
        flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        if kh == kw:
            return conv2d(cot, flipped, 1, kh - 1 - padding)
        ph, pw = kh - 1 - padding, kw - 1 - padding
        return conv2d(_pad2d(cot, ph, pw), flipped, 1, 0)
    rows = cot.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
    gcols = (rows @ kernel.reshape(o, -1)).reshape(n, oh, ow, c, kh, kw)
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.result_type(cot, kernel))
    # fixed loop order over taps keeps the accumulation deterministic
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        gp = gp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gp)


def conv2d_kernel_grad(
    x: np.ndarray, cot: np.ndarray, kernel_shape: tuple[int, ...], stride: int, padding: int
) -> np.ndarray:
    """Gradient of ``<cot, conv2d(x, K)>`` with respect to ``K``."""
    o, c, kh, kw = kernel_shape
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    if cot.shape != (x.shape[0], o, oh, ow):
        raise ShapeError(f"cotangent shape {cot.shape} does not match conv output")
    rows = cot.reshape(x.shape[0], o, oh * ow)
    return np.tensordot(rows, cols, axes=([0, 2], [0, 2])).reshape(kernel_shape)


def dense_apply(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return check_finite(out, "dense output")


def _pairs(x: np.ndarray) -> np.ndarray:
    if x.ndim < 2 or x.shape[1] % 2:
        raise ShapeError(f"MinMax needs an even channel count, got shape {x.shape}")
    return x.reshape(x.shape[0], x.shape[1] // 2, 2, *x.shape[2:])


def minmax_apply(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort consecutive channel pairs (2i, 2i+1) into (min, max).

    Returns the output and the boolean swap mask needed by the backward pass.
    Ties keep their original order, so the min output comes from slot 0.
    """
    p = _pairs(x)
    a, b = p[:, :, 0], p[:, :, 1]
    swap = a > b
    out = np.stack([np.where(swap, b, a), np.where(swap, a, b)], axis=2)
    return out.reshape(x.shape), swap


def minmax_backward(cot: np.ndarray, swap: np.ndarray) -> np.ndarray:
    p = _pairs(cot)
    ga, gb = p[:, :, 0], p[:, :, 1]
    out = np.stack([np.where(swap, gb, ga), np.where(swap, ga, gb)], axis=2)
    return out.reshape(cot.shape)


# returns (input cotangent, parameter gradients); the gradients may be a thunk
BackwardFn = Callable[[np.ndarray], "tuple[np.ndarray, dict[str, np.ndarray] | Callable[[], dict]]"]


@dataclass
class TapeRecord:
    op: str
    backward: BackwardFn
    params: tuple[str, ...] = ()


@dataclass
class GradTape:
    """Ordered record of a sequential forward pass.

    Each record maps an output cotangent to the input cotangent and the
    gradients of the parameters it consumed.
    """

    records: list[TapeRecord] = field(default_factory=list)

    def record(self, op: str, backward: BackwardFn, params: tuple[str, ...] = ()) -> None:
        self.records.append(TapeRecord(op, backward, params))

    @property
    def param_names(self) -> list[str]:
        return [p for r in self.records for p in r.params]

    def backward(self, cot: np.ndarray, params: bool = True) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Returns ``(parameter gradients, input cotangent)``.

        ``params=False`` skips parameter gradients (input gradients only).
        """
        grads: dict[str, np.ndarray] = {}
        for rec in reversed(self.records):
            cot, g = rec.backward(cot)
            if not params:
                continue
            if callable(g):
                g = g()
            for k, v in g.items():
                grads[k] = grads[k] + v if k in grads else v
        return grads, cot


def backward(tape: GradTape, cot: np.ndarray, wrt: list[str] | None = None) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse from output cotangent ``cot``.

    For a scalar loss ``L(out)`` pass ``cot = dL/dout``. Asking for a parameter
    that never appeared on the tape is an error.
    """
    grads, _ = tape.backward(cot)
    if wrt is None:
        return grads
    missing = [p for p in wrt if p not in grads]
    if missing:
        raise KeyError(f"parameters not on tape: {missing}")
    return {p: grads[p] for p in wrt}
