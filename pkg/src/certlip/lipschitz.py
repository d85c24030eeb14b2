"""Spectral-norm bounds via power iteration and their composition.

Layers before the head contribute multiplicative factors to ``K_sub``; the
head contributes through the pairwise margin constants
``K[j, i] = ||w_j - w_i|| * K_sub``.

Two modes:

``train``
    a fixed number of iterations warm-started from a persistent vector.
``certify``
    block power iteration from a seeded start until the relative change of
    the estimate drops below ``tol``, then inflate by ``1 + safety``. The
    result is a pure function of the parameters.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import (
    ConvBlock,
    ConventionalResidualBlock,
    DenseHead,
    LinearResidualBlock,
    MinMax,
    Neck,
    Network,
    Stem,
    equivalent_kernel,
    scaled_residual_kernel,
)
from .tensor_core import conv2d, conv2d_adjoint, conv2d_kernel_grad

TRAIN_ITERS = 5
CERTIFY_TOL = 1e-9
CERTIFY_CAP = 10_000
DEFAULT_SAFETY = 1e-6
BLOCK_SIZE = 8


class NonConvergenceError(RuntimeError):
    pass


@dataclass
class PowerState:
    v: np.ndarray
    iterations: int = 0
    residual: float = 0.0


@dataclass
class PowerResult:
    sigma: float
    u: np.ndarray
    v: np.ndarray
    iterations: int
    residual: float


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def init_vector(shape: tuple[int, ...], seed: int, key: str = "") -> np.ndarray:
    rng = np.random.default_rng([seed, *key.encode()])
    return _unit(rng.standard_normal(shape))


def power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    v0: np.ndarray,
    mode: str = "certify",
    iters: int = TRAIN_ITERS,
    tol: float = CERTIFY_TOL,
    cap: int = CERTIFY_CAP,
) -> PowerResult:
    """Single-vector power iteration ``v <- normalize(A^T A v)``.

    ``apply``/``adjoint`` act on a leading batch axis. The estimate
    ``||A v||`` with ``||v|| = 1`` never exceeds the true value and is
    non-decreasing over iterations.
    """
    if mode not in ("train", "certify"):
        raise ValueError(f"mode must be 'train' or 'certify', got {mode!r}")
    v = _unit(v0)
    w = apply(v[None])[0]
    sigma = float(np.linalg.norm(w))
    it = 0
    residual = 0.0
    while sigma > 0.0:
        if mode == "train" and it >= iters:
            break
        if mode == "certify" and it >= cap:
            raise NonConvergenceError(f"power iteration did not reach tol={tol} in {cap} iterations")
        z = adjoint(w[None])[0]
        nz = np.linalg.norm(z)
        if nz == 0.0:
            break
        v = z / nz
        w = apply(v[None])[0]
        s_new = float(np.linalg.norm(w))
        it += 1
        residual = abs(s_new - sigma) / s_new if s_new > 0 else 0.0
        sigma = s_new
        if mode == "certify" and residual < tol:
            break
    u = w / sigma if sigma > 0 else np.zeros_like(w)
    return PowerResult(sigma, u, v, it, residual)


def block_power_iteration(
    apply: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    V0: np.ndarray,
    tol: float = CERTIFY_TOL,
    cap: int = CERTIFY_CAP,
) -> PowerResult:
    """Power iteration on a block of ``p`` vectors with Rayleigh-Ritz extraction.

    ``V0`` has shape ``(p, *input_shape)``. Each sweep applies ``A`` then
    ``A^T`` to the whole block and re-orthonormalizes; the top Ritz value is
    the estimate. Like the single-vector method it approaches the largest
    singular value from below, but clustered top singular values (typical
    for convolutions) no longer stall it.
    """
    p = V0.shape[0]
    shape = V0.shape[1:]
    V, _ = np.linalg.qr(V0.reshape(p, -1).T)
    V = V.T
    sigma = 0.0
    residual = 0.0
    for it in range(1, cap + 1):
        W = apply(V.reshape(p, *shape))
        Wf = W.reshape(p, -1)
        theta, E = np.linalg.eigh(Wf @ Wf.T)
        theta, E = theta[::-1], E[:, ::-1]
        s_new = float(np.sqrt(max(theta[0], 0.0)))
        if s_new == 0.0:
            return PowerResult(0.0, np.zeros(W.shape[1:]), V[0].reshape(shape), it, 0.0)
        residual = abs(s_new - sigma) / s_new
        sigma = s_new
        WE = (E.T @ Wf).reshape(W.shape)
        if residual < tol:
            v = (E.T @ V)[0]
            w = apply(v.reshape(1, *shape))[0]
            sigma = float(np.linalg.norm(w))
            return PowerResult(sigma, w / sigma, v.reshape(shape), it, residual)
        Z = adjoint(WE).reshape(p, -1)
        Q, _ = np.linalg.qr(Z.T)
        V = Q.T
    raise NonConvergenceError(f"block power iteration did not reach tol={tol} in {cap} iterations")


def _dense_ops(weight: np.ndarray):
    return (lambda V: V @ weight.T), (lambda U: U @ weight)


def _conv_ops(kernel: np.ndarray, input_shape: tuple[int, ...], stride: int, padding: int):
    return (
        lambda V: conv2d(V, kernel, stride, padding),
        lambda U: conv2d_adjoint(U, kernel, stride, padding, (U.shape[0], *input_shape)),
    )


def _run(apply, adjoint, shape, mode, state, seed, key, iters, tol, cap, is_zero, block=BLOCK_SIZE):
    if is_zero:
        v = np.zeros(shape)
        return PowerResult(0.0, apply(v[None])[0], v, 0, 0.0)
    if mode == "certify":
        n = int(np.prod(shape))
        p = max(1, min(block, n))
        rng = np.random.default_rng([seed, *key.encode()])
        res = block_power_iteration(apply, adjoint, rng.standard_normal((p, *shape)), tol, cap)
    else:
        if state is not None and state.v.shape == shape:
            v0 = state.v
        else:
            v0 = init_vector(shape, seed, key)
        res = power_iteration(apply, adjoint, v0, mode, iters, tol, cap)
    if state is not None:
        state.v = res.v
        state.iterations += res.iterations
        state.residual = res.residual
    return res


def spectral_norm_dense(
    weight: np.ndarray,
    mode: str = "certify",
    state: PowerState | None = None,
    *,
    safety: float = DEFAULT_SAFETY,
    iters: int = TRAIN_ITERS,
    tol: float = CERTIFY_TOL,
    cap: int = CERTIFY_CAP,
    seed: int = 0,
) -> float:
    apply, adjoint = _dense_ops(weight)
    res = _run(apply, adjoint, (weight.shape[1],), mode, state, seed, "dense", iters, tol, cap, not weight.any())
    return res.sigma * (1.0 + safety) if mode == "certify" else res.sigma


def spectral_norm_conv(
    kernel: np.ndarray,
    input_shape: tuple[int, ...],
    stride: int = 1,
    padding: int = 0,
    mode: str = "certify",
    state: PowerState | None = None,
    *,
    safety: float = DEFAULT_SAFETY,
    iters: int = TRAIN_ITERS,
    tol: float = CERTIFY_TOL,
    cap: int = CERTIFY_CAP,
    seed: int = 0,
) -> float:
    """Operator norm of conv2d(., kernel) on maps of shape ``input_shape`` (C, H, W).

    The value depends on the spatial size because zero padding truncates the
    operator at the borders.
    """
    apply, adjoint = _conv_ops(kernel, tuple(input_shape), stride, padding)
    res = _run(apply, adjoint, tuple(input_shape), mode, state, seed, "conv", iters, tol, cap, not kernel.any())
    return res.sigma * (1.0 + safety) if mode == "certify" else res.sigma


@dataclass
class LayerBound:
    index: int
    name: str
    method: str
    value: float
    residual: float = 0.0
    iterations: int = 0


@dataclass
class LipschitzReport:
    layers: list[LayerBound]
    k_sub: float
    margin: np.ndarray
    mode: str
    safety: float
    param_hash: str = ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "name", "method", "K", "residual", "iterations"])
        for b in self.layers:
            w.writerow([b.index, b.name, b.method, repr(b.value), repr(b.residual), b.iterations])
        return buf.getvalue()


@dataclass
class _Factor:
    """One multiplicative factor of K_sub with its gradient rule."""

    bound: LayerBound
    grad: Callable[[float], dict[str, np.ndarray]] = field(default=lambda d: {})


def margin_lipschitz(head_weight: np.ndarray, k_sub: float) -> np.ndarray:
    """``K[j, i] = ||w_j - w_i||_2 * k_sub`` for the rows ``w`` of the head."""
    if k_sub < 0:
        raise ValueError("k_sub must be non-negative")
    diff = head_weight[:, None, :] - head_weight[None, :, :]
    return np.sqrt(np.einsum("jid,jid->ji", diff, diff)) * k_sub


def margin_lipschitz_backward(
    head_weight: np.ndarray, k_sub: float, d_margin: np.ndarray
) -> tuple[np.ndarray, float]:
    """Gradients of ``sum(d_margin * K)`` w.r.t. the head weight and ``k_sub``."""
    diff = head_weight[:, None, :] - head_weight[None, :, :]
    dist = np.sqrt(np.einsum("jid,jid->ji", diff, diff))
    safe = np.where(dist > 0, dist, 1.0)
    coef = np.where(dist > 0, d_margin / safe, 0.0) * k_sub
    # K[j,i] depends on w_j with +diff and on w_i with -diff
    dW = np.einsum("ji,jid->jd", coef, diff) - np.einsum("ji,jid->id", coef, diff)
    dk = float(np.sum(d_margin * dist))
    return dW, dk


def _conv_factor(idx, name, kernel, in_shape, stride, pad, mode, states, opts, key, method="power-iteration"):
    state = states.get(key) if states is not None else None
    if states is not None and state is None:
        state = states[key] = PowerState(np.zeros(0))
    apply, adjoint = _conv_ops(kernel, in_shape, stride, pad)
    res = _run(apply, adjoint, in_shape, mode, state, opts["seed"], key, opts["iters"], opts["tol"],
               opts["cap"], not kernel.any())
    kg = None
    if res.sigma > 0:
        kg = conv2d_kernel_grad(res.v[None], res.u[None], kernel.shape, stride, pad)
    return res, kg


def _dense_factor(weight, mode, states, opts, key):
    state = states.get(key) if states is not None else None
    if states is not None and state is None:
        state = states[key] = PowerState(np.zeros(0))
    apply, adjoint = _dense_ops(weight)
    res = _run(apply, adjoint, (weight.shape[1],), mode, state, opts["seed"], key, opts["iters"], opts["tol"],
               opts["cap"], not weight.any())
    g = np.outer(res.u, res.v) if res.sigma > 0 else np.zeros_like(weight)
    return res, g


def layer_factors(
    net: Network,
    mode: str = "certify",
    states: dict[str, PowerState] | None = None,
    *,
    safety: float = DEFAULT_SAFETY,
    iters: int = TRAIN_ITERS,
    tol: float = CERTIFY_TOL,
    cap: int = CERTIFY_CAP,
    seed: int = 0,
    params: dict[str, np.ndarray] | None = None,
) -> list[_Factor]:
    """Per-operator Lipschitz factors for every layer strictly before the head."""
    p = net.params if params is None else params
    infl = (1.0 + safety) if mode == "certify" else 1.0
    opts = dict(iters=iters, tol=tol, cap=cap, seed=seed)
    out: list[_Factor] = []
    for i, layer in enumerate(net.spec.layers):
        shape = net.shapes[i]
        if isinstance(layer, DenseHead):
            break
        if isinstance(layer, MinMax):
            out.append(_Factor(LayerBound(i, "minmax", "activation-1", 1.0)))
        elif isinstance(layer, (Stem, ConvBlock)):
            W = p[f"{i}.W"]
            res, kg = _conv_factor(i, "conv", W, shape, layer.stride, layer.padding, mode, states, opts, f"{i}")
            name = "stem" if isinstance(layer, Stem) else "conv_block"
            out.append(_Factor(
                LayerBound(i, name, "power-iteration" if res.sigma > 0 else "exact-spectral",
                           res.sigma * infl, res.residual, res.iterations),
                (lambda d, kg=kg, i=i: {f"{i}.W": d * infl * kg} if kg is not None else {}),
            ))
        elif isinstance(layer, LinearResidualBlock):
            W, beta = p[f"{i}.W"], p[f"{i}.beta"]
            keq = equivalent_kernel(layer, W, beta)
            pad = layer.kernel_size // 2
            res, kg = _conv_factor(i, "block", keq, shape, 1, pad, mode, states, opts, f"{i}")
            s = layer.depth_scale

            def g(d, kg=kg, i=i, W=W, beta=beta, s=s):
                if kg is None:
                    return {}
                d = d * infl
                return {
                    f"{i}.W": d * s * beta[:, None, None, None] * kg,
                    f"{i}.beta": d * s * np.einsum("oikl,oikl->o", W, kg),
                }

            out.append(_Factor(
                LayerBound(i, "linear_residual", "power-iteration", res.sigma * infl, res.residual, res.iterations),
                g,
            ))
        elif isinstance(layer, ConventionalResidualBlock):
            W1, W2, beta = p[f"{i}.W1"], p[f"{i}.W2"], p[f"{i}.beta"]
            pad = layer.kernel_size // 2
            k2 = beta[:, None, None, None] * W2
            r1, g1 = _conv_factor(i, "w1", W1, shape, 1, pad, mode, states, opts, f"{i}.W1")
            r2, g2 = _conv_factor(i, "w2", k2, shape, 1, pad, mode, states, opts, f"{i}.W2")
            s1, s2 = r1.sigma * infl, r2.sigma * infl

            def g(d, g1=g1, g2=g2, s1=s1, s2=s2, i=i, W2=W2, beta=beta):
                grads = {}
                if g1 is not None:
                    grads[f"{i}.W1"] = d * s2 * infl * g1
                if g2 is not None:
                    d2 = d * s1 * infl
                    grads[f"{i}.W2"] = d2 * beta[:, None, None, None] * g2
                    grads[f"{i}.beta"] = d2 * np.einsum("oikl,oikl->o", W2, g2)
                return grads

            out.append(_Factor(
                LayerBound(i, "conventional_residual", "loose-residual-sum", 1.0 + s1 * s2,
                           max(r1.residual, r2.residual), r1.iterations + r2.iterations),
                g,
            ))
        elif isinstance(layer, Neck):
            Wc, Wd = p[f"{i}.conv"], p[f"{i}.dense"]
            rc, gc = _conv_factor(i, "neck.conv", Wc, shape, layer.stride, 0, mode, states, opts, f"{i}.conv")
            out.append(_Factor(
                LayerBound(i, "neck.conv", "power-iteration", rc.sigma * infl, rc.residual, rc.iterations),
                (lambda d, gc=gc, i=i: {f"{i}.conv": d * infl * gc} if gc is not None else {}),
            ))
            out.append(_Factor(LayerBound(i, "neck.minmax", "activation-1", 1.0)))
            rd, gd = _dense_factor(Wd, mode, states, opts, f"{i}.dense")
            out.append(_Factor(
                LayerBound(i, "neck.dense", "power-iteration", rd.sigma * infl, rd.residual, rd.iterations),
                (lambda d, gd=gd, i=i: {f"{i}.dense": d * infl * gd}),
            ))
        else:
            raise TypeError(f"unsupported layer type {type(layer).__name__}")
    return out


def layer_lipschitz(net: Network, index: int, mode: str = "certify", **kw) -> tuple[float, str]:
    """Bound and method tag of one layer (product over its operators)."""
    facs = [f for f in layer_factors(net, mode, **kw) if f.bound.index == index]
    if not facs:
        raise IndexError(f"layer {index} is the head or out of range")
    val = float(np.prod([f.bound.value for f in facs]))
    methods = {f.bound.method for f in facs} - {"activation-1"}
    return val, (methods.pop() if len(methods) == 1 else "activation-1" if not methods else "power-iteration")


def _product_grad(values: list[float], d: float) -> list[float]:
    # d/dK_l of prod(K) without dividing by K_l (some factors may be 0)
    n = len(values)
    left = [1.0] * (n + 1)
    right = [1.0] * (n + 1)
    for k in range(n):
        left[k + 1] = left[k] * values[k]
        right[n - k - 1] = right[n - k] * values[n - k - 1]
    return [d * left[k] * right[k + 1] for k in range(n)]


def compose_sublipschitz(net: Network, mode: str = "certify", states=None, **kw):
    """Return ``(K_sub, factors)``; ``K_sub`` is the product over pre-head factors."""
    factors = layer_factors(net, mode, states, **kw)
    k = 1.0
    for f in factors:
        k *= f.bound.value
    return k, factors


def lipschitz_report(
    net: Network,
    mode: str = "certify",
    states: dict[str, PowerState] | None = None,
    *,
    safety: float = DEFAULT_SAFETY,
    with_grad: bool = False,
    k_scale: float = 1.0,
    **kw,
):
    """Full bound report: per-layer factors, ``K_sub`` and the margin matrix.

    With ``with_grad=True`` also returns a function mapping ``dL/dK`` (the
    margin matrix cotangent) to parameter gradients, using the spectral-norm
    subgradient ``u v^T`` with ``u, v`` held fixed.

    ``k_scale`` multiplies ``K_sub``; it exists only for fault-injection tests.
    """
    params = kw.get("params")
    k_sub, factors = compose_sublipschitz(net, mode, states, safety=safety, **kw)
    k_sub *= k_scale
    W = (net.params if params is None else params)[f"{net.head_index}.W"]
    margin = margin_lipschitz(W, k_sub)
    report = LipschitzReport(
        [f.bound for f in factors], k_sub, margin, mode, safety if mode == "certify" else 0.0,
        net.param_hash() if params is None else "",
    )
    if not with_grad:
        return report

    def grad(d_margin: np.ndarray) -> dict[str, np.ndarray]:
        dW, dk = margin_lipschitz_backward(W, k_sub, d_margin)
        grads: dict[str, np.ndarray] = {f"{net.head_index}.W": dW}
        dvals = _product_grad([f.bound.value for f in factors], dk * k_scale)
        for f, dv in zip(factors, dvals):
            for name, g in f.grad(dv).items():
                grads[name] = grads[name] + g if name in grads else g
        return grads

    return report, grad


def naive_residual_bound(block: LinearResidualBlock, W: np.ndarray, beta: np.ndarray,
                         input_shape: tuple[int, ...], **kw) -> float:
    """``1 + sigma(s * beta * W)``: the triangle-inequality bound on a linear residual block."""
    pad = block.kernel_size // 2
    return 1.0 + spectral_norm_conv(scaled_residual_kernel(block, W, beta), input_shape, 1, pad, **kw)


@dataclass
class LinearOperatorSpec:
    """A pre-head linear map in kernel/matrix form, for oracle comparisons."""

    index: int
    name: str
    kind: str  # conv | dense
    weight: np.ndarray
    input_shape: tuple[int, ...]
    stride: int = 1
    padding: int = 0


def layer_operators(net: Network) -> list[LinearOperatorSpec]:
    """Every linear operator bounded by :func:`layer_factors`, in the same order."""
    p = net.params
    ops: list[LinearOperatorSpec] = []
    for i, layer in enumerate(net.spec.layers):
        shape = net.shapes[i]
        if isinstance(layer, (Stem, ConvBlock)):
            name = "stem" if isinstance(layer, Stem) else "conv_block"
            ops.append(LinearOperatorSpec(i, name, "conv", p[f"{i}.W"], shape, layer.stride, layer.padding))
        elif isinstance(layer, LinearResidualBlock):
            keq = equivalent_kernel(layer, p[f"{i}.W"], p[f"{i}.beta"])
            ops.append(LinearOperatorSpec(i, "linear_residual", "conv", keq, shape, 1, layer.kernel_size // 2))
        elif isinstance(layer, ConventionalResidualBlock):
            pad = layer.kernel_size // 2
            ops.append(LinearOperatorSpec(i, "conventional_residual.W1", "conv", p[f"{i}.W1"], shape, 1, pad))
            k2 = p[f"{i}.beta"][:, None, None, None] * p[f"{i}.W2"]
            ops.append(LinearOperatorSpec(i, "conventional_residual.W2", "conv", k2, shape, 1, pad))
        elif isinstance(layer, Neck):
            ops.append(LinearOperatorSpec(i, "neck.conv", "conv", p[f"{i}.conv"], shape, layer.stride, 0))
            ops.append(LinearOperatorSpec(i, "neck.dense", "dense", p[f"{i}.dense"], (p[f"{i}.dense"].shape[1],)))
        elif isinstance(layer, DenseHead):
            break
    return ops
