"""Independent ground truth for bounds, gradients and certificates.

Nothing here shares code paths with the power-iteration bounds beyond the
``conv2d`` forward itself: operators are materialized as dense matrices,
norms come from LAPACK / ARPACK, and certificates are probed with PGD.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from .gloro import certify_logits, top_class
from .lipschitz import LipschitzReport
from .network import Network, forward
from .tensor_core import conv2d

MAX_MATERIALIZE = 16_384


class SizeGuardError(ValueError):
    pass


@dataclass
class MaterializedOperator:
    matrix: np.ndarray
    kernel: np.ndarray
    input_shape: tuple[int, ...]
    stride: int
    padding: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x.reshape(-1)


def materialize_conv_operator(kernel, input_shape, stride: int = 1, padding: int = 0) -> MaterializedOperator:
    """Dense matrix whose column ``j`` is ``conv2d`` of the ``j``-th basis map."""
    input_shape = tuple(input_shape)
    n = int(np.prod(input_shape))
    if n > MAX_MATERIALIZE:
        raise SizeGuardError(f"input dimension {n} exceeds materialization guard {MAX_MATERIALIZE}")
    basis = np.eye(n).reshape(n, *input_shape)
    cols = conv2d(basis, kernel, stride, padding).reshape(n, -1)
    return MaterializedOperator(np.ascontiguousarray(cols.T), kernel, input_shape, stride, padding)


def exact_spectral_norm(M: np.ndarray, method: str = "auto") -> float:
    """Largest singular value of a dense matrix.

    ``svd`` uses a full decomposition, ``eig`` runs Lanczos on ``M^T M``;
    ``auto`` picks ``svd`` up to 512 columns.
    """
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError("non-finite matrix")
    if not M.any():
        return 0.0
    if method == "auto":
        method = "svd" if min(M.shape) <= 512 else "eig"
    if method == "svd":
        return float(np.linalg.svd(M, compute_uv=False)[0])
    if method == "eig":
        n = M.shape[1]
        if n <= 2:
            return float(np.sqrt(np.linalg.eigvalsh(M.T @ M)[-1]))
        op = spla.LinearOperator((n, n), matvec=lambda v: M.T @ (M @ v), dtype=np.float64)
        v0 = np.random.default_rng(0).standard_normal(n)
        lam = spla.eigsh(op, k=1, which="LA", tol=1e-14, v0=v0, return_eigenvectors=False)[0]
        return float(np.sqrt(lam))
    raise ValueError(f"unknown method {method!r}")


def _margin_and_grad(net: Network, x: np.ndarray, y: np.ndarray):
    # margin = max_{i != y} f_i - f_y, with its input gradient
    logits, tape = forward(net, x, record=True)
    rows = np.arange(len(y))
    masked = logits.copy()
    masked[rows, y] = -np.inf
    i_star = np.argmax(masked, axis=1)
    margin = masked[rows, i_star] - logits[rows, y]
    cot = np.zeros_like(logits)
    cot[rows, i_star] = 1.0
    cot[rows, y] -= 1.0
    _, gx = tape.backward(cot, params=False)
    return logits, margin, gx


@dataclass
class AttackResult:
    success: np.ndarray
    delta: np.ndarray
    delta_norm: np.ndarray
    adv_class: np.ndarray

    def to_csv(self, labels=None, certified=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "label", "certified", "success", "delta_norm", "adv_class"])
        for n in range(len(self.success)):
            w.writerow([
                n,
                int(labels[n]) if labels is not None else -1,
                int(certified[n]) if certified is not None else -1,
                int(self.success[n]),
                repr(float(self.delta_norm[n])),
                int(self.adv_class[n]),
            ])
        return buf.getvalue()


def _norms(d: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(d.reshape(len(d), -1) ** 2, axis=1))


def pgd_attack(
    net: Network,
    x: np.ndarray,
    y_pred,
    eps: float,
    steps: int = 200,
    restarts: int = 5,
    step_size: float | None = None,
    seed: int = 0,
) -> AttackResult:
    """L2 projected gradient ascent on the best rival margin.

    Restart 0 starts at ``x``; later restarts start from a random point in the
    ball. Any iterate whose argmax leaves ``y_pred`` is kept as a
    counterexample, so every reported success lies inside the ball.
    """
    y_pred = np.asarray(y_pred)
    n = len(x)
    success = np.zeros(n, dtype=bool)
    best = np.zeros_like(x)
    adv = y_pred.copy()
    if eps <= 0 or n == 0:
        return AttackResult(success, best, _norms(best), adv)
    step_size = 2.5 * eps / steps if step_size is None else step_size
    rng = np.random.default_rng(seed)
    bshape = (n,) + (1,) * (x.ndim - 1)

    def record(delta, logits):
        nonlocal success
        cls = top_class(logits)
        hit = (cls != y_pred) & ~success
        if hit.any():
            best[hit] = delta[hit]
            adv[hit] = cls[hit]
            success = success | hit

    for r in range(restarts):
        if r == 0:
            delta = np.zeros_like(x)
        else:
            d = rng.standard_normal(x.shape)
            radius = eps * rng.random(n) ** (1.0 / x[0].size)
            delta = d / _norms(d).reshape(bshape) * radius.reshape(bshape)
        for _ in range(steps):
            logits, _, g = _margin_and_grad(net, x + delta, y_pred)
            record(delta, logits)
            gn = _norms(g).reshape(bshape)
            delta = delta + step_size * g / np.where(gn > 0, gn, 1.0)
            dn = _norms(delta).reshape(bshape)
            delta = np.where(dn > eps, delta * (eps / np.where(dn > 0, dn, 1.0)), delta)
        record(delta, forward(net, x + delta))
        if success.all():
            break
    return AttackResult(success, best, _norms(best), adv)


@dataclass
class SoundnessReport:
    num_points: int
    num_certified: int
    num_violations: int
    attack: AttackResult | None = None
    certified_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def alarm(self) -> bool:
        return self.num_violations > 0


def soundness_sweep(
    net: Network,
    x: np.ndarray,
    eps: float,
    report: LipschitzReport,
    steps: int = 200,
    restarts: int = 5,
    seed: int = 0,
) -> SoundnessReport:
    """Attack every point certified under ``report``; any success is a violation."""
    results = certify_logits(forward(net, x), report.margin, eps)
    mask = np.array([r.certified for r in results])
    pred = np.array([r.top for r in results])
    if not mask.any():
        return SoundnessReport(len(x), 0, 0, None, mask)
    att = pgd_attack(net, x[mask], pred[mask], eps, steps, restarts, seed=seed)
    return SoundnessReport(len(x), int(mask.sum()), int(att.success.sum()), att, mask)


def empirical_lipschitz_lower_bound(
    net: Network,
    num_pairs: int = 200,
    seed: int = 0,
    inputs: np.ndarray | None = None,
    stop: int | None = None,
    refine: int = 5,
    refine_steps: int = 100,
    radius: float = 1e-2,
) -> float:
    """Largest observed ``||h(x) - h(x')|| / ||x - x'||`` for the pre-head map ``h``.

    Random pairs seed the search; the best ``refine`` pairs are then improved
    by iterating ``delta <- J^T (h(x + delta) - h(x))`` rescaled to the same
    length. Every candidate is evaluated exactly, so the result is a valid
    lower bound.
    """
    stop = net.head_index if stop is None else stop
    rng = np.random.default_rng(seed)
    shape = tuple(net.spec.input_shape)
    if inputs is None:
        base = rng.standard_normal((num_pairs, *shape))
    else:
        base = inputs[rng.integers(0, len(inputs), num_pairs)]
    d = rng.standard_normal((num_pairs, *shape))
    d *= (radius / _norms(d)).reshape((-1,) + (1,) * len(shape))
    if stop == 0:
        return 1.0

    def ratio(x0, dx):
        h0 = forward(net, x0, stop=stop)
        h1 = forward(net, x0 + dx, stop=stop)
        return _norms(h1 - h0) / _norms(dx)

    r = ratio(base, d)
    best = float(r.max())
    for idx in np.argsort(-r)[:refine]:
        x0 = base[idx : idx + 1]
        dx = d[idx : idx + 1]
        h0 = forward(net, x0, stop=stop)
        for _ in range(refine_steps):
            h1, tape = forward(net, x0 + dx, record=True, stop=stop)
            _, g = tape.backward(h1 - h0, params=False)
            gn = _norms(g)[0]
            if gn == 0:
                break
            dx = g * (radius / gn)
            best = max(best, float(ratio(x0, dx)[0]))
    return best


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def finite_diff_grad_check(
    loss_eval: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-5,
    coords: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Central differences on up to ``coords`` random coordinates per tensor.

    The error for each tensor is ``||fd - an|| / max(||fd||, ||an||)`` over
    the sampled coordinates; the report keeps the worst tensor.
    """
    rng = np.random.default_rng(seed)
    per = {}
    for name, value in params.items():
        flat_n = value.size
        idx = rng.choice(flat_n, size=min(coords, flat_n), replace=False)
        fd = np.empty(len(idx))
        for t, j in enumerate(idx):
            trial = {k: v for k, v in params.items()}
            plus = value.copy().reshape(-1)
            plus[j] += step
            trial[name] = plus.reshape(value.shape)
            fp = loss_eval(trial)
            minus = value.copy().reshape(-1)
            minus[j] -= step
            trial[name] = minus.reshape(value.shape)
            fm = loss_eval(trial)
            fd[t] = (fp - fm) / (2 * step)
        an = analytic.get(name, np.zeros_like(value)).reshape(-1)[idx]
        scale = max(np.linalg.norm(fd), np.linalg.norm(an))
        per[name] = float(np.linalg.norm(fd - an) / scale) if scale > 0 else 0.0
    return GradCheckReport(max(per.values()) if per else 0.0, per, tol)
