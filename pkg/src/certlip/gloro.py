"""Bottom-logit certificates, verified robust accuracy and the margin losses.

Every loss takes a batch of logits ``f[N, m]``, labels ``y[N]`` and the margin
Lipschitz matrix ``K[m, m]`` and returns a :class:`LossValue` holding the mean
loss together with its gradients w.r.t. ``f`` and ``K``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .lipschitz import LipschitzReport
from .network import Network, forward
from .tensor_core import NonFiniteError


class StaleReportError(RuntimeError):
    pass


@dataclass
class CertResult:
    logits: np.ndarray
    f_bottom: float
    prediction: int  # -1 stands for the bottom class
    certified: bool
    eps: float
    top: int = -1


@dataclass
class LossValue:
    value: float
    dlogits: np.ndarray
    dK: np.ndarray


def top_class(logits: np.ndarray) -> np.ndarray:
    # np.argmax already returns the lowest index on ties
    return np.argmax(logits, axis=-1)


def threatening_class(logits: np.ndarray) -> np.ndarray:
    """Second-highest logit per row (ties resolved toward the lowest index)."""
    logits = np.atleast_2d(logits)
    j = top_class(logits)
    masked = logits.copy()
    masked[np.arange(len(j)), j] = -np.inf
    return np.argmax(masked, axis=-1)


def _bottom(logits: np.ndarray, K: np.ndarray, j: np.ndarray, eps: float):
    # row-wise max over i != j of f_i + eps * K[j, i], and its argmax
    cand = logits + eps * K[j]
    cand[np.arange(len(j)), j] = -np.inf
    i_star = np.argmax(cand, axis=-1)
    return cand[np.arange(len(j)), i_star], i_star


def bottom_logit(logits: np.ndarray, K: np.ndarray, j: int | None = None, eps: float = 0.0) -> float:
    """``max_{i != j} (f_i + eps * K[j, i])`` for one logit vector."""
    logits = np.asarray(logits, dtype=float)
    if logits.shape[-1] < 2:
        raise ValueError("bottom logit needs at least two classes")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if j is None:
        j = int(top_class(logits))
    fb, _ = _bottom(logits[None], K, np.array([j]), eps)
    return float(fb[0])


def certify_logits(logits: np.ndarray, K: np.ndarray, eps: float) -> list[CertResult]:
    j = top_class(logits)
    fb, _ = _bottom(logits, K, j, eps)
    top = logits[np.arange(len(j)), j]
    ok = top >= fb
    return [
        CertResult(logits[n], float(fb[n]), int(j[n]) if ok[n] else -1, bool(ok[n]), eps, int(j[n]))
        for n in range(len(j))
    ]


def certified_predict(net: Network, x: np.ndarray, eps: float, report: LipschitzReport) -> list[CertResult]:
    """Forward ``x`` and attach a certificate from a certify-mode report.

    The report must have been computed for the network's current parameters.
    """
    if report.param_hash != net.param_hash():
        raise StaleReportError("Lipschitz report does not match the network parameters")
    if report.mode != "certify":
        raise StaleReportError("certificates require a certify-mode report")
    return certify_logits(forward(net, x), report.margin, eps)


def vra(results: list[CertResult], labels) -> float:
    labels = np.asarray(labels)
    if len(results) != len(labels):
        raise ValueError(f"{len(results)} results but {len(labels)} labels")
    if not len(results):
        return 0.0
    return float(np.mean([r.certified and r.prediction == l for r, l in zip(results, labels)]))


def clean_accuracy(results: list[CertResult], labels) -> float:
    labels = np.asarray(labels)
    return float(np.mean([r.top == l for r, l in zip(results, labels)]))


def cert_results_csv(results: list[CertResult], labels) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "label", "prediction", "f_top", "f_bottom", "certified"])
    for n, (r, l) in enumerate(zip(results, labels)):
        w.writerow([n, int(l), r.prediction, repr(float(r.logits[r.top])), repr(r.f_bottom), int(r.certified)])
    return buf.getvalue()


def kappa(logits: np.ndarray, y, K: np.ndarray) -> np.ndarray:
    """Certifiable radius of each margin ``f_y - f_i`` (zero at ``i = y``).

    A zero ``K[y, i]`` for ``i != y`` gives +inf / -inf / 0 by the sign of the
    margin.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    y = np.atleast_1d(np.asarray(y))
    rows = np.arange(len(y))
    Ky = K[y]
    margin = logits[rows, y][:, None] - logits
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        k = np.where(Ky > 0, margin / np.where(Ky > 0, Ky, 1.0), np.sign(margin) * np.inf)
    k = np.where((Ky <= 0) & (margin == 0), 0.0, k)
    k[rows, y] = 0.0
    return k


def emma_radii(logits: np.ndarray, y, K: np.ndarray, eps: float) -> np.ndarray:
    """Per-class radii ``clip(kappa, 0, eps)``; treated as constants by the loss."""
    return np.clip(kappa(logits, y, K), 0.0, eps)


def _check(logits: np.ndarray) -> None:
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits")


def _softmax_ce(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # per-row loss and dloss/dz
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(len(y))
    loss = (np.log(s[:, 0]) + zmax[:, 0]) - z[rows, y]
    p = e / s
    p[rows, y] -= 1.0
    return loss, p


def cross_entropy(logits: np.ndarray, y, K: np.ndarray | None = None, eps: float = 0.0) -> LossValue:
    _check(logits)
    y = np.asarray(y)
    n, m = logits.shape
    loss, g = _softmax_ce(logits, y)
    return LossValue(float(loss.mean()), g / n, np.zeros((m, m)))


def _inflated_ce(logits: np.ndarray, y: np.ndarray, K: np.ndarray, radii: np.ndarray) -> LossValue:
    # CE over f_i + radii_i * K[y, i]
    n, m = logits.shape
    Ky = K[y]
    z = logits + radii * Ky
    loss, g = _softmax_ce(z, y)
    g /= n
    dK = np.zeros((m, m))
    np.add.at(dK, y, g * radii)
    return LossValue(float(loss.mean()), g, dK)


def emma_loss(logits: np.ndarray, y, K: np.ndarray, eps: float, radii: np.ndarray | None = None) -> LossValue:
    """Cross-entropy with each rival logit raised by ``radii_i * K[y, i]``.

    ``radii`` defaults to :func:`emma_radii` of the given logits. Passing a
    precomputed array freezes the radii, which is how finite-difference checks
    hold them fixed.
    """
    _check(logits)
    y = np.asarray(y)
    if radii is None:
        radii = emma_radii(logits, y, K, eps)
    return _inflated_ce(logits, y, K, radii)


def fixed_margin_loss(logits: np.ndarray, y, K: np.ndarray, eps: float) -> LossValue:
    _check(logits)
    y = np.asarray(y)
    radii = np.full(logits.shape, float(eps))
    radii[np.arange(len(y)), y] = 0.0
    return _inflated_ce(logits, y, K, radii)


def _augmented_ce(logits: np.ndarray, K: np.ndarray, eps: float, target: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # CE over [f_1..f_m, f_bot] with f_bot built from the predicted class
    n, m = logits.shape
    rows = np.arange(n)
    j = top_class(logits)
    fb, i_star = _bottom(logits, K, j, eps)
    z = np.concatenate([logits, fb[:, None]], axis=1)
    loss, g = _softmax_ce(z, target)
    gf = g[:, :m].copy()
    gb = g[:, m]
    np.add.at(gf, (rows, i_star), gb)
    dK = np.zeros((m, m))
    np.add.at(dK, (j, i_star), gb * eps)
    return loss, gf, dK


def gloro_ce_loss(logits: np.ndarray, y, K: np.ndarray, eps: float) -> LossValue:
    _check(logits)
    y = np.asarray(y)
    n = len(y)
    loss, gf, dK = _augmented_ce(logits, K, eps, y)
    return LossValue(float(loss.mean()), gf / n, dK / n)


def gloro_trades_loss(logits: np.ndarray, y, K: np.ndarray, eps: float, lam: float = 1.0) -> LossValue:
    """Clean cross-entropy plus ``lam`` times the bottom-class cross-entropy
    toward the network's own prediction."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    clean = cross_entropy(logits, y)
    if lam == 0:
        return clean
    n = logits.shape[0]
    loss, gf, dK = _augmented_ce(logits, K, eps, top_class(logits))
    return LossValue(clean.value + lam * float(loss.mean()), clean.dlogits + lam * gf / n, lam * dK / n)


LOSSES = {
    "emma": emma_loss,
    "gloro_ce": gloro_ce_loss,
    "gloro_trades": gloro_trades_loss,
    "fixed_margin": fixed_margin_loss,
    "plain_ce": cross_entropy,
}


def churn_metric(threat_prev, threat_now) -> float:
    a, b = np.asarray(threat_prev), np.asarray(threat_now)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.mean(a != b))
