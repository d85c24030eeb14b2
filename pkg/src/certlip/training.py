"""Optimizers, the training-radius schedule and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig, build_dataset, build_spec, serialize_config
from .datasets import batches
from .gloro import LOSSES, certify_logits, clean_accuracy, churn_metric, threatening_class, vra
from .lipschitz import PowerState, lipschitz_report
from .network import Network, build_network, forward
from .tensor_core import NonFiniteError

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "eps_train", "train_loss", "clean_acc", "vra", "churn", "k_sub", "wall_time"]


class DivergenceError(FloatingPointError):
    pass


def epsilon_schedule(t: int, T: int, eps: float) -> float:
    """Training radius at epoch ``t``: ramps from ``0.1 eps`` to ``2 eps`` by ``T/2``."""
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside [0, {T}]")
    return (min(2 * t / T, 1) * 1.9 + 0.1) * eps


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k in params:
            g = grads.get(k)
            if g is None:
                continue
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] = params[k] - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        for k in self.m:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out


class Lookahead:
    """Every ``k`` inner steps: ``slow += alpha * (fast - slow)``, then ``fast = slow``."""

    def __init__(self, inner: Adam, k: int = 5, alpha: float = 0.5):
        if k < 1 or not 0.0 <= alpha <= 1.0:
            raise ValueError("lookahead needs k >= 1 and alpha in [0, 1]")
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self.slow: dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if not self.slow:
            self.slow = {k: v.copy() for k, v in params.items()}
        self.inner.step(params, grads)
        self.steps += 1
        if self.steps % self.k == 0:
            for k in params:
                self.slow[k] = self.slow[k] + self.alpha * (params[k] - self.slow[k])
                params[k] = self.slow[k].copy()

    def state(self) -> dict[str, np.ndarray]:
        out = self.inner.state()
        out["lookahead.steps"] = np.array(float(self.steps))
        for k, v in self.slow.items():
            out[f"lookahead.slow/{k}"] = v
        return out


def lookahead_wrap(inner: Adam, k: int = 5, alpha: float = 0.5) -> Lookahead:
    return Lookahead(inner, k, alpha)


def loss_and_grads(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    loss: str,
    eps: float,
    states: dict[str, PowerState] | None = None,
    *,
    mode: str = "train",
    params: dict[str, np.ndarray] | None = None,
    radii: np.ndarray | None = None,
    trades_lambda: float = 1.0,
    **lip_kw,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Loss value, parameter gradients and logits for one batch.

    Gradients flow through the logits and through the margin matrix ``K``.
    """
    logits, tape = forward(net, x, record=True, params=params)
    fn = LOSSES[loss]
    m = logits.shape[1]
    if loss == "plain_ce":
        lv = fn(logits, y)
        kgrad = None
    else:
        report, kgrad = lipschitz_report(net, mode, states, with_grad=True, params=params, **lip_kw)
        K = report.margin
        if loss == "emma":
            lv = fn(logits, y, K, eps, radii=radii)
        elif loss == "gloro_trades":
            lv = fn(logits, y, K, eps, trades_lambda)
        else:
            lv = fn(logits, y, K, eps)
    if not np.isfinite(lv.value):
        raise DivergenceError(f"non-finite loss {lv.value}")
    grads, _ = tape.backward(lv.dlogits)
    if kgrad is not None and lv.dK.any():
        for k, g in kgrad(lv.dK).items():
            grads[k] = grads[k] + g if k in grads else g
    assert lv.dK.shape == (m, m)
    return lv.value, grads, logits


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    threats: list[np.ndarray] = field(default_factory=list)  # index 0 is the pre-training snapshot
    final_extras: dict = field(default_factory=dict)
    final_report: object = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def threats_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "threats"])
        for e, t in enumerate(self.threats):
            w.writerow([e - 1, " ".join(str(int(c)) for c in t)])
        return buf.getvalue()


def _augment(x: np.ndarray, cfg, rng: np.random.Generator) -> np.ndarray:
    t = cfg.train
    if t.flip_aug:
        flip = rng.random(len(x)) < 0.5
        x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    if t.noise_aug > 0:
        x = x + t.noise_aug * rng.standard_normal(x.shape)
    return x


def evaluate(net: Network, ds, eps: float, safety: float):
    """Certify-mode evaluation: (clean accuracy, VRA, report, results)."""
    report = lipschitz_report(net, "certify", safety=safety)
    results = certify_logits(forward(net, ds.inputs), report.margin, eps)
    return clean_accuracy(results, ds.labels), vra(results, ds.labels), report, results


def power_state_extras(states: dict[str, PowerState]) -> dict[str, np.ndarray]:
    return {f"power/{k}": s.v for k, s in states.items()}


def train(cfg: RunConfig, out_dir: str | Path | None = None) -> tuple[Network, TrainLog]:
    """Train a network per ``cfg``; writes cadence checkpoints into ``out_dir`` if given."""
    cfg.validate()
    t = cfg.train
    train_ds, test_ds = build_dataset(cfg.data)
    spec = build_spec(cfg.model, train_ds.input_shape, train_ds.num_classes)
    net = build_network(spec, seed=t.seed)
    states: dict[str, PowerState] = {}
    opt = Adam(t.lr)
    if t.lookahead:
        opt = lookahead_wrap(opt, t.lookahead_k, t.lookahead_alpha)
    run_text = serialize_config(cfg)
    out = Path(out_dir) if out_dir is not None else None
    dt = np.float32 if t.dtype == "float32" else np.float64

    tlog = TrainLog()
    tlog.threats.append(threatening_class(forward(net, train_ds.inputs)))
    last_good = net.copy()
    for epoch in range(t.epochs):
        t0 = time.perf_counter()
        eps_t = epsilon_schedule(epoch, t.epochs, t.eps)
        losses, sizes = [], []
        aug_rng = np.random.default_rng([t.seed, epoch, 7])
        try:
            for xb, yb in batches(train_ds, t.batch_size, True, t.seed, epoch):
                xb = _augment(xb, cfg, aug_rng)
                params = None
                if dt is np.float32:
                    params = {k: v.astype(np.float32) for k, v in net.params.items()}
                    xb = xb.astype(np.float32)
                value, grads, _ = loss_and_grads(
                    net, xb, yb, t.loss, eps_t, states, params=params,
                    trades_lambda=t.trades_lambda, iters=t.power_iters, seed=t.seed,
                )
                grads = {k: g.astype(np.float64) for k, g in grads.items()}
                if not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise DivergenceError("non-finite gradient")
                opt.step(net.params, grads)
                losses.append(value)
                sizes.append(len(yb))
            clean, acc_vra, report, _ = evaluate(net, test_ds, t.eps, t.safety)
            threats = threatening_class(forward(net, train_ds.inputs))
        except (DivergenceError, NonFiniteError) as exc:
            if out is not None:
                save_checkpoint(last_good, out / "last_good.ckpt", run_text=run_text)
            raise DivergenceError(f"training diverged at epoch {epoch}: {exc}") from exc
        churn = churn_metric(tlog.threats[-1], threats)
        tlog.threats.append(threats)
        row = {
            "epoch": epoch,
            "eps_train": eps_t,
            "train_loss": float(np.dot(losses, sizes) / np.sum(sizes)),
            "clean_acc": clean,
            "vra": acc_vra,
            "churn": churn,
            "k_sub": report.k_sub,
            "wall_time": time.perf_counter() - t0 if t.log_wall_time else 0.0,
        }
        tlog.rows.append(row)
        last_good = net.copy()
        log.info("epoch %d eps=%.4f loss=%.4f clean=%.4f vra=%.4f churn=%.3f K=%.4g", epoch, eps_t,
                 row["train_loss"], clean, acc_vra, churn, report.k_sub)
        every = cfg.run.checkpoint_every
        if out is not None and every > 0 and (epoch + 1) % every == 0:
            save_checkpoint(net, out / f"epoch_{epoch + 1:04d}.ckpt",
                            _extras(opt, states, epoch + 1), run_text)
    tlog.final_extras = _extras(opt, states, t.epochs)
    tlog.final_report = report
    return net, tlog


def _extras(opt, states, epoch: int) -> dict[str, np.ndarray]:
    ex = dict(opt.state())
    ex.update(power_state_extras(states))
    ex["epoch"] = np.array(float(epoch))
    return ex
