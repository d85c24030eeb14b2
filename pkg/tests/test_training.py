import dataclasses

import numpy as np
import pytest

from certlip.checkpoint import load_checkpoint
from certlip.config import DataConfig, ModelConfig, RunConfig, RunSection, TrainConfig
from certlip.gloro import LOSSES, LossValue
from certlip.training import (
    LOG_COLUMNS,
    Adam,
    DivergenceError,
    Lookahead,
    epsilon_schedule,
    lookahead_wrap,
    train,
)


def test_schedule_anchor_points():
    eps = 36 / 255
    assert epsilon_schedule(0, 100, eps) == 0.1 * eps
    assert epsilon_schedule(50, 100, eps) == 2.0 * eps
    assert epsilon_schedule(100, 100, eps) == 2.0 * eps
    assert epsilon_schedule(75, 100, eps) == 2.0 * eps
    assert epsilon_schedule(25, 100, eps) == (0.5 * 1.9 + 0.1) * eps
    with pytest.raises(ValueError):
        epsilon_schedule(101, 100, eps)


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(0.1)
    opt.step(p, {"w": np.zeros(2)})
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    Adam(0.01).step(p, {"w": np.array([3.0, -0.5, 1e-3])})
    np.testing.assert_allclose(p["w"] - 1.0, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    gs = [rng.standard_normal(4) for _ in range(10)]
    out = []
    for _ in range(2):
        p = {"w": np.ones(4)}
        opt = Adam(0.05)
        for g in gs:
            opt.step(p, {"w": g})
        out.append(p["w"].tobytes())
    assert out[0] == out[1]


class Plain:
    """Inner optimizer doing p -= g, for hand traces."""

    def step(self, params, grads):
        for k in params:
            params[k] = params[k] - grads[k]

    def state(self):
        return {}


def test_lookahead_alpha_extremes():
    p = {"w": np.array([0.0])}
    la = Lookahead(Plain(), k=2, alpha=1.0)
    for _ in range(4):
        la.step(p, {"w": np.array([-1.0])})
    assert la.slow["w"].tolist() == [4.0] and p["w"].tolist() == [4.0]
    p = {"w": np.array([0.0])}
    la = Lookahead(Plain(), k=2, alpha=0.0)
    for _ in range(4):
        la.step(p, {"w": np.array([-1.0])})
    assert la.slow["w"].tolist() == [0.0] and p["w"].tolist() == [0.0]


def test_lookahead_k1_hand_trace():
    # slow=0; fast after inner step = 1 -> slow = 0.5, fast = 0.5
    # next: fast = 1.5 -> slow = 0.5 + 0.5 * 1.0 = 1.0
    p = {"w": np.array([0.0])}
    la = lookahead_wrap(Plain(), k=1, alpha=0.5)
    la.step(p, {"w": np.array([-1.0])})
    assert p["w"].tolist() == [0.5]
    la.step(p, {"w": np.array([-1.0])})
    assert p["w"].tolist() == [1.0] and la.slow["w"].tolist() == [1.0]
    with pytest.raises(ValueError):
        Lookahead(Plain(), k=0)


def tiny_cfg(**train_kw):
    t = dict(epochs=3, batch_size=32, eps=0.3)
    t.update(train_kw)
    return RunConfig(
        DataConfig(per_class=25, dim=4, separation=2.4, noise=0.2),
        ModelConfig(width=4, depth=2, neck_dim=8),
        TrainConfig(**t),
        RunSection(),
    )


def test_train_log_structure_and_schedule():
    cfg = tiny_cfg(epochs=4)
    net, log = train(cfg)
    assert [r["epoch"] for r in log.rows] == [0, 1, 2, 3]
    assert [r["eps_train"] for r in log.rows] == [epsilon_schedule(t, 4, 0.3) for t in range(4)]
    for r in log.rows:
        assert all(np.isfinite(r[c]) for c in LOG_COLUMNS)
        assert 0 <= r["churn"] <= 1 and r["k_sub"] > 0
    assert log.to_csv().splitlines()[0] == ",".join(LOG_COLUMNS)
    assert len(log.threats) == 5


def test_train_deterministic():
    a = train(tiny_cfg())
    b = train(tiny_cfg())
    assert a[1].to_csv() == b[1].to_csv()
    assert a[0].param_hash() == b[0].param_hash()


def test_frozen_network_has_zero_churn():
    _, log = train(tiny_cfg(lr=0.0))
    assert all(r["churn"] == 0.0 for r in log.rows)


def test_plain_ce_eps_zero_vra_equals_clean():
    _, log = train(tiny_cfg(loss="plain_ce", eps=0.0))
    for r in log.rows:
        assert r["vra"] == r["clean_acc"]


@pytest.mark.parametrize("loss", ["emma", "gloro_ce", "gloro_trades", "fixed_margin"])
def test_every_loss_trains(loss):
    _, log = train(tiny_cfg(loss=loss, epochs=2))
    assert len(log.rows) == 2


def test_float32_and_variants():
    _, log = train(tiny_cfg(dtype="float32", lookahead=False, noise_aug=0.05, flip_aug=True))
    assert len(log.rows) == 3
    _, log = train(dataclasses.replace(tiny_cfg(epochs=2), model=ModelConfig(family="resnet", width=4, depth=2, neck_dim=8)))
    assert len(log.rows) == 2


def test_checkpoint_cadence(tmp_path):
    cfg = dataclasses.replace(tiny_cfg(epochs=4), run=RunSection(checkpoint_every=2))
    net, _ = train(cfg, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0002.ckpt", "epoch_0004.ckpt"]
    back, extras, _ = load_checkpoint(tmp_path / "epoch_0004.ckpt")
    assert back.param_hash() == net.param_hash()
    assert extras["epoch"] == 4.0 and any(k.startswith("adam.m/") for k in extras)
    assert any(k.startswith("power/") for k in extras)


def test_divergence_keeps_last_good(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = LOSSES["emma"]

    def flaky(logits, y, K, eps, radii=None):
        calls["n"] += 1
        lv = real(logits, y, K, eps, radii=radii)
        return LossValue(np.nan, lv.dlogits, lv.dK) if calls["n"] > 3 else lv

    monkeypatch.setitem(LOSSES, "emma", flaky)
    with pytest.raises(DivergenceError, match="epoch 1"):
        train(tiny_cfg(), tmp_path)
    net, _, _ = load_checkpoint(tmp_path / "last_good.ckpt")
    assert net.params
