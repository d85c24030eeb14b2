"""Shared fixtures that need the package (unlike ``oracles``)."""

import numpy as np

from certlip.gloro import LOSSES, emma_radii
from certlip.lipschitz import lipschitz_report
from certlip.network import build_network, forward, liresnet_spec
from certlip.oracle import finite_diff_grad_check
from certlip.training import loss_and_grads

# tight enough that sigma noise stays far below the finite-difference step
LIP = dict(tol=1e-13, safety=0.0)


def small_liresnet(seed=0, depth=3, width=4, dim=6, classes=4):
    return build_network(liresnet_spec((1, 1, dim), classes, width=width, depth=depth, neck_dim=8), seed)


def network_grad_check(loss, seed=0, eps=0.3, coords=200, family="liresnet", depth=3):
    """Finite-difference check of ``loss_and_grads`` on a small network.

    EMMA radii are computed once at the unperturbed parameters and frozen.
    """
    net = build_network(liresnet_spec((1, 1, 6), 4, width=4, depth=depth, neck_dim=8, family=family), seed)
    if family == "resnet":
        rng = np.random.default_rng(seed + 1)
        for k in net.params:
            if k.endswith(".beta"):
                net.params[k] = rng.standard_normal(net.params[k].shape) * 0.5
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 1, 1, 6))
    y = rng.integers(0, 4, 6)
    radii = None
    if loss == "emma":
        rep = lipschitz_report(net, "certify", **LIP)
        radii = emma_radii(forward(net, x), y, rep.margin, eps)
    _, grads, _ = loss_and_grads(net, x, y, loss, eps, None, mode="certify", radii=radii, trades_lambda=0.7, **LIP)

    def loss_eval(params):
        logits = forward(net, x, params=params)
        if loss == "plain_ce":
            return LOSSES[loss](logits, y).value
        K = lipschitz_report(net, "certify", params=params, **LIP).margin
        if loss == "emma":
            return LOSSES[loss](logits, y, K, eps, radii=radii).value
        if loss == "gloro_trades":
            return LOSSES[loss](logits, y, K, eps, 0.7).value
        return LOSSES[loss](logits, y, K, eps).value

    return finite_diff_grad_check(loss_eval, net.params, grads, step=1e-5, tol=1e-5, coords=coords, seed=seed)
