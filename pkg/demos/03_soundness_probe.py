"""Attack certified points with PGD, then break the bound on purpose.

With the real Lipschitz bound no certified point can be flipped inside the
radius. Shrinking the bound 100x certifies points that are not robust, and
the same sweep raises the alarm.
"""

import numpy as np

from certlip.config import DataConfig, ModelConfig, RunConfig, RunSection, TrainConfig, build_dataset
from certlip.lipschitz import lipschitz_report
from certlip.oracle import soundness_sweep
from certlip.training import train

eps = 0.3
cfg = RunConfig(
    DataConfig(per_class=60),
    ModelConfig(width=8, depth=2, neck_dim=16),
    TrainConfig(eps=eps, epochs=15, batch_size=32, lr=0.005),
    RunSection(),
)
net, _ = train(cfg)
_, test = build_dataset(cfg.data)

# add points between classes so the broken bound has something to get wrong
rng = np.random.default_rng(0)
a, b = rng.integers(0, len(test), (2, 200))
keep = test.labels[a] != test.labels[b]
t = rng.random(keep.sum())[:, None, None, None]
pool = np.concatenate([test.inputs, (1 - t) * test.inputs[a[keep]] + t * test.inputs[b[keep]]])

for name, scale in (("true bound", 1.0), ("bound x 0.01", 0.01)):
    report = lipschitz_report(net, "certify", k_scale=scale)
    sweep = soundness_sweep(net, pool, eps, report, steps=100, restarts=2)
    print(f"{name:>13}: {sweep.num_certified} certified, {sweep.num_violations} flipped, alarm={sweep.alarm}")
