"""Certifiably robust Lipschitz networks in numpy.

The public surface is re-exported here; submodules hold the details.
"""

from .gloro import bottom_logit, certified_predict, certify_logits, clean_accuracy, vra
from .lipschitz import LipschitzReport, layer_lipschitz, lipschitz_report, spectral_norm_conv, spectral_norm_dense
from .network import Network, NetworkSpec, build_network, forward, liresnet_spec
from .training import train

__version__ = "0.1.0"

__all__ = [
    "LipschitzReport",
    "Network",
    "NetworkSpec",
    "bottom_logit",
    "build_network",
    "certified_predict",
    "certify_logits",
    "clean_accuracy",
    "forward",
    "layer_lipschitz",
    "liresnet_spec",
    "lipschitz_report",
    "spectral_norm_conv",
    "spectral_norm_dense",
    "train",
    "vra",
]
