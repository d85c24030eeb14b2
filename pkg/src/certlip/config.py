"""Run configuration: line-oriented ``key = value`` text with bracketed sections.

Sections are ``[data]``, ``[model]``, ``[train]`` and ``[run]``. Every field has
a default; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .datasets import BlobSpec, Dataset, gen_concentric_rings, gen_gaussian_blobs, load_idx, train_test_split
from .network import NetworkSpec, liresnet_spec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"  # blobs | rings | idx
    num_classes: int = 4
    dim: int = 8
    separation: float = 2.4
    per_class: int = 200
    noise: float = 0.25
    radii: str = "1.0,3.0"
    seed: int = 0
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class ModelConfig:
    family: str = "liresnet"  # liresnet | resnet | convnet
    width: int = 16
    depth: int = 4
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_padding: int = 1
    block_kernel: int = 3
    neck_kernel: int = 1
    neck_stride: int = 1
    neck_dim: int = 32


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "emma"  # emma | gloro_ce | gloro_trades | fixed_margin | plain_ce
    eps: float = 0.3
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    trades_lambda: float = 1.0
    seed: int = 0
    power_iters: int = 5
    dtype: str = "float64"  # float64 | float32 (training pass only)
    lookahead: bool = True
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    noise_aug: float = 0.0
    flip_aug: bool = False
    safety: float = 1e-6
    log_wall_time: bool = False


@dataclass(frozen=True)
class RunSection:
    out_dir: str = "runs/out"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "RunConfig":
        t = self.train
        if t.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if t.eps < 0:
            raise ConfigError("train.eps must be >= 0")
        from .gloro import LOSSES

        if t.loss not in LOSSES:
            raise ConfigError(f"train.loss must be one of {sorted(LOSSES)}, got {t.loss!r}")
        if t.dtype not in ("float64", "float32"):
            raise ConfigError("train.dtype must be float64 or float32")
        if self.data.kind not in ("blobs", "rings", "idx"):
            raise ConfigError(f"data.kind must be blobs, rings or idx, got {self.data.kind!r}")
        if self.model.family not in ("liresnet", "resnet", "convnet"):
            raise ConfigError(f"model.family invalid: {self.model.family!r}")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed))


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainConfig, "run": RunSection}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(kind, raw: str, where: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from exc


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    parts = {}
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        cls = _SECTIONS[sec]
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in cp[sec].items():
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}")
            kwargs[key] = _coerce(known[key], raw, f"{sec}.{key}")
        parts[sec] = cls(**kwargs)
    return RunConfig(**parts).validate()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg: RunConfig) -> str:
    buf = io.StringIO()
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        buf.write(f"[{sec}]\n")
        for f in fields(obj):
            buf.write(f"{f.name} = {_fmt(getattr(obj, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def build_dataset(d: DataConfig) -> tuple[Dataset, Dataset]:
    """Return the ``(train, held-out)`` pair for a data section."""
    if d.kind == "blobs":
        ds = gen_gaussian_blobs(BlobSpec(d.num_classes, d.dim, d.separation, d.per_class, d.noise, d.seed))
        return train_test_split(ds)
    if d.kind == "rings":
        radii = [float(r) for r in d.radii.split(",")]
        ds = gen_concentric_rings(len(radii), d.per_class, radii, d.noise, d.seed)
        return train_test_split(ds)
    if d.kind == "idx":
        if not (d.images and d.labels):
            raise ConfigError("idx data needs data.images and data.labels")
        train = load_idx(d.images, d.labels, d.num_classes)
        train.split = "train"
        if d.test_images:
            test = load_idx(d.test_images, d.test_labels, d.num_classes)
            test.split = "test"
            return train, test
        return train_test_split(train)
    raise ConfigError(f"unknown data kind {d.kind!r}")


def build_spec(m: ModelConfig, input_shape: tuple[int, ...], num_classes: int) -> NetworkSpec:
    return liresnet_spec(
        input_shape,
        num_classes,
        width=m.width,
        depth=m.depth,
        family=m.family,
        stem_kernel=m.stem_kernel,
        stem_stride=m.stem_stride,
        stem_padding=m.stem_padding,
        block_kernel=m.block_kernel,
        neck_kernel=m.neck_kernel,
        neck_stride=m.neck_stride,
        neck_dim=m.neck_dim,
    )
