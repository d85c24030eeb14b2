"""Binary checkpoint format.

Layout (little-endian)::

    b"CERTLIP1"  u32 version
    u32 len, utf-8 spec text
    u32 blob count
    per blob: u32 len, utf-8 name; u8 dtype code; u32 rank; u64 dims[rank]; raw data

Names without a ``state/`` prefix are network parameters; ``state/...`` blobs
carry training extras (optimizer moments, power-iteration vectors, epoch).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .network import Network, NetworkSpec, SpecError

MAGIC = b"CERTLIP1"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_checkpoint(
    net: Network,
    path: str | Path,
    extras: dict[str, np.ndarray] | None = None,
    run_text: str = "",
) -> None:
    """Write ``net`` (and optional ``state/`` extras) to ``path``.

    ``run_text`` is appended to the embedded spec text so that the run config
    travels with the weights.
    """
    blobs = dict(net.params)
    for k, v in (extras or {}).items():
        blobs[f"state/{k}"] = np.asarray(v)
    text = net.spec.to_text() + (("\n" + run_text) if run_text else "")
    out = [MAGIC, struct.pack("<I", VERSION), _pack_str(text), struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        code = _CODES[arr.dtype]
        out.append(_pack_str(name))
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint truncated")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError("bad utf-8 in checkpoint") from exc


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    text = r.string()
    (count,) = r.unpack("<I")
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        code, rank = r.unpack("<BI")
        if code not in _DTYPES:
            raise CorruptCheckpointError(f"{path}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dt = _DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        blobs[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(data):
        raise CorruptCheckpointError(f"{path}: trailing bytes after last blob")
    return text, blobs


def split_spec_text(text: str) -> tuple[str, str]:
    """Separate the network sections from the appended run-config sections."""
    net_lines, run_lines = [], []
    target = net_lines
    for line in text.splitlines():
        s = line.strip()
        if s.startswith("["):
            name = s.strip("[]")
            target = net_lines if name == "network" or name.startswith("layer.") else run_lines
        target.append(line)
    return "\n".join(net_lines) + "\n", "\n".join(run_lines).strip()


def load_checkpoint(path: str | Path, expected: NetworkSpec | None = None):
    """Load a checkpoint; returns ``(network, extras, run_text)``.

    Raises :class:`SpecMismatchError` if ``expected`` is given and differs
    from the embedded architecture.
    """
    text, blobs = read_checkpoint(path)
    net_text, run_text = split_spec_text(text)
    try:
        spec = NetworkSpec.from_text(net_text)
    except SpecError as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    if expected is not None and expected != spec:
        raise SpecMismatchError(
            f"{path}: checkpoint holds a {spec.family!r} network, expected {expected.family!r} "
            "with a different layer list"
        )
    from .network import build_network

    ref = build_network(spec, seed=0)
    params = {}
    for k, v in ref.params.items():
        if k not in blobs:
            raise SpecMismatchError(f"{path}: missing parameter {k}")
        if blobs[k].shape != v.shape:
            raise SpecMismatchError(f"{path}: parameter {k} has shape {blobs[k].shape}, spec says {v.shape}")
        params[k] = blobs[k]
    extras = {k[len("state/"):]: v for k, v in blobs.items() if k.startswith("state/")}
    unknown = set(blobs) - set(params) - {f"state/{k}" for k in extras}
    if unknown:
        raise SpecMismatchError(f"{path}: parameters not in spec: {sorted(unknown)}")
    return Network(spec, params, ref.shapes), extras, run_text
