"""Checkpoint persistence: text header + little-endian float32 parameter blobs.

Layout::

    advcheck-checkpoint 1
    input_shape 1,8,8
    class_count 10
    layer conv2d out_channels=16 kernel=3
    layer relu
    ...
    meta layer_index 3           (optional free-form metadata records)
    end
    <raw little-endian float32 parameter data, declaration order>

The binary section stores each parameter tensor's float32 bytes verbatim, so
save -> load round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .layers import layer_from_header
from .network import Network

__all__ = ["save_network", "load_network", "fingerprint", "CheckpointError"]

MAGIC = "advcheck-checkpoint"
VERSION = "1"


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def _header_lines(net: Network, metadata: dict[str, str] | None) -> list[str]:
    lines = [f"{MAGIC} {VERSION}",
             "input_shape " + ",".join(str(d) for d in net.input_shape),
             f"class_count {net.class_count}"]
    for layer in net.layers:
        fields = " ".join(f"{k}={v}" for k, v in layer.header_fields().items())
        lines.append(f"layer {layer.kind}" + (f" {fields}" if fields else ""))
    for key, value in (metadata or {}).items():
        lines.append(f"meta {key} {value}")
    lines.append("end")
    return lines


def save_network(net: Network, path: str | Path,
                 metadata: dict[str, str] | None = None) -> str:
    """Write the checkpoint and return its SHA-256 fingerprint."""
    path = Path(path)
    header = "\n".join(_header_lines(net, metadata)) + "\n"
    blobs = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes()
                     for p in net.parameters())
    data = header.encode("ascii") + blobs
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_network(path: str | Path) -> tuple[Network, dict[str, str], str]:
    """Read a checkpoint; returns (network, metadata, fingerprint)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    nl = data.find(b"\nend\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing end-of-header marker")
    header = data[:nl + 5].decode("ascii")
    blob = data[nl + 5:]
    lines = header.strip().split("\n")
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic line {lines[0]!r}")
    if first[1] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {first[1]!r}")
    input_shape: tuple[int, ...] | None = None
    class_count: int | None = None
    layers = []
    metadata: dict[str, str] = {}
    for line in lines[1:-1]:
        key, _, rest = line.partition(" ")
        if key == "input_shape":
            input_shape = tuple(int(d) for d in rest.split(","))
        elif key == "class_count":
            class_count = int(rest)
        elif key == "layer":
            kind, _, fieldstr = rest.partition(" ")
            fields = dict(f.split("=", 1) for f in fieldstr.split() if f)
            layers.append(layer_from_header(kind, fields))
        elif key == "meta":
            mkey, _, mval = rest.partition(" ")
            metadata[mkey] = mval
        else:
            raise CheckpointError(f"{path}: unknown header record {key!r}")
    if input_shape is None or class_count is None:
        raise CheckpointError(f"{path}: header missing input_shape/class_count")
    net = Network.build(layers, input_shape, class_count, seed=0)
    offset = 0
    for p in net.parameters():
        nbytes = p.size * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated parameter data")
        p[...] = np.frombuffer(blob[offset:offset + nbytes],
                               dtype="<f4").reshape(p.shape)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    return net, metadata, hashlib.sha256(data).hexdigest()


def fingerprint(path: str | Path) -> str:
    """SHA-256 of the checkpoint file's bytes."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
