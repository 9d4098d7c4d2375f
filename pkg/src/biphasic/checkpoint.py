"""Binary checkpoints.

Network container (all integers little-endian u32)::

    b"BPNC" version name_len name param_count
    param_count x [name_len name rank extent*rank float64-le*prod(extents)]

Records are sorted by parameter name.  A bundle wraps several containers
with a JSON header carrying everything needed to rebuild the networks::

    b"BPCK" version meta_len meta_json net_count net_count x [container_len container]
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .nets import Network, describe, rebuild

NET_MAGIC = b"BPNC"
BUNDLE_MAGIC = b"BPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


class _Reader:
    def __init__(self, data: bytes, what: str) -> None:
        self.buf = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n].tobytes()
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise CheckpointError(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


# -- parameter containers -------------------------------------------------------


def encode_params(name: str, params: Mapping[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    raw_name = name.encode("utf-8")
    out.write(NET_MAGIC + _u32(VERSION) + _u32(len(raw_name)) + raw_name + _u32(len(params)))
    for key in sorted(params):
        arr = np.asarray(params[key], dtype="<f8")
        key_raw = key.encode("utf-8")
        out.write(_u32(len(key_raw)) + key_raw + _u32(arr.ndim))
        out.write(b"".join(_u32(d) for d in arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    return out.getvalue()


def decode_params(data: bytes) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(data, "network container")
    if r.take(4) != NET_MAGIC:
        raise CheckpointError("not a network container (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    name = r.text()
    params = {}
    for _ in range(r.u32()):
        key = r.text()
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        params[key] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    r.done()
    return name, params


def network_bytes(net: Network) -> bytes:
    return encode_params(net.name, {k: p.data for k, p in net.params.items()})


def load_into(net: Network, data: bytes) -> Network:
    """Copy container parameters into ``net``; names and shapes must match exactly."""
    name, params = decode_params(data)
    if set(params) != set(net.params):
        missing = sorted(set(net.params) - set(params))
        extra = sorted(set(params) - set(net.params))
        raise CheckpointError(f"{name}: parameter mismatch (missing {missing}, unexpected {extra})")
    for key, arr in params.items():
        if arr.shape != net.params[key].shape:
            raise CheckpointError(f"{name}.{key}: shape {arr.shape} != {net.params[key].shape}")
        net.params[key].data = arr
    return net


def save_network(net: Network, path: str | os.PathLike) -> None:
    _atomic_write(Path(path), network_bytes(net))


# -- bundles --------------------------------------------------------------------


def encode_bundle(networks: Mapping[str, Network], meta: Mapping | None = None) -> bytes:
    header = dict(meta or {})
    header["networks"] = {role: describe(net) for role, net in sorted(networks.items())}
    meta_raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(BUNDLE_MAGIC + _u32(VERSION) + _u32(len(meta_raw)) + meta_raw + _u32(len(networks)))
    for role in sorted(networks):
        blob = network_bytes(networks[role])
        out.write(_u32(len(blob)) + blob)
    return out.getvalue()


def decode_bundle(data: bytes) -> tuple[dict, dict[str, Network]]:
    r = _Reader(data, "checkpoint bundle")
    if r.take(4) != BUNDLE_MAGIC:
        raise CheckpointError("not a checkpoint bundle (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported bundle version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    descs = meta.get("networks", {})
    count = r.u32()
    if count != len(descs):
        raise CheckpointError(f"bundle lists {len(descs)} networks but stores {count}")
    nets = {}
    for role in sorted(descs):
        net = rebuild(descs[role])
        load_into(net, r.take(r.u32()))
        nets[role] = net
    r.done()
    return meta, nets


def save_bundle(path: str | os.PathLike, networks: Mapping[str, Network], meta: Mapping | None = None) -> Path:
    path = Path(path)
    _atomic_write(path, encode_bundle(networks, meta))
    return path


def load_bundle(path: str | os.PathLike) -> tuple[dict, dict[str, Network]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_bundle(path.read_bytes())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
