"""Binary checkpoint format.

Layout (little-endian)::

    b"RBLB1"
    u64 json_len, json_len bytes of UTF-8 JSON header
    u32 array_count
    per array: u16 name_len, name, u8 ndim, ndim x u32 dims, u64 nbytes, float32 data
    u32 crc32 of everything after the magic

The JSON header carries per-store spec, seed and spec hash plus free-form
metadata (step, optimizer counters, config hash, loss weights).
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .models import NetworkSpec, ParamStore
from .numerics import Tensor

MAGIC = b"RBLB1"


class CheckpointError(Exception):
    code = 1


class CorruptCheckpointError(CheckpointError):
    code = 10


class MagicMismatchError(CheckpointError):
    code = 11


class SpecHashMismatchError(CheckpointError):
    code = 12


@dataclass
class Checkpoint:
    stores: dict[str, ParamStore]
    metadata: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _encode_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    data = arr.tobytes()
    buf.write(struct.pack("<Q", len(data)))
    buf.write(data)


def save_checkpoint(
    path: str | Path,
    stores: Mapping[str, ParamStore],
    metadata: Mapping | None = None,
    arrays: Mapping[str, np.ndarray] | None = None,
) -> Path:
    """Write ``stores`` and extra float arrays; output bytes depend only on the inputs."""
    named: list[tuple[str, np.ndarray]] = []
    header = {"stores": {}, "metadata": dict(metadata or {})}
    for sname in sorted(stores):
        store = stores[sname]
        header["stores"][sname] = {
            "spec": store.spec.to_dict(),
            "seed": store.seed,
            "spec_hash": store.spec_hash,
        }
        for pname, t in store.items():
            named.append((f"{sname}/{pname}", t.data))
    for aname in sorted(arrays or {}):
        named.append((f"extra/{aname}", arrays[aname]))
    for name, arr in named:
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"refusing to save non-finite values in {name}")

    body = io.BytesIO()
    blob = json.dumps(header, sort_keys=True).encode()
    body.write(struct.pack("<Q", len(blob)))
    body.write(blob)
    body.write(struct.pack("<I", len(named)))
    for name, arr in named:
        _encode_array(body, name, arr)
    payload = body.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + payload + struct.pack("<I", zlib.crc32(payload)))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(
    path: str | Path, expected_specs: Mapping[str, NetworkSpec] | None = None
) -> Checkpoint:
    """Read a checkpoint, verifying magic, CRC and (optionally) spec hashes."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) and MAGIC.startswith(raw):
        raise CorruptCheckpointError(f"{path}: file too short")
    if raw[: len(MAGIC)] != MAGIC:
        raise MagicMismatchError(f"{path}: not an RBLB1 checkpoint")
    if len(raw) < len(MAGIC) + 4:
        raise CorruptCheckpointError(f"{path}: file too short")
    payload, tail = raw[len(MAGIC) : -4], raw[-4:]
    if struct.unpack("<I", tail)[0] != zlib.crc32(payload):
        raise CorruptCheckpointError(f"{path}: checksum mismatch or truncated file")
    r = _Reader(payload)
    try:
        (jlen,) = r.unpack("<Q")
        header = json.loads(r.take(jlen).decode())
        (count,) = r.unpack("<I")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            (nbytes,) = r.unpack("<Q")
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
                raise CorruptCheckpointError(f"{path}: size mismatch for {name}")
            arrays[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).astype(np.float32)
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc

    stores = {}
    for sname, info in header["stores"].items():
        spec = NetworkSpec.from_dict(info["spec"])
        if spec.hash != info["spec_hash"]:
            raise CorruptCheckpointError(f"{path}: stored spec hash for {sname} is inconsistent")
        if expected_specs and sname in expected_specs and expected_specs[sname].hash != spec.hash:
            raise SpecHashMismatchError(
                f"{path}: store {sname} has spec hash {spec.hash}, "
                f"expected {expected_specs[sname].hash}"
            )
        prefix = sname + "/"
        params = {
            k[len(prefix) :]: Tensor(v, requires_grad=spec.kind != "feature_extractor", name=k[len(prefix) :])
            for k, v in arrays.items()
            if k.startswith(prefix)
        }
        stores[sname] = ParamStore(spec, info["seed"], params)
    if expected_specs:
        missing = set(expected_specs) - set(stores)
        if missing:
            raise SpecHashMismatchError(f"{path}: missing stores {sorted(missing)}")
    extra = {k[len("extra/") :]: v for k, v in arrays.items() if k.startswith("extra/")}
    return Checkpoint(stores=stores, metadata=header["metadata"], arrays=extra)
