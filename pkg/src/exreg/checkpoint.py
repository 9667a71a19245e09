"""Versioned binary checkpoints.

Layout (all little-endian): magic ``EXRG``, format version u32, blob count
u32, then blobs sorted by name.  Each blob is a length-prefixed name,
a dtype code (f32/f64/json), shape dims, and raw data bytes.  Sorting plus
canonical JSON make save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"EXRG"
FORMAT_VERSION = 1
META_KEY = "__meta__"

_DTYPE_F32 = 0
_DTYPE_F64 = 1
_DTYPE_JSON = 2

_CODE_OF = {np.dtype(np.float32): _DTYPE_F32, np.dtype(np.float64): _DTYPE_F64}
_NP_OF = {_DTYPE_F32: "<f4", _DTYPE_F64: "<f8"}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    """Named parameter arrays (``section/param`` keys) plus a JSON meta dict.

    Conventional sections: ``megnet/``, ``regnet/``, ``opt/m/``, ``opt/v/``.
    ``meta`` carries the step counter, stage, and the train-config snapshot.
    """

    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def has_section(self, prefix: str) -> bool:
        p = prefix.rstrip("/") + "/"
        return any(k.startswith(p) for k in self.arrays)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    blobs = []
    meta_bytes = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs.append((META_KEY, _DTYPE_JSON, (), meta_bytes))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        if arr.dtype not in _CODE_OF:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        code = _CODE_OF[arr.dtype]
        blobs.append((name, code, arr.shape, np.ascontiguousarray(arr.astype(_NP_OF[code])).tobytes()))
    blobs.sort(key=lambda b: b[0])

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blobs)))
        for name, code, shape, data in blobs:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, len(shape)))
            for d in shape:
                f.write(struct.pack("<I", d))
            f.write(struct.pack("<Q", len(data)))
            f.write(data)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    arrays = {}
    meta = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        (dlen,) = struct.unpack_from("<Q", raw, off)
        off += 8
        data = raw[off:off + dlen]
        off += dlen
        if code == _DTYPE_JSON:
            meta = json.loads(data.decode("utf-8"))
        elif code in _NP_OF:
            arrays[name] = np.frombuffer(data, dtype=_NP_OF[code]).reshape(shape).copy()
        else:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
    return Checkpoint(arrays=arrays, meta=meta)
