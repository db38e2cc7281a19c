"""Binary checkpoint container: little-endian "ISNN1" format.

Layout: magic b"ISNN" + version byte 0x01, u32 length-prefixed spec text
block, then one record per array until EOF: u16 length-prefixed UTF-8
name, u8 rank, rank x u32 dims, float32 row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import NetworkSpec, NetworkState
from .tensor import Tensor

MAGIC = b"ISNN"
VERSION = 1


class CheckpointFormatError(ValueError):
    """File is not a valid ISNN1 checkpoint."""


def _write_record(fh, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError("truncated checkpoint record")
    return buf


def save_checkpoint(state: NetworkState, path: str | Path):
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        spec_text = state.spec.to_text().encode("utf-8")
        fh.write(struct.pack("<I", len(spec_text)))
        fh.write(spec_text)
        for name in sorted(state.params):
            _write_record(fh, f"param.{name}", state.params[name].data)
        for name in sorted(state.running):
            _write_record(fh, f"running.{name}", state.running[name])


def load_checkpoint(path: str | Path) -> NetworkState:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic, not an ISNN1 checkpoint")
        (version,) = struct.unpack("<B", _read_exact(fh, 1))
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        (spec_len,) = struct.unpack("<I", _read_exact(fh, 4))
        spec = NetworkSpec.from_text(_read_exact(fh, spec_len).decode("utf-8"))

        params: dict[str, Tensor] = {}
        running: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            count = int(np.prod(dims)) if rank else 1
            # keep the stored float32 precision; no false promotion
            arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(dims).copy()
            if name.startswith("param."):
                params[name[len("param."):]] = Tensor(arr, requires_grad=True)
            elif name.startswith("running."):
                running[name[len("running."):]] = arr
            else:
                raise CheckpointFormatError(f"{path}: unknown record {name!r}")

    state = NetworkState(spec, params, running)
    expected = NetworkState.initialize(spec, seed=0)
    missing = set(expected.params) - set(params)
    if missing or set(expected.running) - set(running):
        raise CheckpointFormatError(f"{path}: missing records for spec, e.g. {sorted(missing)[:3]}")
    return state
