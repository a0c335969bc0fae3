"""The "MTEVC" checkpoint container.

Layout, all integers little-endian:

    b"MTEVC"  uint16 version
    uint16 fingerprint length, ascii fingerprint
    uint32 parameter record count, records
    uint32 optimizer record count, records

A record is: uint16 name length, utf-8 name, uint8 dtype code, uint8 ndim,
ndim x uint32 dims, raw little-endian values. Model buffers travel as
parameter records prefixed "buffer."; Adam moments as "m/<name>" and
"v/<name>", and the step and learning rates as scalar records.
"""

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from errors import CompatibilityError, DataError, StorageError
from optimizer import AdamState

MAGIC = b"MTEVC"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


@dataclass
class Checkpoint:
    fingerprint: str
    arrays: "OrderedDict[str, np.ndarray]"
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def adam_state(self, **overrides) -> Optional[AdamState]:
        if not self.optimizer:
            return None
        state = AdamState(
            lr=float(self.optimizer["lr"]),
            base_lr=float(self.optimizer["base_lr"]),
            step=int(self.optimizer["step"]),
            **overrides,
        )
        for key, value in self.optimizer.items():
            if key.startswith("m/"):
                state.m[key[2:]] = value
            elif key.startswith("v/"):
                state.v[key[2:]] = value
        return state


def _dtype_code(array: np.ndarray) -> int:
    dtype = array.dtype
    for code, candidate in _DTYPES.items():
        if dtype.kind == candidate.kind and dtype.itemsize == candidate.itemsize:
            return code
    raise DataError(f"cannot store dtype {dtype} in a checkpoint")


def _write_record(handle, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    array = np.asarray(array)
    code = _dtype_code(array)
    handle.write(struct.pack("<H", len(encoded)))
    handle.write(encoded)
    handle.write(struct.pack("<BB", code, array.ndim))
    handle.write(struct.pack(f"<{array.ndim}I", *array.shape))
    handle.write(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())


def _read_exact(handle, count: int) -> bytes:
    chunk = handle.read(count)
    if len(chunk) != count:
        raise DataError("checkpoint truncated")
    return chunk


def _read_record(handle):
    (name_len,) = struct.unpack("<H", _read_exact(handle, 2))
    name = _read_exact(handle, name_len).decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(handle, 2))
    if code not in _DTYPES:
        raise DataError(f"record '{name}' has unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(handle, 4 * ndim))
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    values = np.frombuffer(_read_exact(handle, count * dtype.itemsize), dtype=dtype)
    return name, values.reshape(shape).astype(dtype.newbyteorder("="))


def optimizer_arrays(state: AdamState) -> "OrderedDict[str, np.ndarray]":
    arrays = OrderedDict()
    arrays["step"] = np.asarray(state.step, dtype=np.int64)
    arrays["lr"] = np.asarray(state.lr, dtype=np.float64)
    arrays["base_lr"] = np.asarray(state.base_lr, dtype=np.float64)
    for name in sorted(state.m):
        arrays[f"m/{name}"] = state.m[name]
        arrays[f"v/{name}"] = state.v[name]
    return arrays


def save_checkpoint(path, fingerprint: str, arrays: Dict[str, np.ndarray], state: Optional[AdamState] = None) -> Path:
    path = Path(path)
    opt = optimizer_arrays(state) if state is not None else OrderedDict()
    encoded = fingerprint.encode("ascii")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            handle.write(MAGIC)
            handle.write(struct.pack("<H", VERSION))
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", len(arrays)))
            for name, value in arrays.items():
                _write_record(handle, name, value)
            handle.write(struct.pack("<I", len(opt)))
            for name, value in opt.items():
                _write_record(handle, name, value)
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint; a fingerprint differing from `expected_fingerprint` is fatal."""
    path = Path(path)
    try:
        handle = open(path, "rb")
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e
    with handle:
        if handle.read(len(MAGIC)) != MAGIC:
            raise DataError(f"{path.name} is not an MTEVC checkpoint")
        (version,) = struct.unpack("<H", _read_exact(handle, 2))
        if version != VERSION:
            raise CompatibilityError(f"{path.name} has checkpoint format version {version}, expected {VERSION}")
        (fp_len,) = struct.unpack("<H", _read_exact(handle, 2))
        fingerprint = _read_exact(handle, fp_len).decode("ascii")
        if expected_fingerprint is not None and fingerprint != expected_fingerprint:
            raise CompatibilityError(
                f"{path.name} was trained under config {fingerprint[:12]}, current config is {expected_fingerprint[:12]}"
            )
        (count,) = struct.unpack("<I", _read_exact(handle, 4))
        arrays = OrderedDict(_read_record(handle) for _ in range(count))
        (opt_count,) = struct.unpack("<I", _read_exact(handle, 4))
        optimizer = OrderedDict(_read_record(handle) for _ in range(opt_count))
    return Checkpoint(fingerprint, arrays, optimizer)


def read_fingerprint(path) -> str:
    """Fingerprint only, so incompatible checkpoints fail before any weights are read."""
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            if handle.read(len(MAGIC)) != MAGIC:
                raise DataError(f"{path.name} is not an MTEVC checkpoint")
            _read_exact(handle, 2)
            (fp_len,) = struct.unpack("<H", _read_exact(handle, 2))
            return _read_exact(handle, fp_len).decode("ascii")
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e


class CheckpointKeeper:
    """Writes <prefix>_<step>.ckpt files and keeps only the newest `keep_last`."""

    def __init__(self, directory, prefix: str, keep_last: int = 3):
        self.directory = Path(directory)
        self.prefix = prefix
        self.keep_last = keep_last

    def path_for(self, step: int) -> Path:
        return self.directory / f"{self.prefix}_{step:08d}.ckpt"

    def existing(self):
        return sorted(self.directory.glob(f"{self.prefix}_*.ckpt"))

    def latest(self) -> Optional[Path]:
        found = self.existing()
        return found[-1] if found else None

    def save(self, step: int, fingerprint: str, arrays, state: Optional[AdamState] = None) -> Path:
        path = save_checkpoint(self.path_for(step), fingerprint, arrays, state)
        if self.keep_last > 0:
            for stale in self.existing()[: -self.keep_last]:
                stale.unlink()
        return path
