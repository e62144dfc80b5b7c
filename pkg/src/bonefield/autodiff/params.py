"""Named parameter storage and the checkpoint container.

Checkpoint format (documented contract, round-trips bit-exactly):

    bytes 0..7    magic b"BFLDCKP1"
    bytes 8..15   little-endian uint64 header length H
    bytes 16..16+H  UTF-8 JSON header:
                    {"entries": [{"name": str, "shape": [int, ...]}, ...],
                     "meta": {...}}
    remainder     for each entry, in listed order, the row-major float64
                  little-endian payload

Entries are sorted by name, JSON keys are sorted, and no timestamps are
written, so identical state always serializes to identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .tensor import Tensor

_MAGIC = b"BFLDCKP1"
_ADAM_M = "_adam_m/"
_ADAM_V = "_adam_v/"


class ParameterStore:
    """Flat map of parameter path -> Tensor plus per-parameter Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_step = 0

    def param(self, name, init):
        if name in self.params:
            raise ValueError(f"duplicate parameter path: {name}")
        t = Tensor(np.array(init, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self.adam_m[name] = np.zeros(t.shape)
        self.adam_v[name] = np.zeros(t.shape)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def total_size(self):
        return sum(t.size for t in self.params.values())

    # -- serialization --------------------------------------------------------

    def save(self, path, meta=None):
        arrays = {name: self.params[name].data for name in self.params}
        for name in self.adam_m:
            arrays[_ADAM_M + name] = self.adam_m[name]
            arrays[_ADAM_V + name] = self.adam_v[name]
        full_meta = dict(meta or {})
        full_meta["adam_step"] = self.adam_step
        write_checkpoint(path, arrays, full_meta)

    def load(self, path, strict=True):
        """Restore parameter values and optimizer state in place."""
        arrays, meta = read_checkpoint(path)
        saved_params = {n for n in arrays
                        if not n.startswith((_ADAM_M, _ADAM_V))}
        if strict and saved_params != set(self.params):
            missing = sorted(set(self.params) - saved_params)
            extra = sorted(saved_params - set(self.params))
            raise KeyError(f"checkpoint mismatch: missing={missing} extra={extra}")
        for name in saved_params & set(self.params):
            t = self.params[name]
            if arrays[name].shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arrays[name].shape} vs {t.shape}")
            t.data = arrays[name]
            t.grad = None
            if _ADAM_M + name in arrays:
                self.adam_m[name] = arrays[_ADAM_M + name]
                self.adam_v[name] = arrays[_ADAM_V + name]
        self.adam_step = int(meta.get("adam_step", 0))
        return meta


def write_checkpoint(path, arrays, meta=None):
    entries = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        entries.append((name, arr))
    header = {
        "entries": [{"name": n, "shape": list(a.shape)} for n, a in entries],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in entries:
            f.write(arr.astype("<f8", copy=False).tobytes())


def read_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        arrays = {}
        for ent in header["entries"]:
            shape = tuple(ent["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            arrays[ent["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return arrays, header.get("meta", {})
