"""On-disk formats: a small tensor container, CSV traces and JSON configs.

Container layout::

    magic  b"OSDNTNS1"
    u64    header length (little endian)
    header UTF-8 JSON {"type", "attrs", "fields": [{"name","dtype","shape","layout","offset","nbytes"}]}
    payload  concatenated C-order little-endian arrays

Round trips are bit-exact: payloads are raw bytes, scalars are stored as
``float.hex`` strings.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .types import (
    FastWeightState,
    GateSequence,
    PreconditionerState,
    ResidualTrace,
    StreamError,
    TokenStream,
    WriteKeySequence,
)

MAGIC = b"OSDNTNS1"

_LAYOUTS = {
    "queries": "BTHK", "keys": "BTHK", "values": "BTHV", "betas": "BTH",
    "d": "BHK", "alpha_scalar": "BTH", "alpha_vector": "BTHK", "retention": "BTH",
    "write_keys": "BTHK", "d_final": "BHK", "d_trajectory": "BTHK", "clamped": "BTHK",
    "f_before": "BTH", "f_after": "BTH", "grad_norm_sq": "BTH", "q": "BTH", "degenerate": "BTH",
}

_TYPES = {
    cls.__name__: cls
    for cls in (TokenStream, PreconditionerState, FastWeightState, GateSequence, WriteKeySequence, ResidualTrace)
}


def _encode_attr(v):
    if isinstance(v, float):
        return {"float": v.hex()}
    return v


def _decode_attr(v):
    if isinstance(v, dict) and "float" in v:
        return float.fromhex(v["float"])
    return v


def to_bytes(obj) -> bytes:
    name = type(obj).__name__
    if name not in _TYPES:
        raise TypeError(f"cannot serialise {name}")
    fields, attrs, chunks = [], {}, []
    offset = 0
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value)
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes(order="C")
            layout = "BHVK" if f.name == "S" and obj.orientation == "VxK" else "BHKV" if f.name == "S" else _LAYOUTS.get(f.name, "")
            fields.append({"name": f.name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                           "layout": layout, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        elif value is None:
            attrs[f.name] = None
        else:
            attrs[f.name] = _encode_attr(float(value) if isinstance(value, (float, np.floating)) else value)
    header = json.dumps({"type": name, "attrs": attrs, "fields": fields}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def from_bytes(data: bytes):
    if data[:8] != MAGIC:
        raise StreamError("not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode())
    payload = memoryview(data)[16 + hlen:]
    kwargs = {k: _decode_attr(v) for k, v in header["attrs"].items()}
    for f in header["fields"]:
        buf = payload[f["offset"]:f["offset"] + f["nbytes"]]
        kwargs[f["name"]] = np.frombuffer(buf, dtype=np.dtype(f["dtype"])).reshape(f["shape"]).copy()
    try:
        cls = _TYPES[header["type"]]
    except KeyError:
        raise StreamError(f"unknown container type {header['type']!r}") from None
    return cls(**kwargs)


def save(path, obj) -> None:
    Path(path).write_bytes(to_bytes(obj))


def load(path):
    return from_bytes(Path(path).read_bytes())


TRACE_COLUMNS = ("b", "t", "h", "f_before", "f_after", "grad_norm_sq", "q", "degenerate", "position_bin")


def write_trace_csv(path, trace: ResidualTrace, n_bins: int = 8) -> None:
    """One row per ``(b, t, h)`` in that order; floats in ``repr`` form so they parse back exactly."""
    bins = trace.position_bin(n_bins)
    B, T, H = trace.q.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for b in range(B):
            for t in range(T):
                for h in range(H):
                    w.writerow([b, t, h, repr(float(trace.f_before[b, t, h])), repr(float(trace.f_after[b, t, h])),
                                repr(float(trace.grad_norm_sq[b, t, h])), repr(float(trace.q[b, t, h])),
                                int(trace.degenerate[b, t, h]), int(bins[t])])


def read_trace_csv(path) -> ResidualTrace:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    B = max(int(r["b"]) for r in rows) + 1
    T = max(int(r["t"]) for r in rows) + 1
    H = max(int(r["h"]) for r in rows) + 1
    arrs = {k: np.empty((B, T, H)) for k in ("f_before", "f_after", "grad_norm_sq", "q")}
    deg = np.empty((B, T, H), bool)
    for r in rows:
        idx = (int(r["b"]), int(r["t"]), int(r["h"]))
        for k in arrs:
            arrs[k][idx] = float(r[k])
        deg[idx] = bool(int(r["degenerate"]))
    return ResidualTrace(degenerate=deg, **arrs)


def load_config(cls, path=None, overrides=None):
    """Build a config dataclass: defaults, then the JSON file, then non-``None`` overrides."""
    values = {}
    names = {f.name for f in dataclasses.fields(cls)}
    if path is not None:
        data = json.loads(Path(path).read_text())
        unknown = set(data) - names
        if unknown:
            raise StreamError(f"unknown config fields {sorted(unknown)}")
        values.update(data)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    for f in dataclasses.fields(cls):
        if f.name in values and isinstance(values[f.name], list):
            values[f.name] = tuple(values[f.name])
    return cls(**values)


def dump_config(cfg) -> str:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True, indent=2)
