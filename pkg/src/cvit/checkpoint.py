"""Binary checkpoint format.

Layout: 8-byte magic "CVITCKPT", little-endian u32 format version,
little-endian u64 JSON header length, the UTF-8 JSON header, then the raw
little-endian array payload. The header carries the config digest, the
step counter, a manifest of (name, shape, dtype, offset) for parameters
and optional optimizer-state arrays, and per-parameter optimizer step
counters. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"CVITCKPT"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def _dtype_name(arr) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise DataError(f"checkpoint arrays must be f32/f64, got {arr.dtype}")


def save(path, params: dict[str, np.ndarray], config_digest: str, step: int,
         stage: str = "", opt_state: dict | None = None):
    """opt_state: {param_name: {"m": arr, ...,"step": int}} slot dicts."""
    manifest, payload = [], []
    offset = 0

    def push(section, name, arr):
        nonlocal offset
        code = _dtype_name(arr)
        raw = np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes()
        section.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
        payload.append(raw)
        offset += len(raw)

    for name in sorted(params):
        push(manifest, name, params[name])

    opt_entries, opt_steps = [], {}
    if opt_state:
        for pname in sorted(opt_state):
            for slot, value in sorted(opt_state[pname].items()):
                if slot == "step":
                    opt_steps[pname] = int(value)
                else:
                    push(opt_entries, f"{pname}/{slot}", value)

    header = {
        "config_digest": config_digest,
        "step": int(step),
        "stage": stage,
        "params": manifest,
        "opt_state": {"entries": opt_entries, "steps": opt_steps} if opt_state else None,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payload:
            fh.write(raw)
    return out


def load(path):
    """Returns (params dict, header dict, opt_state dict-or-None)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version > VERSION:
        raise DataError(f"{path}: format version {version} is newer than supported {VERSION}")
    (hlen,) = struct.unpack_from("<Q", raw, 12)
    header = json.loads(raw[20 : 20 + hlen].decode())
    base = 20 + hlen

    def pull(entry):
        code = entry["dtype"]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(raw, dtype=_DTYPES[code], count=count, offset=base + entry["offset"])
        return arr.reshape(entry["shape"]).astype(_DTYPES[code].lstrip("<")).copy()

    params = {e["name"]: pull(e) for e in header["params"]}
    opt_state = None
    if header.get("opt_state"):
        opt_state = {}
        for e in header["opt_state"]["entries"]:
            pname, _, slot = e["name"].rpartition("/")
            opt_state.setdefault(pname, {})[slot] = pull(e)
        for pname, t in header["opt_state"]["steps"].items():
            opt_state.setdefault(pname, {})["step"] = int(t)
    return params, header, opt_state


def check_digest(header: dict, expected: str, path, force: bool):
    if header["config_digest"] != expected and not force:
        raise DataError(
            f"{path}: config digest {header['config_digest'][:12]} does not match current "
            f"{expected[:12]}; pass --force to override"
        )
