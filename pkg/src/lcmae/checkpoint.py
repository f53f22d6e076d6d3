"""Binary checkpoint format with per-record CRC32 verification.

Layout ("LCMAE1"):
  magic (6 bytes) | version u8 | header_len u32 | header json | header crc u32
  then records:  name_len u16 | name utf8 | ndim u8 | dims u32* |
                 payload (little-endian float64) | payload crc u32

The header json carries the ViT and guidance configs, the step counter, and
the record count. load(save(state)) is bitwise identical.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError
from .model import (GuidanceConfig, ModelState, _leaf_arrays, _set_leaf,
                    flatten_params, init_model, online_tree)
from .vit import ViTConfig

_MAGIC = b"LCMAE1"
_VERSION = 1


def _state_arrays(state: ModelState) -> dict[str, np.ndarray]:
    arrays = dict(_leaf_arrays(online_tree(state)))
    arrays.update(_leaf_arrays(state.target, "target"))
    return arrays


def save_checkpoint(state: ModelState, path: str, opt_state=None, step: int = 0):
    arrays = _state_arrays(state)
    if opt_state is not None:
        for k, a in opt_state.m.items():
            arrays[f"opt.m.{k}"] = a
        for k, a in opt_state.v.items():
            arrays[f"opt.v.{k}"] = a
    header = {
        "vit": dataclasses.asdict(state.vit),
        "guidance": dataclasses.asdict(state.guidance),
        "step": int(step),
        "opt_step": int(opt_state.step) if opt_state is not None else 0,
        "has_opt": opt_state is not None,
        "n_records": len(arrays),
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<B", _VERSION))
        f.write(struct.pack("<I", len(hdr)))
        f.write(hdr)
        f.write(struct.pack("<I", zlib.crc32(hdr)))
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name], dtype="<f8")
            nm = name.encode()
            f.write(struct.pack("<H", len(nm)))
            f.write(nm)
            f.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            payload = a.tobytes()
            f.write(payload)
            f.write(struct.pack("<I", zlib.crc32(payload)))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path: str):
    """Returns (ModelState, OptimizerState | None, step)."""
    from .trainer import OptimizerState

    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob, path)
    if r.take(6, "magic") != _MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u8("version")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    hdr_len = r.u32("header length")
    hdr_raw = r.take(hdr_len, "header")
    crc = r.u32("header checksum")
    if zlib.crc32(hdr_raw) != crc:
        raise CheckpointError(f"{path}: header checksum mismatch")
    try:
        header = json.loads(hdr_raw)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: header is not valid json: {e}") from e

    arrays: dict[str, np.ndarray] = {}
    for _ in range(header["n_records"]):
        nm_len = r.u16("record name length")
        name = r.take(nm_len, "record name").decode("utf-8", errors="replace")
        ndim = r.u8(f"ndim of {name!r}")
        shape = tuple(r.u32(f"dim of {name!r}") for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        payload = r.take(8 * count, f"payload of {name!r}")
        rec_crc = r.u32(f"checksum of {name!r}")
        if zlib.crc32(payload) != rec_crc:
            raise CheckpointError(f"{path}: checksum mismatch in record {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    if r.off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.off} trailing bytes")

    vit_cfg = ViTConfig(**header["vit"])
    gcfg_fields = dict(header["guidance"])
    guid_cfg = GuidanceConfig(**gcfg_fields)
    state = init_model(vit_cfg, guid_cfg, seed=0)

    leaves = dict(flatten_params(online_tree(state)))
    leaves.update(flatten_params(state.target, "target"))
    opt = OptimizerState(step=header.get("opt_step", 0)) if header.get("has_opt") else None
    for name, a in arrays.items():
        if name.startswith("opt.m."):
            if opt is not None:
                opt.m[name[6:]] = a
            continue
        if name.startswith("opt.v."):
            if opt is not None:
                opt.v[name[6:]] = a
            continue
        if name not in leaves:
            raise CheckpointError(f"{path}: unknown parameter record {name!r}")
        leaf = leaves[name]
        if hasattr(leaf, "data") and leaf.data.shape != a.shape:
            raise CheckpointError(f"{path}: shape mismatch in record {name!r}")
        _set_leaf(leaf, name, a)
    return state, opt, header["step"]
