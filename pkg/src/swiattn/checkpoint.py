"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SWATCKPT"            8-byte magic
    u32 version
    u64 header_nbytes
    header                 UTF-8 JSON: config, step, tensor manifest, payload size and CRC32
    payload                raw little-endian float64 tensors at the manifest offsets
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, IncompatibleDonorError
from .model import ModelConfig, SwiAttnModel

MAGIC = b"SWATCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_OPTIM = "optim/"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    step: int = 0
    optimizer_state: dict | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> SwiAttnModel:
        model = SwiAttnModel.init(self.config)
        model.load_parameters(self.params)
        return model


def save_checkpoint(model: SwiAttnModel, path, step: int = 0, optimizer_state: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    tensors = dict(model.state_dict())
    for k, v in (optimizer_state or {}).items():
        tensors[_OPTIM + k] = np.asarray(v, dtype=np.float64)
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset,
                         "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"config": model.cfg.to_dict(), "step": int(step), "tensors": manifest,
                         "payload_nbytes": len(payload), "payload_crc32": zlib.crc32(payload),
                         "extra": extra or {}}, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(payload)
    return path


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Read and validate a checkpoint. If ``config`` is given, shapes must match it."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = blob[start + hlen:]
    if len(payload) != header["payload_nbytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {header['payload_nbytes']}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    stored_cfg = ModelConfig.from_dict(header["config"])
    params, optim = {}, {}
    for entry in header["tensors"]:
        if entry["dtype"] != "<f8":
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * 8 != entry["nbytes"] or entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: manifest entry {entry['name']} is inconsistent")
        arr = np.frombuffer(payload, dtype="<f8", count=int(np.prod(shape)), offset=entry["offset"])
        arr = arr.reshape(shape).astype(np.float64)
        if entry["name"].startswith(_OPTIM):
            optim[entry["name"][len(_OPTIM):]] = arr
        else:
            params[entry["name"]] = arr
    expected = SwiAttnModel.init(stored_cfg).named_parameters()
    for name, p in expected.items():
        if name not in params or params[name].shape != p.shape:
            raise CheckpointError(f"{path}: manifest does not match stored config at {name}")
    if config is not None:
        _check_compatible(stored_cfg, config, params)
    return Checkpoint(stored_cfg, params, header["step"], optim or None, header.get("extra", {}))


def _check_compatible(stored: ModelConfig, wanted: ModelConfig, params: dict) -> None:
    target = SwiAttnModel.init(wanted).named_parameters()
    for name, p in target.items():
        if ".router." in name and name not in params:
            continue
        if name not in params:
            raise IncompatibleDonorError(f"checkpoint lacks parameter {name}")
        if params[name].shape != p.shape:
            raise IncompatibleDonorError(f"{name}: checkpoint shape {params[name].shape} != config shape {p.shape}")


def load_model(path, config: ModelConfig | None = None) -> SwiAttnModel:
    return load_checkpoint(path, config).build_model()
