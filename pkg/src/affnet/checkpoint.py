"""Binary checkpoints: magic, header length, JSON header, little-endian float32 blob."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

MAGIC = b"AFFNETCK"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_checkpoint(params: ModelParams, path) -> Path:
    """Write ``params`` as float32.  Float32 parameters round-trip bit-exactly."""
    names = sorted(params.tensors)
    entries, offset = [], 0
    for name in names:
        shape = list(params.tensors[name].shape)
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        entries.append({"name": name, "shape": shape, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "config": params.config.to_dict(),
                         "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(params.tensors[name].data, dtype=_LE_F32).tobytes())
    return path


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ContractError(f"{path}: not an affnet checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + hlen])
    except ValueError as exc:
        raise ContractError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    blob = memoryview(raw)[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        if e["offset"] + e["nbytes"] > len(blob):
            raise ContractError(f"{path}: truncated tensor '{e['name']}'")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=e["nbytes"] // 4, offset=e["offset"])
        tensors[e["name"]] = Tensor(arr.astype(np.float32).reshape(e["shape"]), requires_grad=True)
    return ModelParams(ModelConfig.from_dict(header["config"]), tensors)
