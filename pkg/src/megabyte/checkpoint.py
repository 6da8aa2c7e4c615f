"""Binary checkpoint format.

Layout (all integers little-endian):
  magic "MBCP" | u32 version | u32 config length | config key=value text |
  u32 tensor count | per tensor: u16 name length, UTF-8 name, u8 rank,
  u32 dims, u8 dtype code (0=f64, 1=f32), raw little-endian IEEE-754 data.

Round trips are bit-exact, and the tensor name set must match the config's
expected parameter inventory on load.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import config_to_text, configs_from_values, parse_config_text
from .model import ModelConfig, Parameters, parameter_spec
from .tensor import Tensor
from .training import TrainConfig

MAGIC = b"MBCP"
VERSION = 1

_DTYPE_BY_CODE = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_BY_KIND = {"float64": 0, "float32": 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model_cfg: ModelConfig, train_cfg: TrainConfig,
                    params: Parameters, window_stride: int = 0) -> None:
    config_text = config_to_text(model_cfg, train_cfg, window_stride).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_text)))
        fh.write(config_text)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", t.data.ndim))
            for dim in t.data.shape:
                fh.write(struct.pack("<I", dim))
            code = _CODE_BY_KIND[t.data.dtype.name]
            fh.write(struct.pack("<B", code))
            fh.write(np.ascontiguousarray(t.data, dtype=_DTYPE_BY_CODE[code]).tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated payload")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[ModelConfig, TrainConfig, Parameters, int]:
    """Read a checkpoint, rebuild the configs and the parameter set, and
    verify the tensor inventory against the model config."""
    with open(path, "rb") as fh:
        blob = fh.read()
    rd = _Reader(blob)
    if rd.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = rd.u32()
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {VERSION}")
    config_text = rd.take(rd.u32()).decode("utf-8")
    model_cfg, train_cfg, stride = configs_from_values(parse_config_text(config_text))

    decay_by_name = {name: decay for name, _, decay, _ in parameter_spec(model_cfg)}
    count = rd.u32()
    params = Parameters()
    for _ in range(count):
        name = rd.take(rd.u16()).decode("utf-8")
        rank = rd.u8()
        shape = tuple(rd.u32() for _ in range(rank))
        code = rd.u8()
        if code not in _DTYPE_BY_CODE:
            raise CheckpointError(f"unknown dtype code {code}")
        dtype = _DTYPE_BY_CODE[code]
        n = 1
        for dim in shape:
            n *= dim
        data = np.frombuffer(rd.take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        if name not in decay_by_name:
            raise CheckpointError(f"unexpected tensor {name!r} for this config")
        native = data.astype(np.float64 if code == 0 else np.float32)
        params.add(name, Tensor(native), decay_by_name[name])
    if rd.pos != len(blob):
        raise CheckpointError("trailing bytes after the last tensor")
    params.check_against(model_cfg)
    return model_cfg, train_cfg, params, stride
