"""Binary checkpoint container.

Layout (little-endian)::

    b"MSCN" | version u16 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | extents u32 * rank
                | dtype u8 (0 = float64, 1 = float32) | raw payload
    config length u32 | UTF-8 ``key=value`` lines
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointSchemaError,
    CheckpointTruncatedError,
)
from .model import Model, ModelConfig, parameter_shapes
from .tensor import Tensor

MAGIC = b"MSCN"
VERSION = 1
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def _config_text(model: Model) -> str:
    items = dict(model.config.to_dict())
    items["mos_scale_min"] = repr(model.mos_scale[0])
    items["mos_scale_max"] = repr(model.mos_scale[1])
    return "".join(f"{k}={v}\n" for k, v in items.items())


def encode(model: Model, dtype: int = 0) -> bytes:
    if dtype not in DTYPES:
        raise ValueError(f"unknown dtype code {dtype}")
    out = [MAGIC, struct.pack("<HI", VERSION, len(model.params))]
    for name, t in model.params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(struct.pack("<B", dtype))
        out.append(np.ascontiguousarray(t.data, dtype=DTYPES[dtype]).tobytes())
    text = _config_text(model).encode("utf-8")
    out.append(struct.pack("<I", len(text)) + text)
    return b"".join(out)


def save_checkpoint(model: Model, path, dtype: int = 0):
    Path(path).write_bytes(encode(model, dtype))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.buf) - self.pos} remain")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse_config(text: str) -> tuple[ModelConfig, tuple[float, float]]:
    from .config import coerce

    values = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointSchemaError(f"malformed config line {line!r}")
        values[key.strip()] = value.strip()
    try:
        scale = (float(values.pop("mos_scale_min", 0.0)), float(values.pop("mos_scale_max", 1.0)))
        return ModelConfig(**coerce(ModelConfig, values)), scale
    except (ValueError, TypeError) as exc:
        raise CheckpointSchemaError(f"invalid config block: {exc}") from exc


def decode(buf: bytes) -> Model:
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise CheckpointMagicError("not an MSCN checkpoint (bad magic)")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointMagicError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("tensor name is not valid UTF-8") from exc
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        (code,) = r.unpack("<B")
        if code not in DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        dt = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).astype(np.float64).reshape(shape)
        tensors[name] = data
    (clen,) = r.unpack("<I")
    config, scale = _parse_config(r.take(clen).decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the config block")
    expected = parameter_shapes(config)
    missing = [k for k in expected if k not in tensors]
    extra = [k for k in tensors if k not in expected]
    if missing or extra:
        raise CheckpointSchemaError(f"parameter names do not match the config: "
                                    f"missing {missing}, unexpected {extra}")
    params = {}
    for name, (shape, _, _) in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointSchemaError(f"{name}: stored shape {tensors[name].shape}, "
                                        f"expected {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True)
    return Model(config, params, scale)


def load_checkpoint(path) -> Model:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode(buf)
