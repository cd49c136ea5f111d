"""
Checkpoint container

Layout (all integers little-endian):

    magic      8 bytes   b'HGRNCKPT'
    version    u32       FORMAT_VERSION
    cfg_len    u32       length of the config document
    cfg        cfg_len bytes, UTF-8 JSON of the full ModelConfig (sorted keys)
    count      u32       number of tensors
    count times:
        name_len  u16, name (UTF-8)
        ndim      u8, dims (u32 each)
        values    float32 x prod(dims), row-major

Tensors are written in the model's fixed parameter order.
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np

from lib.errors import CheckpointError, ConfigError
from lib.model import HGRN, ModelConfig, init_params
from lib.tensor import get_dtype

logger = logging.getLogger(__name__)

MAGIC = b'HGRNCKPT'
FORMAT_VERSION = 1


def encode_checkpoint(model):
    cfg_bytes = json.dumps(model.cfg.to_dict(), sort_keys=True, separators=(',', ':')).encode('utf-8')
    named = model.parameters()
    chunks = [MAGIC, struct.pack('<II', FORMAT_VERSION, len(cfg_bytes)), cfg_bytes, struct.pack('<I', len(named))]
    for name, tensor in named.items():
        raw_name = name.encode('utf-8')
        shape = tensor.shape
        chunks.append(struct.pack('<H', len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack(f'<B{len(shape)}I', len(shape), *shape))
        chunks.append(np.ascontiguousarray(tensor.values, dtype='<f4').tobytes())
    return b''.join(chunks)


def save_checkpoint(path, model):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(model)
    with open(path, 'wb') as f:
        f.write(data)
    logger.info(f"Checkpoint saved to {path} ({len(data)} bytes)")
    return path


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data, expected_cfg=None):
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an HGRN checkpoint (bad magic)")
    version, cfg_len = reader.unpack('<II')
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        cfg = ModelConfig.from_dict(json.loads(reader.take(cfg_len).decode('utf-8')))
    except (ValueError, TypeError, ConfigError) as e:
        raise CheckpointError(f"checkpoint config is unreadable: {e}")
    if expected_cfg is not None and expected_cfg != cfg:
        raise CheckpointError(f"checkpoint config {cfg} does not match the run config {expected_cfg}")

    params = init_params(cfg, seed=0)
    named = params.named()
    (count,) = reader.unpack('<I')
    if count != len(named):
        raise CheckpointError(f"checkpoint holds {count} tensors, the configuration needs {len(named)}")
    seen = set()
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        if name not in named:
            raise CheckpointError(f"unexpected tensor '{name}' in checkpoint")
        target = named[name]
        if tuple(shape) != target.shape:
            raise CheckpointError(f"tensor '{name}' has shape {list(shape)}, expected {list(target.shape)}")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(shape)
        target.values = values.astype(get_dtype())
        target.zero_grad()
        seen.add(name)
    if reader.offset != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    missing = set(named) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return HGRN(cfg, params)


def load_checkpoint(path, expected_cfg=None):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, 'rb') as f:
        data = f.read()
    model = decode_checkpoint(data, expected_cfg)
    logger.info(f"Checkpoint loaded from {path}")
    return model
