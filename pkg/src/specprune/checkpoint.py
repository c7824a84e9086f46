"""Bit-exact binary checkpoint format.

Layout, all little-endian:

    offset 0   magic "SDFP" (4 bytes)
    offset 4   u32 version (currently 1)
    offset 8   7 x u32 config fields, in order:
               vocab_size, d_model, n_heads, n_layers, d_ff, max_context, rng_seed
    offset 36  active-sublayer bitmap, ceil(2*n_layers / 8) bytes;
               bit (2*layer + 0) = attention, bit (2*layer + 1) = FFN,
               LSB-first within each byte
    then       parameters as float32, in the fixed layout order documented
               by ``model._param_layout``

Weights are stored as float32 regardless of the in-memory dtype, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig, SublayerId, SublayerKind, _param_layout
from .tensor import Tensor

MAGIC = b"SDFP"
VERSION = 1

_CONFIG_FIELDS = ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_context", "rng_seed")


def _mask_to_bitmap(config: ModelConfig, active_mask) -> bytes:
    nbits = 2 * config.n_layers
    bitmap = bytearray((nbits + 7) // 8)
    for sub in active_mask:
        bit = 2 * sub.layer_index + (0 if sub.kind is SublayerKind.ATTENTION else 1)
        bitmap[bit // 8] |= 1 << (bit % 8)
    return bytes(bitmap)


def _bitmap_to_mask(config: ModelConfig, bitmap: bytes) -> frozenset[SublayerId]:
    mask = set()
    for layer in range(config.n_layers):
        for offset, kind in ((0, SublayerKind.ATTENTION), (1, SublayerKind.FFN)):
            bit = 2 * layer + offset
            if bitmap[bit // 8] >> (bit % 8) & 1:
                mask.add(SublayerId(layer, kind))
    return frozenset(mask)


def checkpoint_bytes(model: Model) -> bytes:
    cfg = model.config
    header = MAGIC + struct.pack("<I", VERSION)
    header += struct.pack("<7I", *(getattr(cfg, f) for f in _CONFIG_FIELDS))
    header += _mask_to_bitmap(cfg, model.active_mask)
    return header + model.param_bytes()


def write_atomic(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory plus rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Model, path: str) -> None:
    write_atomic(path, checkpoint_bytes(model))


def load_checkpoint(path: str) -> Model:
    """Read a checkpoint; the returned model is float32."""
    with open(path, "rb") as f:
        blob = f.read()
    return checkpoint_from_bytes(blob)


def checkpoint_from_bytes(blob: bytes) -> Model:
    if len(blob) < 8:
        raise FormatError("checkpoint truncated inside the fixed header", offset=len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", offset=4)
    pos = 8
    if len(blob) < pos + 28:
        raise FormatError("checkpoint truncated inside the config block", offset=len(blob))
    fields = struct.unpack_from("<7I", blob, pos)
    pos += 28
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, fields)))
    try:
        config.validate()
    except Exception as exc:
        raise FormatError(f"invalid config in header: {exc}", offset=8) from exc
    bitmap_len = (2 * config.n_layers + 7) // 8
    if len(blob) < pos + bitmap_len:
        raise FormatError("checkpoint truncated inside the mask bitmap", offset=len(blob))
    mask = _bitmap_to_mask(config, blob[pos : pos + bitmap_len])
    pos += bitmap_len
    params: dict[str, Tensor] = {}
    for key, shape in _param_layout(config):
        count = int(np.prod(shape))
        nbytes = 4 * count
        if len(blob) < pos + nbytes:
            raise FormatError(f"checkpoint truncated inside parameter {key!r}", offset=len(blob))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        params[key] = Tensor._wrap(arr.astype(np.float32, copy=True))
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after the last parameter", offset=pos)
    return Model(config, params, mask)
