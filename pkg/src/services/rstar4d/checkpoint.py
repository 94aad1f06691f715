"""
Checkpoints RSC1 (little-endian):

    magic "RSC1" | u32 versión | u32 longitud + cabecera JSON (claves ordenadas)
    | u32 número de capas | por capa: u16 longitud + nombre UTF-8, u8 ndim, ndim x u32 dims, u64 offset
    | datos en el dtype de la cabecera (f32 o f64) | u8 flag optimizador
    [+ u64 paso, 3 x f64 hiper, momentos m y v en el mismo dtype]
    | u32 CRC32 de todo lo anterior
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from src.core.errors import DomainError, IntegrityError
from src.logger.logger_config import LoggerConfig
from src.services.rstar4d.network import Network
from src.services.rstar4d.optim import AdamState
from src.services.storage import read_bytes, write_bytes

logger = LoggerConfig.get_logger(__name__)

RSC_MAGIC = b"RSC1"
RSC_VERSION = 1
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_HYPER = struct.Struct("<Q3d")
_WIRE_DTYPES = {"float32": "<f4", "float64": "<f8"}


def encode_checkpoint(net: Network, state: Optional[AdamState] = None, meta: Optional[dict] = None) -> bytes:
    if net.dtype.name not in _WIRE_DTYPES:
        raise DomainError(f"dtype de red no soportado en RSC1: {net.dtype}")
    wire = _WIRE_DTYPES[net.dtype.name]
    params = net.parameters()
    names = sorted(params)
    header = {"network": net.config(), "mode": net.mode, "dtype": net.dtype.name, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [RSC_MAGIC, _U32.pack(RSC_VERSION), _U32.pack(len(head)), head, _U32.pack(len(names))]
    offset = 0
    for name in names:
        raw = name.encode("utf-8")
        shape = params[name].shape
        parts += [_U16.pack(len(raw)), raw, _U8.pack(len(shape)), struct.pack(f"<{len(shape)}I", *shape), _U64.pack(offset)]
        offset += params[name].size
    parts += [np.ascontiguousarray(params[n], dtype=wire).tobytes() for n in names]
    if state is None:
        parts.append(_U8.pack(0))
    else:
        parts += [_U8.pack(1), _HYPER.pack(state.step, state.beta1, state.beta2, state.eps)]
        parts += [np.ascontiguousarray(state.m[n], dtype=wire).tobytes() for n in names]
        parts += [np.ascontiguousarray(state.v[n], dtype=wire).tobytes() for n in names]
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload, self.pos, self.source = payload, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise IntegrityError(f"Checkpoint RSC1 truncado: {self.source}")
        chunk = self.payload[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def floats(self, count: int, wire: str) -> np.ndarray:
        dtype = np.dtype(wire)
        return np.frombuffer(self.take(dtype.itemsize * count), dtype=dtype).astype(dtype.newbyteorder("="))


def decode_checkpoint(payload: bytes, source: str = "<memoria>") -> tuple[Network, Optional[AdamState], dict]:
    if len(payload) < 8 or payload[:4] != RSC_MAGIC:
        raise IntegrityError(f"Magic inválido o archivo truncado en {source}")
    body, (crc,) = payload[:-4], _U32.unpack(payload[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError(f"CRC32 inválido en {source}")
    r = _Reader(body, source)
    r.take(4)
    (version,) = r.unpack(_U32)
    if version != RSC_VERSION:
        raise IntegrityError(f"Versión RSC1 no soportada: {version}")
    (hlen,) = r.unpack(_U32)
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        cfg = header["network"]
        dtype = header.get("dtype", "float32")
        wire = _WIRE_DTYPES[dtype]
    except (ValueError, KeyError) as e:
        raise IntegrityError(f"Cabecera RSC1 inválida en {source}: {e}") from e

    net = Network(cfg["levels"], cfg["channels"], cfg["residual"], cfg["in_channels"], cfg["block_type"], dtype=dtype)
    if header.get("mode", "full") != "full":
        net.set_mode(header["mode"])
    params = net.parameters()

    (count,) = r.unpack(_U32)
    table = []
    for _ in range(count):
        (nlen,) = r.unpack(_U16)
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack(_U8)
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        r.unpack(_U64)
        table.append((name, shape))
    if sorted(params) != [n for n, _ in table]:
        raise IntegrityError(f"Tabla de capas incompatible con la arquitectura en {source}")
    for name, shape in table:
        if params[name].shape != tuple(shape):
            raise IntegrityError(f"Dimensiones de {name} inválidas en {source}: {shape}")
        params[name][...] = r.floats(params[name].size, wire).reshape(shape)

    state = None
    (flag,) = r.unpack(_U8)
    if flag:
        step, b1, b2, eps = r.unpack(_HYPER)
        state = AdamState(step=int(step), beta1=b1, beta2=b2, eps=eps)
        for key in ("m", "v"):
            store = getattr(state, key)
            for name, shape in table:
                store[name] = r.floats(int(np.prod(shape)), wire).reshape(shape)
    if r.pos != len(body):
        raise IntegrityError(f"Bytes sobrantes en {source}")
    return net, state, header.get("meta", {})


def save_checkpoint(net: Network, state: Optional[AdamState], path: Path, meta: Optional[dict] = None) -> Path:
    path = write_bytes(path, encode_checkpoint(net, state, meta))
    logger.debug(f"💾 Checkpoint guardado en {path}")
    return path


def load_checkpoint(path: Path) -> tuple[Network, Optional[AdamState], dict]:
    net, state, meta = decode_checkpoint(read_bytes(path), str(path))
    logger.debug(f"📂 Checkpoint cargado de {path} (modo {net.mode})")
    return net, state, meta
