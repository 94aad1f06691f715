"""
Formatos de archivo del laboratorio (little-endian):

- RSV1 (volumen): magic, 3 x u32 dims (z, y, x), 3 x f32 spacing, 3 x f32 origin, voxels f32 con x más rápido.
- RSP1 (proyecciones): magic, bloque de geometría, u32 número de vistas,
  por vista (f64 ángulo, f64 tiempo, i32 fase), luego datos f32 por vista con u más rápido.
- CSV UTF-8 con cabecera y PGM de 16 bits para figuras.
- SHA256SUMS: manifiesto en formato sha256sum con rutas relativas al directorio de salida.
"""
from __future__ import annotations

import csv
import hashlib
import re
import struct
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from src.core.errors import IntegrityError, StorageError
from src.logger.logger_config import LoggerConfig
from src.services.phantom4d import Volume3D, Volume4D
from src.services.scanner import ProjectionSet, ScanGeometry

logger = LoggerConfig.get_logger(__name__)

RSV_MAGIC = b"RSV1"
RSP_MAGIC = b"RSP1"
_RSV_HEADER = struct.Struct("<4s3I3f3f")
# sad, sdd, size_u, size_v, offset_u, rotation_time, start_angle, nu, nv, views_per_turn, direction
_RSP_GEOMETRY = struct.Struct("<7d3Id")
_RSP_VIEW = struct.Struct("<ddi")
_U32 = struct.Struct("<I")


def read_bytes(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"No se pudo leer {path}: {e}") from e


def write_bytes(path: Path, payload: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise StorageError(f"No se pudo escribir {path}: {e}") from e
    return path


def encode_volume(volume: Volume3D) -> bytes:
    header = _RSV_HEADER.pack(RSV_MAGIC, *volume.shape, *map(float, volume.spacing), *map(float, volume.origin))
    return header + np.ascontiguousarray(volume.data, dtype="<f4").tobytes()


def decode_volume(payload: bytes, source: str = "<memoria>") -> Volume3D:
    if len(payload) < _RSV_HEADER.size:
        raise IntegrityError(f"Archivo RSV1 truncado: {source}")
    magic, nz, ny, nx, *rest = _RSV_HEADER.unpack_from(payload)
    if magic != RSV_MAGIC:
        raise IntegrityError(f"Magic inválido en {source}: {magic!r}")
    expected = _RSV_HEADER.size + 4 * nz * ny * nx
    if len(payload) != expected:
        raise IntegrityError(f"Tamaño RSV1 inesperado en {source}: {len(payload)} != {expected}")
    data = np.frombuffer(payload, dtype="<f4", offset=_RSV_HEADER.size).reshape(nz, ny, nx).astype(np.float32)
    return Volume3D(data=data, spacing=tuple(rest[:3]), origin=tuple(rest[3:]))


def write_volume(volume: Volume3D, path: Path) -> Path:
    write_bytes(path, encode_volume(volume))
    logger.debug(f"💾 Volumen {volume.shape} guardado en {path}")
    return Path(path)


def read_volume(path: Path) -> Volume3D:
    return decode_volume(read_bytes(path), str(path))


_PHASE_RE = re.compile(r"^(?P<prefix>.+?)(?P<index>\d+)\.rsv$")


def write_volume4d(volume: Volume4D, directory: Path, prefix: str = "f_phase") -> list[Path]:
    """Guarda cada fase como <prefix>{i}.rsv."""
    directory = Path(directory)
    return [write_volume(v, directory / f"{prefix}{i}.rsv") for i, v in enumerate(volume.phases)]


def read_volume4d(directory: Path, prefix: str = "f_phase") -> Volume4D:
    """Carga <prefix>0.rsv, <prefix>1.rsv, ... en orden de índice."""
    directory = Path(directory)
    found = {}
    if directory.is_dir():
        for p in directory.iterdir():
            m = _PHASE_RE.match(p.name)
            if m and m.group("prefix") == prefix:
                found[int(m.group("index"))] = p
    if not found:
        raise StorageError(f"No hay volúmenes {prefix}*.rsv en {directory}")
    if sorted(found) != list(range(len(found))):
        raise StorageError(f"Índices de fase no contiguos en {directory}: {sorted(found)}")
    return Volume4D(phases=tuple(read_volume(found[i]) for i in range(len(found))))


def encode_projections(projections: ProjectionSet) -> bytes:
    g = projections.geometry
    parts = [
        RSP_MAGIC,
        _RSP_GEOMETRY.pack(
            g.sad, g.sdd, *map(float, g.detector_size), g.detector_offset_u, g.rotation_time, g.start_angle,
            *g.detector_channels, g.views_per_turn, float(g.direction),
        ),
        _U32.pack(projections.n_views),
    ]
    parts.extend(
        _RSP_VIEW.pack(float(a), float(t), int(p))
        for a, t, p in zip(projections.angles, projections.times, projections.phases)
    )
    parts.append(np.ascontiguousarray(projections.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_projections(payload: bytes, source: str = "<memoria>") -> ProjectionSet:
    head = len(RSP_MAGIC) + _RSP_GEOMETRY.size + _U32.size
    if len(payload) < head:
        raise IntegrityError(f"Archivo RSP1 truncado: {source}")
    if payload[:4] != RSP_MAGIC:
        raise IntegrityError(f"Magic inválido en {source}: {payload[:4]!r}")
    sad, sdd, su, sv, off, rot, start, nu, nv, vpt, direction = _RSP_GEOMETRY.unpack_from(payload, 4)
    (m,) = _U32.unpack_from(payload, 4 + _RSP_GEOMETRY.size)
    expected = head + m * _RSP_VIEW.size + 4 * m * nv * nu
    if len(payload) != expected:
        raise IntegrityError(f"Tamaño RSP1 inesperado en {source}: {len(payload)} != {expected}")
    geometry = ScanGeometry(
        sad=sad, sdd=sdd, detector_size=(su, sv), detector_channels=(nu, nv), detector_offset_u=off,
        views_per_turn=vpt, rotation_time=rot, start_angle=start, direction=int(direction),
    )
    views = [_RSP_VIEW.unpack_from(payload, head + k * _RSP_VIEW.size) for k in range(m)]
    data_offset = head + m * _RSP_VIEW.size
    data = np.frombuffer(payload, dtype="<f4", offset=data_offset).reshape(m, nv, nu).astype(np.float32)
    angles = np.array([v[0] for v in views], dtype=np.float64)
    times = np.array([v[1] for v in views], dtype=np.float64)
    phases = np.array([v[2] for v in views], dtype=np.int32)
    return ProjectionSet(geometry=geometry, angles=angles, times=times, data=data, phases=phases)


def write_projections(projections: ProjectionSet, path: Path) -> Path:
    write_bytes(path, encode_projections(projections))
    logger.debug(f"💾 {projections.n_views} vistas guardadas en {path}")
    return Path(path)


def read_projections(path: Path) -> ProjectionSet:
    return decode_projections(read_bytes(path), str(path))


def write_csv(rows: Iterable[Mapping], path: Path, fieldnames: Sequence[str]) -> Path:
    """CSV UTF-8 con cabecera; los flotantes se escriben con repr para ser reproducibles."""
    path = Path(path)

    def _fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        if isinstance(v, np.integer):
            return int(v)
        return v

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(row[k]) for k in fieldnames})
    except OSError as e:
        raise StorageError(f"No se pudo escribir {path}: {e}") from e
    return path


def read_csv(path: Path) -> list[dict]:
    try:
        with Path(path).open("r", newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise StorageError(f"No se pudo leer {path}: {e}") from e


def write_pgm(image: np.ndarray, path: Path, vmin: Optional[float] = None, vmax: Optional[float] = None) -> Path:
    """Exporta un corte 2D como PGM de 16 bits escalando [vmin, vmax] a [0, 65535]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise StorageError(f"write_pgm requiere una imagen 2D, recibido {image.shape}")
    vmin = float(image.min()) if vmin is None else vmin
    vmax = float(image.max()) if vmax is None else vmax
    scale = 65535.0 / (vmax - vmin) if vmax > vmin else 0.0
    pixels = np.clip(np.round((image - vmin) * scale), 0, 65535).astype(np.uint16)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels.astype(np.int32)).save(path, format="PPM")
    except OSError as e:
        raise StorageError(f"No se pudo escribir {path}: {e}") from e
    return path


def read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im).astype(np.uint16)
    except OSError as e:
        raise StorageError(f"No se pudo leer {path}: {e}") from e


# --- Manifiesto de sumas SHA-256 ---
CHECKSUM_FILE = "SHA256SUMS"
_CHECKSUM_LINE = re.compile(r"^([0-9a-f]{64}) [ *](.+)$")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    try:
        with Path(path).open("rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as e:
        raise StorageError(f"No se pudo leer {path}: {e}") from e
    return digest.hexdigest()


def read_checksums(root: Path) -> dict[str, str]:
    """Entradas {ruta relativa: hex} del manifiesto de `root`; vacío si no existe."""
    path = Path(root) / CHECKSUM_FILE
    if not path.is_file():
        return {}
    entries = {}
    for n, line in enumerate(read_bytes(path).decode("utf-8").splitlines(), start=1):
        match = _CHECKSUM_LINE.match(line)
        if match is None:
            raise IntegrityError(f"Línea {n} inválida en {path}")
        entries[match.group(2)] = match.group(1)
    return entries


def update_checksums(root: Path, paths: Iterable[Path]) -> Path:
    """
    Añade o reemplaza en `root/SHA256SUMS` las sumas de `paths` (archivos bajo `root`).

    Las entradas se ordenan por ruta, así que el manifiesto es idéntico entre
    corridas con los mismos archivos. Verificable con `sha256sum -c SHA256SUMS`.
    """
    root = Path(root)
    entries = read_checksums(root)
    for p in paths:
        p = Path(p)
        try:
            rel = p.resolve().relative_to(root.resolve()).as_posix()
        except ValueError as e:
            raise StorageError(f"{p} no está dentro de {root}") from e
        entries[rel] = sha256_file(p)
    text = "".join(f"{digest}  {rel}\n" for rel, digest in sorted(entries.items()))
    path = write_bytes(root / CHECKSUM_FILE, text.encode("utf-8"))
    logger.debug(f"🔏 {len(entries)} sumas SHA-256 en {path}")
    return path


def verify_checksums(root: Path) -> int:
    """Comprueba cada entrada del manifiesto; IntegrityError ante la primera discrepancia."""
    root = Path(root)
    entries = read_checksums(root)
    if not entries:
        raise StorageError(f"No hay manifiesto {CHECKSUM_FILE} en {root}")
    for rel, digest in entries.items():
        target = root / rel
        if not target.is_file():
            raise IntegrityError(f"Falta {rel} listado en {CHECKSUM_FILE}")
        if sha256_file(target) != digest:
            raise IntegrityError(f"Suma SHA-256 distinta para {rel}")
    return len(entries)
