"""
Fantomas torácicos 4D: elipsoides cuya posición y tamaño siguen la amplitud
respiratoria (0 = fin de espiración, 1 = fin de inspiración).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.spatial.transform import Rotation

from src.core.config import PhantomSettings, get_settings
from src.core.errors import DomainError
from src.logger.logger_config import LoggerConfig

logger = LoggerConfig.get_logger(__name__)

AIR_HU = -1000.0
WATER_HU = 0.0

Vec3 = tuple[float, float, float]


class Ellipsoid(BaseModel):
    """Elipsoide del fantoma; vectores físicos en orden (x, y, z) mm."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="Etiqueta anatómica (torso, lung_r, tumor...)")
    center: Vec3 = Field(..., description="Centro a amplitud 0 (mm)")
    semi_axes: Vec3 = Field(..., description="Semiejes a amplitud 0 (mm)")
    value: float = Field(..., ge=-1000.0, le=1500.0, description="Valor en HU")
    rotation: Vec3 = Field((0.0, 0.0, 0.0), description="Ángulos de Euler xyz (rad)")
    motion_amplitude: Vec3 = Field((0.0, 0.0, 0.0), description="Desplazamiento a amplitud 1 (mm)")
    axis_scaling: Vec3 = Field((0.0, 0.0, 0.0), description="Cambio relativo de semiejes a amplitud 1")

    @field_validator("semi_axes")
    @classmethod
    def _positive_axes(cls, v: Vec3) -> Vec3:
        if min(v) <= 0:
            raise ValueError("semi_axes deben ser > 0")
        return v

    @field_validator("rotation")
    @classmethod
    def _bounded_rotation(cls, v: Vec3) -> Vec3:
        if max(abs(a) for a in v) > np.pi:
            raise ValueError("|rotation| debe ser <= pi")
        return v

    def at(self, amplitude: float) -> tuple[np.ndarray, np.ndarray]:
        """Centro y semiejes desplazados/escalados para una amplitud."""
        center = np.asarray(self.center) + amplitude * np.asarray(self.motion_amplitude)
        semi = np.asarray(self.semi_axes) * (1.0 + amplitude * np.asarray(self.axis_scaling))
        return center, semi

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.rotation).as_matrix()


class Phantom4D(BaseModel):
    """Lista de elipsoides en orden de pintado (el último gana)."""

    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    body: tuple[Ellipsoid, ...] = ()

    def by_name(self, name: str) -> Ellipsoid:
        for e in self.body:
            if e.name == name:
                return e
        raise DomainError(f"El fantoma {self.name!r} no tiene elipsoide {name!r}")

    def index_of(self, name: str) -> int:
        for i, e in enumerate(self.body):
            if e.name == name:
                return i
        raise DomainError(f"El fantoma {self.name!r} no tiene elipsoide {name!r}")


@dataclass(frozen=True)
class GridSpec:
    """Rejilla de vóxeles; tuplas en orden (z, y, x)."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: Optional[tuple[float, float, float]] = None

    def __post_init__(self):
        if min(self.shape) < 1:
            raise DomainError(f"Dimensiones de rejilla inválidas: {self.shape}")
        if min(self.spacing) <= 0:
            raise DomainError(f"Espaciado de rejilla inválido: {self.spacing}")
        if self.origin is None:
            centered = tuple(-(n - 1) / 2.0 * d for n, d in zip(self.shape, self.spacing))
            object.__setattr__(self, "origin", centered)

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Coordenadas de centros de vóxel (z, y, x) en mm."""
        return tuple(o + d * np.arange(n) for n, d, o in zip(self.shape, self.spacing, self.origin))

    @classmethod
    def from_settings(cls, settings: Optional[PhantomSettings] = None) -> "GridSpec":
        settings = settings or get_settings().phantom
        return cls(shape=tuple(settings.grid_shape), spacing=tuple(settings.spacing_mm))


@dataclass(frozen=True)
class Volume3D:
    """Volumen (z, y, x) con metadatos de rejilla en mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DomainError(f"Volume3D requiere un arreglo 3D no vacío, recibido {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("Volume3D contiene valores no finitos")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(shape=self.shape, spacing=tuple(self.spacing), origin=tuple(self.origin))

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data=data, spacing=self.spacing, origin=self.origin)


@dataclass(frozen=True)
class Volume4D:
    """N volúmenes de fase que comparten rejilla."""

    phases: tuple[Volume3D, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.phases) < 1:
            raise DomainError("Volume4D requiere al menos una fase")
        ref = self.phases[0]
        for v in self.phases[1:]:
            if v.shape != ref.shape or tuple(v.spacing) != tuple(ref.spacing) or tuple(v.origin) != tuple(ref.origin):
                raise DomainError("Todas las fases de Volume4D deben compartir rejilla")

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def grid(self) -> GridSpec:
        return self.phases[0].grid

    def as_array(self) -> np.ndarray:
        """Arreglo (t, z, y, x)."""
        return np.stack([v.data for v in self.phases], axis=0)

    @classmethod
    def from_array(cls, data: np.ndarray, spacing, origin) -> "Volume4D":
        return cls(phases=tuple(Volume3D(data=d, spacing=tuple(spacing), origin=tuple(origin)) for d in data))


def _check_amplitude(amplitude: float) -> None:
    if not 0.0 <= amplitude <= 1.0:
        raise DomainError(f"La amplitud debe estar en [0, 1], recibido {amplitude}")


def _paint(phantom: Phantom4D, amplitude: float, grid: GridSpec, values: Sequence[float], background, dtype):
    """Pinta cada elipsoide dentro de su caja envolvente; el último en contener el centro gana."""
    zs, ys, xs = grid.axes()
    out = np.full(grid.shape, background, dtype=dtype)
    for ellipsoid, value in zip(phantom.body, values):
        center, semi = ellipsoid.at(amplitude)
        rot = ellipsoid.rotation_matrix()
        # Semiextensión de la caja envolvente del elipsoide rotado, por eje (x, y, z)
        half = np.sqrt(((rot * semi[None, :]) ** 2).sum(axis=1))
        ranges = []
        for axis_coords, c, h in ((xs, center[0], half[0]), (ys, center[1], half[1]), (zs, center[2], half[2])):
            lo = np.searchsorted(axis_coords, c - h, side="left")
            hi = np.searchsorted(axis_coords, c + h, side="right")
            ranges.append(slice(lo, hi))
        sx, sy, sz = ranges
        if sx.start >= sx.stop or sy.start >= sy.stop or sz.start >= sz.stop:
            continue
        px = xs[sx][None, None, :] - center[0]
        py = ys[sy][None, :, None] - center[1]
        pz = zs[sz][:, None, None] - center[2]
        # Coordenadas locales: R^T (p - c)
        lx = rot[0, 0] * px + rot[1, 0] * py + rot[2, 0] * pz
        ly = rot[0, 1] * px + rot[1, 1] * py + rot[2, 1] * pz
        lz = rot[0, 2] * px + rot[1, 2] * py + rot[2, 2] * pz
        inside = (lx / semi[0]) ** 2 + (ly / semi[1]) ** 2 + (lz / semi[2]) ** 2 <= 1.0
        region = out[sz, sy, sx]
        region[inside] = value
    return out


def sample_volume(phantom: Phantom4D, amplitude: float, grid: Optional[GridSpec] = None) -> Volume3D:
    """
    Muestrea el fantoma en HU para una amplitud respiratoria.

    Args:
        phantom: Fantoma con elipsoides en orden de pintado
        amplitude: Amplitud en [0, 1]
        grid: Rejilla de muestreo (por defecto la de la configuración)

    Returns:
        Volume3D en HU; el fondo es aire (-1000 HU)
    """
    _check_amplitude(amplitude)
    grid = grid or GridSpec.from_settings()
    data = _paint(phantom, amplitude, grid, [e.value for e in phantom.body], AIR_HU, np.float32)
    return Volume3D(data=data, spacing=tuple(grid.spacing), origin=tuple(grid.origin))


def label_volume(phantom: Phantom4D, amplitude: float, grid: Optional[GridSpec] = None) -> np.ndarray:
    """Índice (en orden de pintado) del elipsoide ganador por vóxel; -1 es fondo."""
    _check_amplitude(amplitude)
    grid = grid or GridSpec.from_settings()
    return _paint(phantom, amplitude, grid, list(range(len(phantom.body))), -1, np.int16)


def ellipsoid_mask(ellipsoid: Ellipsoid, amplitude: float, grid: GridSpec) -> np.ndarray:
    """Pertenencia exacta (test de centro de vóxel) a un único elipsoide."""
    _check_amplitude(amplitude)
    single = Phantom4D(name=ellipsoid.name, body=(ellipsoid,))
    return _paint(single, amplitude, grid, [1], 0, np.uint8).astype(bool)


def sample_ground_truth_4d(
    phantom: Phantom4D,
    signal_phase_amplitudes: Iterable[float],
    grid: Optional[GridSpec] = None,
    *,
    n_phases: int,
) -> Volume4D:
    """
    Construye la verdad terreno 4D: la fase i se muestrea en la i-ésima amplitud representativa.

    Args:
        phantom: Fantoma
        signal_phase_amplitudes: Una amplitud por fase (fase 0 = fin de inspiración)
        grid: Rejilla de muestreo
        n_phases: Número de fases esperado; si no coincide con la lista se levanta DomainError

    Returns:
        Volume4D con una fase por amplitud
    """
    amplitudes = [float(a) for a in signal_phase_amplitudes]
    if not amplitudes:
        raise DomainError("Se requiere al menos una amplitud de fase")
    if n_phases != len(amplitudes):
        raise DomainError(f"Se esperaban {n_phases} amplitudes de fase, recibidas {len(amplitudes)}")
    grid = grid or GridSpec.from_settings()
    cache: dict[float, Volume3D] = {}
    phases = []
    for a in amplitudes:
        if a not in cache:
            cache[a] = sample_volume(phantom, a, grid)
        phases.append(cache[a])
    logger.debug(f"🫁 Verdad terreno 4D: {len(phases)} fases, rejilla {grid.shape}")
    return Volume4D(phases=tuple(phases))


def _thorax_body(
    torso_scale: float = 1.0,
    lung_scale: float = 1.0,
    tumor_offset: Vec3 = (0.0, 0.0, 0.0),
    tumor_radius: float = 12.0,
    diaphragm_excursion: float = 15.0,
) -> tuple[Ellipsoid, ...]:
    tx, ty = 150.0 * torso_scale, 105.0 * torso_scale
    lung_axes = (50.0 * lung_scale, 65.0 * lung_scale, 75.0 * lung_scale)
    lung_motion = (0.0, 0.0, -6.0)
    lung_scaling = (0.02, 0.03, 0.08)
    body = [
        Ellipsoid(name="torso", center=(0.0, 0.0, 0.0), semi_axes=(tx, ty, 200.0), value=WATER_HU,
                  axis_scaling=(0.01, 0.03, 0.0)),
        Ellipsoid(name="lung_r", center=(-65.0 * torso_scale, 0.0, 10.0), semi_axes=lung_axes, value=-800.0,
                  motion_amplitude=lung_motion, axis_scaling=lung_scaling),
        Ellipsoid(name="lung_l", center=(65.0 * torso_scale, 0.0, 10.0), semi_axes=lung_axes, value=-800.0,
                  motion_amplitude=lung_motion, axis_scaling=lung_scaling),
        Ellipsoid(name="diaphragm", center=(0.0, 0.0, -90.0), semi_axes=(140.0 * torso_scale, 100.0 * torso_scale, 70.0),
                  value=40.0, motion_amplitude=(0.0, 0.0, -diaphragm_excursion)),
        Ellipsoid(name="tumor",
                  center=(-60.0 * torso_scale + tumor_offset[0], 5.0 + tumor_offset[1], 30.0 + tumor_offset[2]),
                  semi_axes=(tumor_radius, tumor_radius, tumor_radius), value=30.0,
                  motion_amplitude=(0.0, 2.0, -10.0)),
    ]
    # Costillas: cortes axiales de alto contraste cerca del contorno del torso
    for k, deg in enumerate((30, 60, 120, 150, -30, -60, -120, -150)):
        theta = np.deg2rad(deg)
        body.append(
            Ellipsoid(name=f"rib_{k}", center=(0.88 * tx * np.cos(theta), 0.88 * ty * np.sin(theta), 0.0),
                      semi_axes=(6.0, 6.0, 60.0), value=1000.0)
        )
    body.append(Ellipsoid(name="spine", center=(0.0, -0.8 * ty, 0.0), semi_axes=(15.0, 15.0, 200.0), value=400.0))
    return tuple(body)


def make_thorax_phantom(variant: int = 0) -> Phantom4D:
    """
    Fantoma torácico integrado. La variante 0 es el canónico "thorax-v1";
    las demás perturban tamaños, tumor y excursión diafragmática con una semilla fija.
    """
    if variant == 0:
        return Phantom4D(name="thorax-v1", body=_thorax_body())
    rng = np.random.default_rng(variant)
    body = _thorax_body(
        torso_scale=float(rng.uniform(0.92, 1.05)),
        lung_scale=float(rng.uniform(0.9, 1.05)),
        tumor_offset=tuple(float(v) for v in rng.uniform(-8.0, 8.0, size=3)),
        tumor_radius=float(rng.uniform(8.0, 14.0)),
        diaphragm_excursion=float(rng.uniform(10.0, 20.0)),
    )
    return Phantom4D(name=f"thorax-v1-var{variant}", body=body)


def phantom_from_settings(settings: Optional[PhantomSettings] = None) -> Phantom4D:
    """Fantoma definido en la configuración (lista explícita o el integrado)."""
    settings = settings or get_settings().phantom
    if settings.ellipsoids:
        body = tuple(
            Ellipsoid(
                name=e.name,
                center=e.center_mm,
                semi_axes=e.semi_axes_mm,
                value=e.value_hu,
                rotation=e.rotation_rad,
                motion_amplitude=e.motion_amplitude_mm,
                axis_scaling=e.axis_scaling,
            )
            for e in settings.ellipsoids
        )
        return Phantom4D(name=settings.name, body=body)
    if settings.name != "thorax-v1":
        raise DomainError(f"Fantoma integrado desconocido: {settings.name!r}")
    return make_thorax_phantom(settings.variant)
