"""
Simulación de la adquisición CBCT circular con detector desplazado (half-fan).

Geometría: el eje de rotación es z. En el ángulo beta la fuente está en
sad*(cos b, sin b, 0), el centro del detector en -(sdd-sad)*(cos b, sin b, 0),
el eje u del detector es (-sin b, cos b, 0) y el eje v es z.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numba
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.config import GeometrySettings, get_settings
from src.core.errors import DomainError
from src.logger.logger_config import LoggerConfig
from src.services.phantom4d import GridSpec, Phantom4D, Volume3D, sample_ground_truth_4d, sample_volume
from src.services.respiration import BreathingSignal, PhaseMap, amplitude_sort, phase_amplitudes, phase_sort

logger = LoggerConfig.get_logger(__name__)


class ScanGeometry(BaseModel):
    """Geometría circular de haz cónico."""

    model_config = ConfigDict(frozen=True)

    sad: float = Field(..., gt=0, description="Distancia fuente-isocentro (mm)")
    sdd: float = Field(..., gt=0, description="Distancia fuente-detector (mm)")
    detector_size: tuple[float, float] = Field(..., description="Tamaño (u, v) en mm")
    detector_channels: tuple[int, int] = Field(..., description="Canales (u, v)")
    detector_offset_u: float = Field(0.0, description="Desplazamiento lateral del detector (mm)")
    views_per_turn: int = Field(..., ge=2)
    rotation_time: float = Field(..., gt=0, description="Duración de una vuelta (s)")
    start_angle: float = 0.0
    direction: Literal[1, -1] = 1

    @model_validator(mode="after")
    def _check(self) -> "ScanGeometry":
        if self.sdd <= self.sad:
            raise ValueError("sdd debe ser mayor que sad")
        if min(self.detector_channels) < 2:
            raise ValueError("Se requieren al menos 2 canales por eje")
        if min(self.detector_size) <= 0:
            raise ValueError("detector_size debe ser > 0")
        return self

    @classmethod
    def from_settings(cls, settings: Optional[GeometrySettings] = None, **overrides) -> "ScanGeometry":
        s = settings or get_settings().geometry
        offset = s.detector_offset_u_mm
        if offset is None:
            offset = 0.25 * s.detector_size_mm[0]
        values = dict(
            sad=s.sad_mm,
            sdd=s.sdd_mm,
            detector_size=tuple(s.detector_size_mm),
            detector_channels=tuple(s.detector_channels),
            detector_offset_u=offset,
            views_per_turn=s.views_per_turn,
            rotation_time=s.rotation_time_s,
            start_angle=s.start_angle_rad,
            direction=s.direction,
        )
        values.update(overrides)
        return cls(**values)

    @property
    def du(self) -> float:
        return self.detector_size[0] / self.detector_channels[0]

    @property
    def dv(self) -> float:
        return self.detector_size[1] / self.detector_channels[1]

    @property
    def magnification(self) -> float:
        return self.sdd / self.sad

    def u_coords(self) -> np.ndarray:
        """Centros de canal en u (mm, plano del detector), desplazamiento incluido."""
        nu = self.detector_channels[0]
        return (np.arange(nu) - (nu - 1) / 2.0) * self.du + self.detector_offset_u

    def v_coords(self) -> np.ndarray:
        nv = self.detector_channels[1]
        return (np.arange(nv) - (nv - 1) / 2.0) * self.dv

    def view_angles(self) -> np.ndarray:
        k = np.arange(self.views_per_turn)
        return self.start_angle + self.direction * 2.0 * np.pi * k / self.views_per_turn

    def view_times(self) -> np.ndarray:
        return np.arange(self.views_per_turn) * self.rotation_time / self.views_per_turn


@dataclass(frozen=True)
class ProjectionSet:
    """Vistas (M, nv, nu) de integrales de línea con ángulo, tiempo y fase (-1 = sin fase)."""

    geometry: ScanGeometry
    angles: np.ndarray
    times: np.ndarray
    data: np.ndarray
    phases: np.ndarray = field(default=None)

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64)
        times = np.asarray(self.times, dtype=np.float64)
        data = np.asarray(self.data, dtype=np.float32)
        m = angles.size
        phases = np.full(m, -1, dtype=np.int32) if self.phases is None else np.asarray(self.phases, dtype=np.int32)
        nu, nv = self.geometry.detector_channels
        if times.shape != (m,) or phases.shape != (m,):
            raise DomainError("angles, times y phases deben tener una entrada por vista")
        if data.shape != (m, nv, nu):
            raise DomainError(f"Datos de proyección {data.shape} no coinciden con (M, nv, nu) = {(m, nv, nu)}")
        if m > 1 and np.any(np.diff(times) < 0):
            raise DomainError("Los tiempos de vista deben ser no decrecientes")
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "phases", phases)

    @property
    def n_views(self) -> int:
        return int(self.angles.size)

    def phase_map(self, n_phases: int) -> PhaseMap:
        if np.any(self.phases < 0):
            raise DomainError("Hay vistas sin etiqueta de fase")
        return PhaseMap(phase_of_view=self.phases.astype(np.int64), n_phases=n_phases)

    def with_phases(self, phase_map: PhaseMap) -> "ProjectionSet":
        return ProjectionSet(self.geometry, self.angles, self.times, self.data, phase_map.phase_of_view)

    def with_data(self, data: np.ndarray) -> "ProjectionSet":
        return ProjectionSet(self.geometry, self.angles, self.times, data, self.phases)

    def subset(self, indices: Sequence[int]) -> "ProjectionSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ProjectionSet(self.geometry, self.angles[idx], self.times[idx], self.data[idx], self.phases[idx])


def hu_to_mu(volume: Volume3D, mu_water: Optional[float] = None) -> Volume3D:
    """mu = mu_water * (1 + HU / 1000)."""
    mu_water = get_settings().recon.mu_water if mu_water is None else mu_water
    data = (mu_water * (1.0 + volume.data.astype(np.float64) / 1000.0)).astype(np.float32)
    return volume.with_data(data)


@numba.njit(cache=True)
def _clip_slab(s, r, lo, hi, a_in, a_out):
    """Recorta [a_in, a_out] con la losa [lo, hi] de un eje; a_in > a_out indica que no hay corte."""
    if abs(r) < 1e-12:
        if s <= lo or s >= hi:
            return 1.0, 0.0
        return a_in, a_out
    t0 = (lo - s) / r
    t1 = (hi - s) / r
    if t0 > t1:
        t0, t1 = t1, t0
    return max(a_in, t0), min(a_out, t1)


@numba.njit(cache=True)
def _trace_ray(vol, sx, sy, sz, ex, ey, ez, bx, by, bz, dx, dy, dz):
    """Integral de línea fuente->canal con longitudes exactas de intersección por vóxel."""
    nz, ny, nx = vol.shape
    rx, ry, rz = ex - sx, ey - sy, ez - sz
    a_in, a_out = _clip_slab(sx, rx, bx, bx + nx * dx, 0.0, 1.0)
    a_in, a_out = _clip_slab(sy, ry, by, by + ny * dy, a_in, a_out)
    a_in, a_out = _clip_slab(sz, rz, bz, bz + nz * dz, a_in, a_out)
    if a_in >= a_out:
        return 0.0

    # Vóxel de entrada (punto medio de un paso infinitesimal para evitar empates en caras)
    a_entry = a_in + 1e-9 * (a_out - a_in)
    ix = min(max(int(np.floor((sx + a_entry * rx - bx) / dx)), 0), nx - 1)
    iy = min(max(int(np.floor((sy + a_entry * ry - by) / dy)), 0), ny - 1)
    iz = min(max(int(np.floor((sz + a_entry * rz - bz) / dz)), 0), nz - 1)

    inf = np.inf
    if rx > 0:
        stx, tmx, tdx = 1, (bx + (ix + 1) * dx - sx) / rx, dx / rx
    elif rx < 0:
        stx, tmx, tdx = -1, (bx + ix * dx - sx) / rx, -dx / rx
    else:
        stx, tmx, tdx = 0, inf, inf
    if ry > 0:
        sty, tmy, tdy = 1, (by + (iy + 1) * dy - sy) / ry, dy / ry
    elif ry < 0:
        sty, tmy, tdy = -1, (by + iy * dy - sy) / ry, -dy / ry
    else:
        sty, tmy, tdy = 0, inf, inf
    if rz > 0:
        stz, tmz, tdz = 1, (bz + (iz + 1) * dz - sz) / rz, dz / rz
    elif rz < 0:
        stz, tmz, tdz = -1, (bz + iz * dz - sz) / rz, -dz / rz
    else:
        stz, tmz, tdz = 0, inf, inf

    acc = 0.0
    a = a_in
    while a < a_out:
        if tmx <= tmy and tmx <= tmz:
            nxt = min(tmx, a_out)
            acc += vol[iz, iy, ix] * (nxt - a)
            a = nxt
            ix += stx
            tmx += tdx
            if ix < 0 or ix >= nx:
                break
        elif tmy <= tmz:
            nxt = min(tmy, a_out)
            acc += vol[iz, iy, ix] * (nxt - a)
            a = nxt
            iy += sty
            tmy += tdy
            if iy < 0 or iy >= ny:
                break
        else:
            nxt = min(tmz, a_out)
            acc += vol[iz, iy, ix] * (nxt - a)
            a = nxt
            iz += stz
            tmz += tdz
            if iz < 0 or iz >= nz:
                break
    return acc * np.sqrt(rx * rx + ry * ry + rz * rz)


@numba.njit(parallel=True, cache=True)
def _project_kernel(vol, spacing, origin, src, det0, eu, ev, us, vs, out):
    dz, dy, dx = spacing[0], spacing[1], spacing[2]
    bz = origin[0] - 0.5 * dz
    by = origin[1] - 0.5 * dy
    bx = origin[2] - 0.5 * dx
    for r in numba.prange(vs.size):
        for c in range(us.size):
            ex = det0[0] + us[c] * eu[0] + vs[r] * ev[0]
            ey = det0[1] + us[c] * eu[1] + vs[r] * ev[1]
            ez = det0[2] + us[c] * eu[2] + vs[r] * ev[2]
            out[r, c] = _trace_ray(vol, src[0], src[1], src[2], ex, ey, ez, bx, by, bz, dx, dy, dz)


def _bounding_box(volume: Volume3D) -> tuple[np.ndarray, np.ndarray]:
    """Caja envolvente en (x, y, z) mm."""
    spacing = np.asarray(volume.spacing, dtype=np.float64)[::-1]
    origin = np.asarray(volume.origin, dtype=np.float64)[::-1]
    shape = np.asarray(volume.shape, dtype=np.float64)[::-1]
    lo = origin - 0.5 * spacing
    return lo, lo + shape * spacing


def source_position(geometry: ScanGeometry, angle: float) -> np.ndarray:
    return geometry.sad * np.array([np.cos(angle), np.sin(angle), 0.0])


def forward_project(volume: Volume3D, geometry: ScanGeometry, angle: float) -> np.ndarray:
    """
    Proyección de haz cónico de un volumen de atenuación (mm^-1).

    Args:
        volume: Volumen de atenuación
        geometry: Geometría del escaneo
        angle: Ángulo de la vista (rad)

    Returns:
        Arreglo (nv, nu) float32 de integrales de línea
    """
    src = source_position(geometry, angle)
    lo, hi = _bounding_box(volume)
    if np.all(src >= lo) and np.all(src <= hi):
        raise DomainError(f"La fuente ({src.round(1).tolist()} mm) está dentro del volumen: geometría degenerada")
    c, s = np.cos(angle), np.sin(angle)
    det0 = -(geometry.sdd - geometry.sad) * np.array([c, s, 0.0])
    eu = np.array([-s, c, 0.0])
    ev = np.array([0.0, 0.0, 1.0])
    out = np.zeros((geometry.detector_channels[1], geometry.detector_channels[0]), dtype=np.float64)
    _project_kernel(
        np.ascontiguousarray(volume.data, dtype=np.float32),
        np.asarray(volume.spacing, dtype=np.float64),
        np.asarray(volume.origin, dtype=np.float64),
        src,
        det0,
        eu,
        ev,
        geometry.u_coords(),
        geometry.v_coords(),
        out,
    )
    return out.astype(np.float32)


def project_views(volume: Volume3D, geometry: ScanGeometry, angles: Sequence[float]) -> np.ndarray:
    """Proyecta un volumen estático en varios ángulos: arreglo (M, nv, nu)."""
    return np.stack([forward_project(volume, geometry, float(a)) for a in angles], axis=0)


def sort_views(signal: BreathingSignal, view_times: np.ndarray, n_phases: int, sorting: Optional[str] = None) -> PhaseMap:
    """Etiquetado respiratorio según recon.sorting ("phase" o "amplitude")."""
    sorting = sorting or get_settings().recon.sorting
    if sorting == "amplitude":
        return amplitude_sort(signal, view_times, n_phases)
    return phase_sort(signal, view_times, n_phases)


def simulate_4d_scan(
    phantom: Phantom4D,
    signal: BreathingSignal,
    geometry: Optional[ScanGeometry] = None,
    n_phases: Optional[int] = None,
    quantize: Optional[bool] = None,
    noise_sd: Optional[float] = None,
    grid: Optional[GridSpec] = None,
    seed: Optional[int] = None,
    sorting: Optional[str] = None,
    mu_water: Optional[float] = None,
) -> ProjectionSet:
    """
    Simula un escaneo 4D: cada vista proyecta el estado respiratorio de su instante.

    Args:
        phantom: Fantoma dinámico
        signal: Señal respiratoria que cubre la duración del escaneo
        geometry: Geometría (por defecto la de la configuración)
        n_phases: Número de fases del etiquetado
        quantize: Proyectar el volumen de verdad terreno de la fase de cada vista
        noise_sd: Desviación del ruido gaussiano aditivo sobre las integrales de línea
        grid: Rejilla del fantoma
        seed: Semilla del ruido
        sorting: "phase" o "amplitude"
        mu_water: Atenuación del agua (mm^-1)

    Returns:
        ProjectionSet con fases etiquetadas
    """
    settings = get_settings()
    geometry = geometry or ScanGeometry.from_settings()
    n_phases = settings.recon.n_phases if n_phases is None else n_phases
    quantize = settings.recon.quantize if quantize is None else quantize
    noise_sd = settings.recon.noise_sd if noise_sd is None else noise_sd
    seed = settings.seed if seed is None else seed
    grid = grid or GridSpec.from_settings()

    angles = geometry.view_angles()
    times = geometry.view_times()
    t0, t1 = signal.span
    if times[0] < t0 - 1e-9 or times[-1] > t1 + 1e-9:
        raise DomainError(f"La señal ({t0:.2f}-{t1:.2f} s) no cubre el escaneo ({times[-1]:.2f} s)")

    phase_map = sort_views(signal, times, n_phases, sorting)
    logger.info(
        f"📡 Simulando escaneo: {angles.size} vistas, {n_phases} fases, "
        f"{'cuantizado' if quantize else 'continuo'}, ruido {noise_sd}"
    )

    data = np.empty((angles.size,) + tuple(reversed(geometry.detector_channels)), dtype=np.float32)
    if quantize:
        truth = sample_ground_truth_4d(phantom, phase_amplitudes(n_phases), grid, n_phases=n_phases)
        mu_phases = [hu_to_mu(v, mu_water) for v in truth.phases]
        for k, (angle, phase) in enumerate(zip(angles, phase_map.phase_of_view)):
            data[k] = forward_project(mu_phases[phase], geometry, float(angle))
    else:
        cache: dict[float, Volume3D] = {}
        for k, (angle, amp) in enumerate(zip(angles, signal.amplitude_at(times))):
            key = float(amp)
            if key not in cache:
                cache[key] = hu_to_mu(sample_volume(phantom, min(max(key, 0.0), 1.0), grid), mu_water)
            data[k] = forward_project(cache[key], geometry, float(angle))

    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        data += (noise_sd * rng.standard_normal(data.shape)).astype(np.float32)

    counts = phase_map.counts()
    logger.info(f"✅ Escaneo simulado. Vistas por fase: min {counts.min()}, max {counts.max()}")
    return ProjectionSet(geometry=geometry, angles=angles, times=times, data=data, phases=phase_map.phase_of_view)
