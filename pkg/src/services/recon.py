"""
Reconstrucción FDK y FDK con compuerta respiratoria (gated).

Las coordenadas del detector se escalan al plano del isocentro (division por
sdd/sad) antes de ponderar, filtrar y retroproyectar.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np
from scipy import fft

from src.core.config import get_settings
from src.core.errors import DomainError
from src.logger.logger_config import LoggerConfig
from src.services.phantom4d import GridSpec, Volume3D, Volume4D
from src.services.respiration import PhaseMap
from src.services.scanner import ProjectionSet, ScanGeometry

logger = LoggerConfig.get_logger(__name__)

KERNELS = ("ram-lak", "shepp-logan")


@dataclass(frozen=True)
class FilterSpec:
    kernel: str
    zero_pad_to: int

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise DomainError(f"Kernel desconocido: {self.kernel!r}")
        if self.zero_pad_to < 2 or self.zero_pad_to & (self.zero_pad_to - 1):
            raise DomainError(f"La longitud de relleno debe ser potencia de dos: {self.zero_pad_to}")

    @classmethod
    def for_channels(cls, n_channels: int, kernel: Optional[str] = None) -> "FilterSpec":
        if n_channels < 2:
            raise DomainError("El filtro rampa requiere al menos 2 canales u")
        kernel = kernel or get_settings().recon.kernel
        return cls(kernel=kernel, zero_pad_to=1 << int(np.ceil(np.log2(2 * n_channels))))


def cosine_weight(u: np.ndarray, v: np.ndarray, sad: float) -> np.ndarray:
    """sad / sqrt(sad^2 + u^2 + v^2) sobre coordenadas del plano del isocentro."""
    return sad / np.sqrt(sad * sad + np.square(u) + np.square(v))


def _iso_coords(geometry: ScanGeometry) -> tuple[np.ndarray, np.ndarray]:
    m = geometry.magnification
    return geometry.u_coords() / m, geometry.v_coords() / m


def preweight(projection: np.ndarray, geometry: ScanGeometry) -> np.ndarray:
    """Ponderación coseno de una vista (nv, nu) o de un bloque (M, nv, nu)."""
    u, v = _iso_coords(geometry)
    w = cosine_weight(u[None, :], v[:, None], geometry.sad)
    return np.asarray(projection, dtype=np.float64) * w


def halffan_weights(geometry: ScanGeometry) -> np.ndarray:
    """
    Pesos de redundancia por canal u para el detector desplazado.

    En la zona solapada [-w_ov, w_ov] alrededor del rayo por el isocentro el peso
    sube como sin^2 de 0 a 1 hacia el lado medido; un rayo y su conjugado suman 1.
    """
    offset = geometry.detector_offset_u
    width = geometry.detector_size[0]
    if abs(offset) > width / 2.0:
        raise DomainError(f"Desplazamiento {offset} mm mayor que medio detector ({width / 2.0} mm)")
    u = geometry.u_coords()
    if offset == 0:
        return np.ones_like(u)
    w_ov = width / 2.0 - abs(offset)
    side = u if offset > 0 else -u
    if w_ov <= 0:
        return (side >= 0).astype(np.float64)
    x = np.clip((side + w_ov) / w_ov, 0.0, 2.0)
    return np.where(side >= w_ov, 1.0, np.sin(np.pi / 4.0 * x) ** 2)


def halffan_weight(projection: np.ndarray, geometry: ScanGeometry) -> np.ndarray:
    return np.asarray(projection, dtype=np.float64) * halffan_weights(geometry)


def ramp_kernel(length: int, du: float, kernel: str = "ram-lak") -> np.ndarray:
    """Kernel espacial de longitud `length` en orden circular (n = 0, 1, ..., -1)."""
    n = np.fft.fftfreq(length, d=1.0 / length).astype(np.int64)
    if kernel == "ram-lak":
        h = np.zeros(length)
        h[n == 0] = 1.0 / (4.0 * du * du)
        odd = n % 2 == 1
        h[odd] = -1.0 / np.square(np.pi * n[odd] * du)
        return h
    if kernel == "shepp-logan":
        return -2.0 / (np.pi**2 * du * du * (4.0 * n.astype(np.float64) ** 2 - 1.0))
    raise DomainError(f"Kernel desconocido: {kernel!r}")


def ramp_filter(projection: np.ndarray, filter_spec: FilterSpec, du: float = 1.0) -> np.ndarray:
    """
    Convoluciona cada fila con el kernel rampa discreto mediante FFT con relleno de ceros.

    Returns:
        sum_k p[k] h[n - k] por fila (sin factor du)
    """
    p = np.asarray(projection, dtype=np.float64)
    nu = p.shape[-1]
    if nu < 2:
        raise DomainError("El filtro rampa requiere al menos 2 canales u")
    size = max(filter_spec.zero_pad_to, 1 << int(np.ceil(np.log2(2 * nu))))
    h_hat = fft.rfft(ramp_kernel(size, du, filter_spec.kernel))
    filtered = fft.irfft(fft.rfft(p, n=size, axis=-1) * h_hat, n=size, axis=-1)
    return filtered[..., :nu]


def hu_convert(volume: Volume3D, mu_water: Optional[float] = None) -> Volume3D:
    """HU = 1000 (mu - mu_water) / mu_water."""
    mu_water = get_settings().recon.mu_water if mu_water is None else mu_water
    data = 1000.0 * (volume.data.astype(np.float64) - mu_water) / mu_water
    return volume.with_data(data.astype(np.float32))


@numba.njit(parallel=True, cache=True)
def _backproject_kernel(filtered, cos_b, sin_b, weights, sad, u0, du, v0, dv, zs, ys, xs, out):
    n_views, nv, nu = filtered.shape
    for iz in numba.prange(zs.size):
        z = zs[iz]
        for iy in range(ys.size):
            y = ys[iy]
            for ix in range(xs.size):
                x = xs[ix]
                acc = 0.0
                for k in range(n_views):
                    big_u = sad - (x * cos_b[k] + y * sin_b[k])
                    if big_u <= 0.0:
                        continue
                    scale = sad / big_u
                    fu = (scale * (-x * sin_b[k] + y * cos_b[k]) - u0) / du
                    fv = (scale * z - v0) / dv
                    if fu < 0.0 or fu > nu - 1 or fv < 0.0 or fv > nv - 1:
                        continue
                    i0 = min(int(fu), nu - 2)
                    j0 = min(int(fv), nv - 2)
                    tu = fu - i0
                    tv = fv - j0
                    val = (
                        (1.0 - tv) * ((1.0 - tu) * filtered[k, j0, i0] + tu * filtered[k, j0, i0 + 1])
                        + tv * ((1.0 - tu) * filtered[k, j0 + 1, i0] + tu * filtered[k, j0 + 1, i0 + 1])
                    )
                    acc += weights[k] * scale * scale * val
                out[iz, iy, ix] = acc


def filter_views(projections: ProjectionSet, kernel: Optional[str] = None, halffan: Optional[bool] = None) -> np.ndarray:
    """
    Ponderación coseno, redundancia half-fan y filtrado rampa de todas las vistas.

    Con offset 0 el barrido completo mide cada rayo dos veces y se aplica 1/2.
    """
    geometry = projections.geometry
    halffan = get_settings().recon.halffan_weighting if halffan is None else halffan
    data = preweight(projections.data, geometry)
    if geometry.detector_offset_u == 0:
        data *= 0.5
    elif halffan:
        data = halffan_weight(data, geometry)
    du_iso = geometry.du / geometry.magnification
    filter_spec = FilterSpec.for_channels(geometry.detector_channels[0], kernel)
    return ramp_filter(data, filter_spec, du_iso) * du_iso


def backproject(
    filtered: np.ndarray,
    angles: np.ndarray,
    view_weight: float,
    geometry: ScanGeometry,
    grid: GridSpec,
) -> np.ndarray:
    """Retroproyección por vóxel con peso de distancia (sad/U)^2 e interpolación bilineal."""
    u, v = _iso_coords(geometry)
    m = geometry.magnification
    zs, ys, xs = grid.axes()
    out = np.zeros(grid.shape, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    _backproject_kernel(
        np.ascontiguousarray(filtered, dtype=np.float64),
        np.cos(angles),
        np.sin(angles),
        np.full(angles.size, view_weight),
        float(geometry.sad),
        float(u[0]),
        float(geometry.du / m),
        float(v[0]),
        float(geometry.dv / m),
        zs.astype(np.float64),
        ys.astype(np.float64),
        xs.astype(np.float64),
        out,
    )
    return out


def _reconstruct(
    projections: ProjectionSet,
    views: np.ndarray,
    grid: GridSpec,
    filtered: Optional[np.ndarray] = None,
    kernel: Optional[str] = None,
    halffan: Optional[bool] = None,
) -> np.ndarray:
    if filtered is None:
        filtered = filter_views(projections.subset(views), kernel, halffan)
    else:
        filtered = filtered[views]
    weight = 2.0 * np.pi / views.size
    return backproject(filtered, projections.angles[views], weight, projections.geometry, grid)


def _as_volume(mu: np.ndarray, grid: GridSpec, return_mu: bool, mu_water: Optional[float]) -> Volume3D:
    vol = Volume3D(data=mu.astype(np.float32), spacing=tuple(grid.spacing), origin=tuple(grid.origin))
    return vol if return_mu else hu_convert(vol, mu_water)


def fdk(
    projections: ProjectionSet,
    grid: Optional[GridSpec] = None,
    kernel: Optional[str] = None,
    halffan: Optional[bool] = None,
    return_mu: bool = False,
    mu_water: Optional[float] = None,
) -> Volume3D:
    """
    Reconstrucción FDK con todas las vistas (imagen promedio).

    Args:
        projections: Conjunto de proyecciones
        grid: Rejilla de salida (por defecto la del fantoma configurado)
        kernel: "ram-lak" o "shepp-logan"
        halffan: Aplicar la ponderación de redundancia half-fan
        return_mu: Devolver atenuación (mm^-1) en lugar de HU
        mu_water: Atenuación del agua para la conversión a HU

    Returns:
        Volume3D en HU (o mu)
    """
    if projections.n_views == 0:
        raise DomainError("fdk requiere al menos una vista")
    if projections.n_views < 2:
        raise DomainError("fdk requiere al menos 2 vistas")
    grid = grid or GridSpec.from_settings()
    logger.debug(f"🔧 FDK: {projections.n_views} vistas -> rejilla {grid.shape}")
    mu = _reconstruct(projections, np.arange(projections.n_views), grid, kernel=kernel, halffan=halffan)
    return _as_volume(mu, grid, return_mu, mu_water)


def gated_fdk(
    projections: ProjectionSet,
    phase_map: PhaseMap,
    phase: int,
    grid: Optional[GridSpec] = None,
    kernel: Optional[str] = None,
    halffan: Optional[bool] = None,
    return_mu: bool = False,
    mu_water: Optional[float] = None,
) -> Volume3D:
    """FDK restringido a las vistas de una fase, con peso angular 2*pi/count(fase)."""
    if phase_map.phase_of_view.size != projections.n_views:
        raise DomainError("El mapa de fases no corresponde al conjunto de proyecciones")
    views = phase_map.views_of(phase)
    if views.size == 0:
        raise DomainError(f"La fase {phase} no tiene vistas")
    grid = grid or GridSpec.from_settings()
    mu = _reconstruct(projections, views, grid, kernel=kernel, halffan=halffan)
    return _as_volume(mu, grid, return_mu, mu_water)


def reconstruct_4d(
    projections: ProjectionSet,
    phase_map: PhaseMap,
    grid: Optional[GridSpec] = None,
    kernel: Optional[str] = None,
    halffan: Optional[bool] = None,
    return_mu: bool = False,
    mu_water: Optional[float] = None,
) -> tuple[Volume3D, Volume4D]:
    """
    Imagen promedio y las N imágenes por fase filtrando cada vista una sola vez.

    Returns:
        (f_ave, Volume4D con f_0..f_{N-1})
    """
    if phase_map.phase_of_view.size != projections.n_views:
        raise DomainError("El mapa de fases no corresponde al conjunto de proyecciones")
    grid = grid or GridSpec.from_settings()
    filtered = filter_views(projections, kernel, halffan)
    counts = phase_map.counts()
    logger.info(f"🔧 Reconstruyendo f_ave y {phase_map.n_phases} fases (vistas por fase: {counts.tolist()})")
    f_ave = _as_volume(
        _reconstruct(projections, np.arange(projections.n_views), grid, filtered=filtered), grid, return_mu, mu_water
    )
    phases = []
    for i in range(phase_map.n_phases):
        views = phase_map.views_of(i)
        if views.size == 0:
            raise DomainError(f"La fase {i} no tiene vistas")
        phases.append(_as_volume(_reconstruct(projections, views, grid, filtered=filtered), grid, return_mu, mu_water))
    return f_ave, Volume4D(phases=tuple(phases))
