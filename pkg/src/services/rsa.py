"""
Análisis de artefactos de rayas rotacionales (RSA).

- Patrones de muestreo angular por fase y orientación dominante de los huecos.
- Orientación de rayas en el espectro de Fourier de la imagen de diferencia.
- Flujo óptico Lucas-Kanade piramidal (2D por corte o 3D) y trayectorias de
  puntos sembrados en rejilla, con estadísticas por eje.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import fft
from scipy.cluster.vq import kmeans2
from scipy.ndimage import gaussian_filter, map_coordinates, uniform_filter, zoom
from scipy.signal.windows import hann

from src.core.config import get_settings
from src.core.errors import DomainError
from src.logger.logger_config import LoggerConfig
from src.services.phantom4d import Volume4D
from src.services.respiration import PhaseMap
from src.services.storage import write_csv

logger = LoggerConfig.get_logger(__name__)

TWO_PI = 2.0 * np.pi
# longitud resultante media mínima para que una orientación esté definida
MIN_RESULTANT = 0.1


# --------------------------------------------------------------------------- #
# Patrones de muestreo
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class AngularCoverage:
    phase: int
    angles: np.ndarray
    clusters: tuple[tuple[float, float], ...]
    gaps: tuple[tuple[float, float], ...]
    dominant_gap_orientation: float
    pattern_rotation: float

    @property
    def cluster_centers(self) -> np.ndarray:
        return np.mod([s + e / 2.0 for s, e in self.clusters], TWO_PI)

    @property
    def gap_centers(self) -> np.ndarray:
        return np.mod([s + e / 2.0 for s, e in self.gaps], TWO_PI)


def _axial_mean(angles: np.ndarray, weights: np.ndarray, order: int) -> float:
    """
    Media circular ponderada de orden `order`, en [0, 2*pi/order).

    NaN si la longitud resultante media es menor que MIN_RESULTANT.
    """
    total = float(np.sum(weights)) if angles.size else 0.0
    if total <= 0:
        return float("nan")
    z = np.sum(weights * np.exp(1j * order * angles))
    if abs(z) < MIN_RESULTANT * total:
        return float("nan")
    return float(np.mod(np.angle(z), TWO_PI) / order)


def sampling_pattern(
    phase_map: PhaseMap, angles: Sequence[float], n_phases: Optional[int] = None, view_step: Optional[float] = None
) -> list[AngularCoverage]:
    """
    Clusters y huecos angulares de cada fase.

    Un hueco es una separación entre ángulos consecutivos mayor que 1.5 pasos de
    vista. La orientación dominante es la media axial (orden 2) de los centros de
    hueco ponderada por su extensión; pattern_rotation es la media de orden K
    (K = número de huecos), la rotación de la red de clusters.
    """
    angles = np.mod(np.asarray(angles, dtype=np.float64), TWO_PI)
    n_phases = phase_map.n_phases if n_phases is None else n_phases
    if phase_map.phase_of_view.size != angles.size:
        raise DomainError("Se requiere una etiqueta de fase por vista")
    step = TWO_PI / angles.size if view_step is None else view_step
    threshold = 1.5 * step

    coverage = []
    for phase in range(n_phases):
        a = np.sort(angles[phase_map.phase_of_view == phase])
        if a.size == 0:
            raise DomainError(f"La fase {phase} no tiene vistas")
        diffs = np.diff(np.append(a, a[0] + TWO_PI))
        big = np.flatnonzero(diffs > threshold)
        if big.size == 0:
            clusters = ((float(a[0]), TWO_PI),)
            gaps: tuple = ()
        else:
            gaps = tuple((float(a[i]), float(diffs[i])) for i in big)
            clusters = []
            for j, i in enumerate(big):
                start_idx = (i + 1) % a.size
                end_idx = big[(j + 1) % big.size]
                start, end = a[start_idx], a[end_idx]
                clusters.append((float(start), float(np.mod(end - start, TWO_PI))))
            clusters = tuple(clusters)
        gap_c = np.mod([s + e / 2.0 for s, e in gaps], TWO_PI) if gaps else np.zeros(0)
        gap_w = np.array([e for _, e in gaps])
        coverage.append(
            AngularCoverage(
                phase=phase,
                angles=a,
                clusters=clusters,
                gaps=gaps,
                dominant_gap_orientation=_axial_mean(gap_c, gap_w, 2),
                pattern_rotation=_axial_mean(gap_c, gap_w, max(len(gaps), 1)),
            )
        )
    return coverage


# --------------------------------------------------------------------------- #
# Orientación de rayas
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class OrientationProfile:
    energy: np.ndarray
    argmax: float
    degenerate: bool = False

    @property
    def bin_centers(self) -> np.ndarray:
        n = self.energy.size
        return (np.arange(n) + 0.5) * np.pi / n

    @property
    def image_angle(self) -> float:
        """Orientación de las rayas en la imagen (perpendicular al máximo espectral)."""
        return float(np.mod(self.argmax + np.pi / 2.0, np.pi))

    @property
    def axial_mean(self) -> float:
        """Media axial del perfil de energía sobre los centros de cuña."""
        if self.degenerate:
            return float("nan")
        return _axial_mean(self.bin_centers, self.energy, 2)


def streak_orientation(phase_image: np.ndarray, reference: np.ndarray, bins: Optional[int] = None) -> OrientationProfile:
    """
    Energía espectral de (imagen - referencia) acumulada en cuñas angulares sobre [0, pi).

    Args:
        phase_image: Corte 2D reconstruido
        reference: Corte de referencia de las mismas dimensiones
        bins: Número de cuñas (por defecto rsa.wedge_bins)

    Returns:
        OrientationProfile normalizado (suma 1); degenerate si la diferencia es nula
    """
    bins = get_settings().rsa.wedge_bins if bins is None else bins
    a = np.asarray(phase_image, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DomainError(f"streak_orientation requiere cortes 2D iguales: {a.shape} vs {b.shape}")
    diff = a - b
    if not np.any(diff):
        logger.warning("⚠️ Imagen de diferencia nula: perfil de orientación degenerado")
        return OrientationProfile(energy=np.full(bins, 1.0 / bins), argmax=float("nan"), degenerate=True)

    ny, nx = diff.shape
    window = np.outer(hann(ny, sym=False), hann(nx, sym=False))
    power = np.abs(fft.fft2(diff * window)) ** 2
    ky = fft.fftfreq(ny)[:, None]
    kx = fft.fftfreq(nx)[None, :]
    theta = np.mod(np.arctan2(ky, kx), np.pi)
    idx = np.minimum((theta / (np.pi / bins)).astype(np.int64), bins - 1)
    keep = (ky != 0) | (kx != 0)
    energy = np.bincount(idx[keep], weights=power[keep], minlength=bins)
    total = energy.sum()
    if total <= 0:
        return OrientationProfile(energy=np.full(bins, 1.0 / bins), argmax=float("nan"), degenerate=True)
    energy = energy / total
    best = int(np.argmax(energy))
    return OrientationProfile(energy=energy, argmax=float((best + 0.5) * np.pi / bins))


def circular_correlation(a: Sequence[float], b: Sequence[float], axial: bool = True) -> float:
    """
    Correlación circular T-lineal de Fisher-Lee entre dos series de ángulos.

    Usa los senos de las diferencias por pares, así que no depende de una media
    circular y está definida aunque los ángulos cubran todo el círculo. Vale 1
    si b es a rotado por una constante y -1 si es su reflexión. Con axial=True
    los ángulos se duplican (periodo pi). Los pares con NaN se descartan.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 2:
        return float("nan")
    k = 2.0 if axial else 1.0
    a, b = k * a[ok], k * b[ok]
    iu = np.triu_indices(a.size, k=1)
    sa = np.sin(a[:, None] - a[None, :])[iu]
    sb = np.sin(b[:, None] - b[None, :])[iu]
    denom = np.sqrt((sa**2).sum() * (sb**2).sum())
    return float((sa * sb).sum() / denom) if denom > 0 else float("nan")


@dataclass(frozen=True)
class GapStreakReport:
    """Orientación de huecos y de rayas por fase, y su correlación circular."""

    gap_angles: np.ndarray
    streak_angles: np.ndarray
    correlation: float

    @property
    def used_phases(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.gap_angles) & np.isfinite(self.streak_angles))


def gap_streak_correlation(
    coverage: Sequence[AngularCoverage],
    profiles: Sequence[OrientationProfile],
) -> GapStreakReport:
    """
    Correlaciona la orientación dominante de los huecos con la orientación media
    de las rayas, fase a fase. Las fases sin orientación de hueco definida
    (huecos equiespaciados) o con perfil degenerado no entran en la correlación.
    """
    if len(coverage) != len(profiles):
        raise DomainError(f"Se esperaban {len(coverage)} perfiles, recibidos {len(profiles)}")
    gaps = np.array([c.dominant_gap_orientation for c in coverage], dtype=np.float64)
    streaks = np.array([p.axial_mean for p in profiles], dtype=np.float64)
    report = GapStreakReport(gap_angles=gaps, streak_angles=streaks, correlation=circular_correlation(gaps, streaks))
    skipped = len(coverage) - report.used_phases.size
    if skipped:
        logger.warning(f"⚠️ {skipped} fases sin orientación de hueco o de raya definida; se excluyen de la correlación")
    if report.used_phases.size < 2:
        logger.warning("⚠️ Menos de 2 fases con orientación definida: correlación indefinida")
    return report


# --------------------------------------------------------------------------- #
# Flujo óptico
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class FlowField:
    """Vectores en orden de ejes: (2, ny, nx) o (3, nz, ny, nx), en vóxeles/fase."""

    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.shape[0] != self.vectors.ndim - 1:
            raise DomainError(f"FlowField inválido: {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise DomainError("FlowField con valores no finitos")

    @property
    def x(self) -> np.ndarray:
        return self.vectors[-1]

    @property
    def y(self) -> np.ndarray:
        return self.vectors[-2]

    @property
    def z(self) -> np.ndarray:
        return self.vectors[0] if self.vectors.shape[0] == 3 else np.zeros_like(self.vectors[0])

    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.vectors**2).sum(axis=0))


def _standardize(img: np.ndarray) -> np.ndarray:
    sd = img.std()
    return (img - img.mean()) / sd if sd > 0 else img - img.mean()


def _lk_refine(
    a: np.ndarray, b: np.ndarray, flow: np.ndarray, window: int, iterations: int, cond_limit: float, regularization: float
):
    ndim = a.ndim
    grid = np.indices(a.shape, dtype=np.float64)
    eye = np.eye(ndim)
    for _ in range(iterations):
        warped = map_coordinates(b, grid + flow, order=1, mode="nearest")
        grads = np.gradient(warped)
        it = warped - a
        G = np.empty(a.shape + (ndim, ndim))
        rhs = np.empty(a.shape + (ndim,))
        for i in range(ndim):
            rhs[..., i] = -uniform_filter(grads[i] * it, size=window)
            for j in range(i, ndim):
                G[..., i, j] = G[..., j, i] = uniform_filter(grads[i] * grads[j], size=window)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = np.linalg.cond(G)
        bad = ~np.isfinite(cond) | (cond > cond_limit)
        # Tikhonov relativo a la traza: amortigua las direcciones poco restringidas
        G += (regularization * np.trace(G, axis1=-2, axis2=-1) / ndim)[..., None, None] * eye
        G[bad] = eye
        rhs[bad] = 0.0
        delta = np.linalg.solve(G, rhs[..., None])[..., 0]
        flow = flow + np.moveaxis(delta, -1, 0)
    return flow


def optical_flow(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    levels: Optional[int] = None,
    window: Optional[int] = None,
    iterations: Optional[int] = None,
    cond_limit: Optional[float] = None,
    regularization: Optional[float] = None,
    normalize: bool = True,
) -> FlowField:
    """
    Flujo Lucas-Kanade piramidal de grueso a fino tal que a(p) ~ b(p + flujo(p)).

    Args:
        frame_a: Imagen 2D o volumen 3D de origen
        frame_b: Imagen de destino, mismas dimensiones
        levels: Niveles de pirámide
        window: Ventana cuadrada impar del sistema local
        iterations: Iteraciones de warp por nivel
        cond_limit: Número de condición máximo; por encima el flujo local es 0
        regularization: Peso Tikhonov relativo a la traza del tensor de estructura
        normalize: Estandarizar cada imagen (media 0, desviación 1) antes de estimar

    Returns:
        FlowField en vóxeles
    """
    rsa = get_settings().rsa
    levels = rsa.flow_levels if levels is None else levels
    window = rsa.flow_window if window is None else window
    iterations = rsa.flow_iterations if iterations is None else iterations
    cond_limit = rsa.cond_limit if cond_limit is None else cond_limit
    regularization = rsa.flow_regularization if regularization is None else regularization
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"Dimensiones distintas: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise DomainError("optical_flow requiere imágenes 2D o 3D")
    if window < 3 or window % 2 == 0:
        raise DomainError(f"La ventana debe ser impar >= 3, recibido {window}")
    if normalize:
        a, b = _standardize(a), _standardize(b)

    pyramid = [(a, b)]
    while len(pyramid) < levels and min(pyramid[-1][0].shape) // 2 >= window:
        ca, cb = pyramid[-1]
        sl = tuple(slice(None, None, 2) for _ in range(a.ndim))
        pyramid.append((gaussian_filter(ca, 1.0)[sl], gaussian_filter(cb, 1.0)[sl]))

    flow = np.zeros((a.ndim,) + pyramid[-1][0].shape)
    for level in range(len(pyramid) - 1, -1, -1):
        la, lb = pyramid[level]
        if flow.shape[1:] != la.shape:
            factors = [n / m for n, m in zip(la.shape, flow.shape[1:])]
            flow = np.stack([zoom(f, factors, order=1) * factors[d] for d, f in enumerate(flow)])
            # zoom puede diferir en un vóxel por redondeo
            flow = flow[(slice(None),) + tuple(slice(0, n) for n in la.shape)]
        flow = _lk_refine(la, lb, flow, window, iterations, cond_limit, regularization)
    return FlowField(vectors=flow)


def volume_flow(vol_a: np.ndarray, vol_b: np.ndarray, mode: Optional[str] = None, **kwargs) -> FlowField:
    """Flujo entre volúmenes (z, y, x): "2d" por corte axial (componente z nula) o "3d"."""
    mode = mode or get_settings().rsa.flow_mode
    vol_a = np.asarray(vol_a, dtype=np.float64)
    vol_b = np.asarray(vol_b, dtype=np.float64)
    if mode == "3d":
        return optical_flow(vol_a, vol_b, **kwargs)
    if mode != "2d":
        raise DomainError(f"Modo de flujo desconocido: {mode!r}")
    vectors = np.zeros((3,) + vol_a.shape)
    for iz in range(vol_a.shape[0]):
        f = optical_flow(vol_a[iz], vol_b[iz], **kwargs)
        vectors[1, iz] = f.vectors[0]
        vectors[2, iz] = f.vectors[1]
    return FlowField(vectors=vectors)


# --------------------------------------------------------------------------- #
# Trayectorias
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class TrajectorySet:
    """
    positions: (S, N, 3) en índices (z, y, x) por fase; NaN tras salir del volumen.
    displacements: (S, N, 3), el último paso cierra el ciclo N-1 -> 0.
    """

    seeds: np.ndarray
    positions: np.ndarray
    displacements: np.ndarray
    valid: np.ndarray

    @property
    def n_phases(self) -> int:
        return int(self.positions.shape[1])

    def __len__(self) -> int:
        return int(self.seeds.shape[0])

    @property
    def closure(self) -> np.ndarray:
        """Posición tras volver a la fase 0."""
        return self.positions[:, -1] + self.displacements[:, -1]


def seed_grid(mask: np.ndarray, stride: int) -> np.ndarray:
    """Semillas (z, y, x) en una rejilla regular dentro de la máscara."""
    if stride < 1:
        raise DomainError("seed_grid_stride debe ser >= 1")
    offsets = [((n - 1) % stride) // 2 for n in mask.shape]
    axes = [np.arange(o, n, stride) for o, n in zip(offsets, mask.shape)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[mask[tuple(grid.T)]].astype(np.float64)


def track_trajectories(
    image4d: Volume4D,
    seed_grid_stride: Optional[int] = None,
    mode: Optional[str] = None,
    body_threshold: Optional[float] = None,
    **flow_kwargs,
) -> TrajectorySet:
    """
    Avanza semillas fase a fase interpolando los campos de flujo consecutivos.

    La fase N-1 enlaza con la fase 0. Una trayectoria que sale del volumen se
    trunca (NaN desde ese punto) y se marca como no válida.
    """
    if image4d.n_phases < 2:
        raise DomainError("track_trajectories requiere N >= 2")
    stride = get_settings().rsa.seed_stride if seed_grid_stride is None else seed_grid_stride
    threshold = get_settings().evaluation.body_threshold_hu if body_threshold is None else body_threshold
    frames = image4d.as_array().astype(np.float64)
    n = frames.shape[0]
    shape = np.array(frames.shape[1:])

    seeds = seed_grid(frames[0] > threshold, stride)
    flows = [volume_flow(frames[i], frames[(i + 1) % n], mode, **flow_kwargs).vectors for i in range(n)]

    s = seeds.shape[0]
    positions = np.full((s, n, 3), np.nan)
    displacements = np.full((s, n, 3), np.nan)
    valid = np.ones(s, dtype=bool)
    current = seeds.copy()
    for i in range(n):
        positions[valid, i] = current[valid]
        coords = np.where(valid[:, None], current, 0.0).T
        step = np.stack([map_coordinates(f, coords, order=1, mode="nearest") for f in flows[i]], axis=-1)
        step[~valid] = np.nan
        displacements[:, i] = step
        current = current + step
        inside = np.all((current >= 0) & (current <= shape - 1), axis=1)
        if i < n - 1:
            exited = valid & ~inside
            valid &= inside
            current[exited] = np.nan
    if (~valid).any():
        logger.warning(f"⚠️ {(~valid).sum()} trayectorias salieron del volumen y se truncaron")
    logger.debug(f"🧭 {s} trayectorias sobre {n} fases (stride {stride})")
    return TrajectorySet(seeds=seeds, positions=positions, displacements=displacements, valid=valid)


@dataclass(frozen=True)
class AxisFlowStats:
    """Medias de |dx|, |dy|, |dz| por transición de fase (N, 3 en orden x, y, z) y globales."""

    per_phase: np.ndarray
    overall: np.ndarray

    @property
    def in_plane(self) -> float:
        return float((self.overall[0] + self.overall[1]) / 2.0)

    @property
    def through_plane(self) -> float:
        return float(self.overall[2])


def axis_flow_stats(trajectories: TrajectorySet) -> AxisFlowStats:
    """Medias aritméticas de las componentes absolutas sobre trayectorias válidas."""
    if len(trajectories) == 0 or not trajectories.valid.any():
        raise DomainError("axis_flow_stats requiere al menos una trayectoria válida")
    d = np.abs(trajectories.displacements[trajectories.valid])[..., ::-1]  # (S, N, x/y/z)
    per_phase = d.mean(axis=0)
    return AxisFlowStats(per_phase=per_phase, overall=per_phase.mean(axis=0))


def export_trajectory_features(trajectories: TrajectorySet, path: Optional[Path] = None) -> np.ndarray:
    """
    Matriz de rasgos: una fila por trayectoria con la secuencia aplanada de
    desplazamientos (dz, dy, dx por transición). Trayectorias truncadas: NaN -> 0.
    """
    features = np.nan_to_num(trajectories.displacements.reshape(len(trajectories), -1), nan=0.0)
    if path is not None:
        n = trajectories.n_phases
        cols = [f"d{i}_{ax}" for i in range(n) for ax in ("z", "y", "x")]
        fieldnames = ["trajectory", "seed_z", "seed_y", "seed_x", "valid"] + cols
        rows = []
        for k in range(len(trajectories)):
            row = {"trajectory": k, "valid": int(trajectories.valid[k])}
            row.update(zip(("seed_z", "seed_y", "seed_x"), trajectories.seeds[k]))
            row.update(zip(cols, features[k]))
            rows.append(row)
        write_csv(rows, path, fieldnames)
    return features


def cluster_trajectories(features: np.ndarray, k: int = 2, seed: Optional[int] = None) -> np.ndarray:
    """Etiquetas k-means (scipy) de los rasgos de trayectoria."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < k:
        raise DomainError(f"Se requieren al menos {k} trayectorias para agrupar")
    seed = get_settings().seed if seed is None else seed
    _, labels = kmeans2(features, k, minit="++", seed=np.random.default_rng(seed))
    return labels
