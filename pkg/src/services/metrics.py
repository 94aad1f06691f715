"""
Métricas de evaluación en dominio imagen y proyección.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import binary_closing, binary_fill_holes, gaussian_filter
from skimage.measure import label
from skimage.morphology import ball

from src.core.config import get_settings
from src.core.errors import DomainError
from src.logger.logger_config import LoggerConfig
from src.services.phantom4d import GridSpec, Phantom4D, Volume3D, Volume4D, ellipsoid_mask
from src.services.respiration import BreathingSignal
from src.services.scanner import ProjectionSet, ScanGeometry, forward_project, hu_to_mu
from src.services.storage import write_csv

logger = LoggerConfig.get_logger(__name__)

K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class RoiMask:
    mask: np.ndarray
    label: str

    @property
    def empty(self) -> bool:
        return not self.mask.any()

    def __and__(self, other: "RoiMask") -> "RoiMask":
        return RoiMask(mask=self.mask & other.mask, label=f"{self.label}&{other.label}")


def _as_array(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume3D) else x, dtype=np.float64)


def _ssim_map(a: np.ndarray, b: np.ndarray, window: int, dynamic_range: float, mode: str) -> np.ndarray:
    sigma = window / 6.0
    truncate = ((window - 1) / 2.0) / sigma

    def blur(x):
        return gaussian_filter(x, sigma=sigma, truncate=truncate, mode=mode)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    c1 = (K1 * dynamic_range) ** 2
    c2 = (K2 * dynamic_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den == 0, 1.0, num / den)


def ssim(a, b, window: Optional[int] = None, dynamic_range: Optional[float] = None) -> tuple[float, np.ndarray]:
    """
    SSIM con ventana gaussiana (sigma = window/6), K1 = 0.01, K2 = 0.03.

    Args:
        a, b: Volumen o corte (mismas dimensiones)
        window: Tamaño impar de la ventana
        dynamic_range: L en HU (por defecto el rango fijo de normalización)

    Returns:
        (SSIM medio sobre la región válida, mapa SSIM de la región válida)
    """
    cfg = get_settings().evaluation
    window = cfg.ssim_window if window is None else window
    dynamic_range = cfg.ssim_dynamic_range if dynamic_range is None else dynamic_range
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DomainError(f"ssim requiere dimensiones iguales: {a.shape} vs {b.shape}")
    if window < 3 or window % 2 == 0:
        raise DomainError(f"La ventana SSIM debe ser impar >= 3: {window}")
    if window > min(a.shape):
        raise DomainError(f"Ventana {window} mayor que la dimensión mínima {min(a.shape)}")
    r = (window - 1) // 2
    full = _ssim_map(a, b, window, dynamic_range, mode="reflect")
    valid = full[tuple(slice(r, n - r) for n in full.shape)]
    return float(valid.mean()), valid


def ssim_roi(a, b, roi: RoiMask, window: Optional[int] = None, dynamic_range: Optional[float] = None) -> float:
    """SSIM medio dentro de una ROI; el mapa se calcula por corte axial con bordes reflejados."""
    cfg = get_settings().evaluation
    window = cfg.ssim_window if window is None else window
    dynamic_range = cfg.ssim_dynamic_range if dynamic_range is None else dynamic_range
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape or roi.mask.shape != a.shape:
        raise DomainError("ssim_roi requiere volumen, referencia y máscara de iguales dimensiones")
    if roi.empty:
        raise DomainError(f"ROI {roi.label!r} vacía")
    if a.ndim == 2:
        maps = _ssim_map(a, b, window, dynamic_range, mode="reflect")
    else:
        maps = np.stack([_ssim_map(a[z], b[z], window, dynamic_range, mode="reflect") for z in range(a.shape[0])])
    return float(maps[roi.mask].mean())


def rmse_hu(a, b, mask: Optional[RoiMask] = None) -> float:
    """Raíz del error cuadrático medio sobre la máscara (o todo el volumen)."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise DomainError(f"rmse_hu requiere dimensiones iguales: {a.shape} vs {b.shape}")
    sel = np.ones(a.shape, dtype=bool) if mask is None else mask.mask
    if not sel.any():
        raise DomainError("rmse_hu con máscara vacía")
    d = (a - b)[sel]
    return float(np.sqrt(np.mean(d * d)))


def ncc(a, b) -> float:
    """Correlación de Pearson de los valores aplanados."""
    a, b = _as_array(a).ravel(), _as_array(b).ravel()
    if a.shape != b.shape:
        raise DomainError("ncc requiere el mismo número de elementos")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        raise DomainError("ncc no está definido para entradas constantes")
    return float(np.clip((a * b).sum() / denom, -1.0, 1.0))


def _largest_components(mask: np.ndarray, keep: int) -> np.ndarray:
    labels = label(mask, connectivity=3)
    if labels.max() == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    order = np.argsort(sizes)[::-1][:keep]
    return np.isin(labels, order[sizes[order] > 0])


def lung_mask(
    volume: Volume3D,
    lung_threshold: Optional[float] = None,
    body_threshold: Optional[float] = None,
    closing_radius: Optional[int] = None,
) -> RoiMask:
    """
    Segmentación pulmonar por umbral y morfología.

    1. Cuerpo: mayor componente conexa con HU > body_threshold, con huecos rellenados por corte axial.
    2. Pulmón: HU < lung_threshold dentro del cuerpo.
    3. Cierre morfológico con una esfera de radio closing_radius.
    4. Se conservan las dos mayores componentes.
    """
    cfg = get_settings().evaluation
    lung_threshold = cfg.lung_threshold_hu if lung_threshold is None else lung_threshold
    body_threshold = cfg.body_threshold_hu if body_threshold is None else body_threshold
    closing_radius = cfg.closing_radius if closing_radius is None else closing_radius
    hu = volume.data

    body = _largest_components(hu > body_threshold, 1)
    filled = np.stack([binary_fill_holes(s) for s in body])
    candidate = filled & (hu < lung_threshold)
    if closing_radius > 0 and candidate.any():
        r = closing_radius
        padded = np.pad(candidate, r, mode="edge")
        closed = binary_closing(padded, structure=ball(r))
        candidate = closed[r:-r, r:-r, r:-r] & filled
    lungs = _largest_components(candidate, 2)
    if not lungs.any():
        logger.warning("⚠️ lung_mask: no se encontró pulmón, máscara vacía")
    return RoiMask(mask=lungs, label="lung")


def tumor_mask_from_phantom(
    phantom: Phantom4D, amplitude: float, grid: GridSpec, name: str = "tumor"
) -> RoiMask:
    """Pertenencia exacta al elipsoide del tumor a esa amplitud."""
    return RoiMask(mask=ellipsoid_mask(phantom.by_name(name), amplitude, grid), label="tumor")


def global_mask(volume: Volume3D) -> RoiMask:
    return RoiMask(mask=np.ones(volume.shape, dtype=bool), label="global")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    total = a.sum() + b.sum()
    return 1.0 if total == 0 else float(2.0 * (a & b).sum() / total)


def projection_domain_eval(
    recovered: Volume4D,
    signal: Optional[BreathingSignal],
    geometry: ScanGeometry,
    reference: ProjectionSet,
    path: Optional[Path] = None,
    mu_water: Optional[float] = None,
    window: Optional[int] = None,
) -> list[dict]:
    """
    Reproyecta la fase de cada vista y la compara con la proyección de referencia.

    Returns:
        Filas {view, phase, angle, ssim, ncc}; se escriben a CSV si se indica path
    """
    if np.any(reference.phases < 0):
        raise DomainError("La referencia tiene vistas sin etiqueta de fase")
    if reference.phases.max() >= recovered.n_phases:
        raise DomainError(f"Fase {reference.phases.max()} fuera de las {recovered.n_phases} recuperadas")
    if signal is not None:
        t0, t1 = signal.span
        if reference.times.min() < t0 - 1e-9 or reference.times.max() > t1 + 1e-9:
            raise DomainError("La señal no cubre los tiempos de la referencia")

    dynamic_range = float(reference.data.max() - reference.data.min()) or 1.0
    mu = {}
    rows = []
    for k in range(reference.n_views):
        phase = int(reference.phases[k])
        if phase not in mu:
            mu[phase] = hu_to_mu(recovered.phases[phase], mu_water)
        proj = forward_project(mu[phase], geometry, float(reference.angles[k]))
        ref = reference.data[k]
        s, _ = ssim(proj, ref, window=window, dynamic_range=dynamic_range)
        rows.append({"view": k, "phase": phase, "angle": float(reference.angles[k]), "ssim": s, "ncc": ncc(proj, ref)})
    if path is not None:
        write_csv(rows, path, ["view", "phase", "angle", "ssim", "ncc"])
    logger.info(
        f"📊 Evaluación en proyección: {len(rows)} vistas, NCC medio {np.mean([r['ncc'] for r in rows]):.4f}"
    )
    return rows


def image_domain_report(
    recovered: Volume4D,
    truth: Volume4D,
    rois: Sequence[Mapping[str, RoiMask]],
    path: Optional[Path] = None,
) -> list[dict]:
    """
    Filas (phase, roi, ssim, rmse_hu) por fase y ROI. La ROI "global" usa el SSIM
    medio de la región válida; el resto el SSIM por corte dentro de la máscara.
    """
    if recovered.n_phases != truth.n_phases or len(rois) != truth.n_phases:
        raise DomainError("Se requiere una entrada de ROIs por fase y el mismo número de fases")
    rows = []
    for i, (rec, ref) in enumerate(zip(recovered.phases, truth.phases)):
        for name, roi in rois[i].items():
            if roi.empty:
                logger.warning(f"⚠️ ROI {name!r} vacía en la fase {i}, se omite")
                continue
            if name == "global":
                s, _ = ssim(rec, ref)
            else:
                s = ssim_roi(rec, ref, roi)
            rows.append({"phase": i, "roi": name, "ssim": s, "rmse_hu": rmse_hu(rec, ref, roi)})
    if path is not None:
        write_csv(rows, path, ["phase", "roi", "ssim", "rmse_hu"])
    return rows


def diaphragm_position(volume: Volume3D, column_xy_mm: tuple[float, float], threshold: Optional[float] = None) -> float:
    """
    Altura z (mm) del borde inferior del pulmón en la columna (x, y), interpolada
    linealmente en el cruce del umbral. NaN si la columna no atraviesa pulmón.
    """
    threshold = get_settings().evaluation.lung_threshold_hu if threshold is None else threshold
    zs, ys, xs = volume.grid.axes()
    iy = int(np.argmin(np.abs(ys - column_xy_mm[1])))
    ix = int(np.argmin(np.abs(xs - column_xy_mm[0])))
    col = volume.data[:, iy, ix].astype(np.float64)
    lung = col < threshold
    if not lung.any():
        return float("nan")
    # Tramo pulmonar más largo de la columna
    edges = np.diff(np.concatenate(([0], lung.astype(np.int8), [0])))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    longest = int(np.argmax(ends - starts))
    lo = starts[longest]
    if lo == 0:
        return float(zs[0])
    v_below, v_lung = col[lo - 1], col[lo]
    frac = (threshold - v_below) / (v_lung - v_below) if v_lung != v_below else 0.5
    return float(zs[lo - 1] + frac * (zs[lo] - zs[lo - 1]))


def structure_positions(
    image4d: Volume4D,
    column_xy_mm: tuple[float, float],
    tumor_roi: Optional[np.ndarray] = None,
    tumor_threshold: Optional[float] = None,
) -> list[dict]:
    """
    Posición por fase del diafragma (z mm) y centroide del tumor (mm) dentro de
    tumor_roi, tomando los vóxeles por encima de tumor_threshold.
    """
    tumor_threshold = get_settings().evaluation.body_threshold_hu if tumor_threshold is None else tumor_threshold
    rows = []
    for i, vol in enumerate(image4d.phases):
        row = {"phase": i, "diaphragm_z_mm": diaphragm_position(vol, column_xy_mm)}
        if tumor_roi is not None:
            sel = tumor_roi & (vol.data > tumor_threshold)
            if sel.any():
                idx = np.argwhere(sel).mean(axis=0)
                zyx = np.asarray(vol.origin) + idx * np.asarray(vol.spacing)
                row.update(tumor_x_mm=float(zyx[2]), tumor_y_mm=float(zyx[1]), tumor_z_mm=float(zyx[0]))
            else:
                row.update(tumor_x_mm=float("nan"), tumor_y_mm=float("nan"), tumor_z_mm=float("nan"))
        rows.append(row)
    return rows
