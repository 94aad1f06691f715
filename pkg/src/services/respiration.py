"""
Señales respiratorias: síntesis, ordenamiento por fase/amplitud y
estimación desde proyecciones (Amsterdam Shroud).

Convención de amplitud: 0 = fin de espiración, 1 = fin de inspiración.
La fase 0 comienza en cada pico de fin de inspiración.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from scipy.signal import detrend, find_peaks

from src.core.config import SignalSettings, get_settings
from src.core.errors import DegenerateSignalError, DomainError, StorageError
from src.logger.logger_config import LoggerConfig

if TYPE_CHECKING:
    from src.services.scanner import ProjectionSet

logger = LoggerConfig.get_logger(__name__)

# Tolerancia de redondeo al evaluar bordes de bin
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class BreathingSignal:
    times: np.ndarray
    amplitudes: np.ndarray
    cycle_starts: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        amps = np.asarray(self.amplitudes, dtype=np.float64)
        starts = np.asarray(self.cycle_starts, dtype=np.int64)
        if times.ndim != 1 or times.shape != amps.shape or times.size < 2:
            raise DomainError("BreathingSignal requiere tiempos y amplitudes 1D de igual longitud (>= 2)")
        if np.any(np.diff(times) <= 0):
            raise DomainError("Los tiempos de la señal deben ser estrictamente crecientes")
        if np.any(amps < -1e-12) or np.any(amps > 1 + 1e-12):
            raise DomainError("Las amplitudes deben estar en [0, 1]")
        if starts.size and (np.any(np.diff(starts) <= 0) or starts[0] < 0 or starts[-1] >= times.size):
            raise DomainError("cycle_starts debe ser estrictamente creciente y dentro de la señal")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "amplitudes", np.clip(amps, 0.0, 1.0))
        object.__setattr__(self, "cycle_starts", starts)

    @property
    def peak_times(self) -> np.ndarray:
        return self.times[self.cycle_starts]

    @property
    def n_cycles(self) -> int:
        """Ciclos completos entre picos consecutivos."""
        return max(int(self.cycle_starts.size) - 1, 0)

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def amplitude_at(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=np.float64), self.times, self.amplitudes)

    def shifted(self, dt: float) -> "BreathingSignal":
        return BreathingSignal(self.times + dt, self.amplitudes, self.cycle_starts, self.degenerate)


@dataclass(frozen=True)
class PhaseMap:
    phase_of_view: np.ndarray
    n_phases: int
    degenerate: bool = False

    def __post_init__(self):
        phases = np.asarray(self.phase_of_view, dtype=np.int64)
        if self.n_phases < 1:
            raise DomainError("PhaseMap requiere n_phases >= 1")
        if phases.size and (phases.min() < 0 or phases.max() >= self.n_phases):
            raise DomainError("Fase fuera de [0, N)")
        object.__setattr__(self, "phase_of_view", phases)

    def counts(self) -> np.ndarray:
        return np.bincount(self.phase_of_view, minlength=self.n_phases)

    def views_of(self, phase: int) -> np.ndarray:
        return np.flatnonzero(self.phase_of_view == phase)


def _raised_cosine(tau: np.ndarray) -> np.ndarray:
    return 0.5 + 0.5 * np.cos(2.0 * np.pi * tau)


def detect_cycle_starts(amplitudes: np.ndarray, min_prominence: float = 0.5) -> np.ndarray:
    """Picos de fin de inspiración, incluidos los de los extremos de la señal."""
    a = np.asarray(amplitudes, dtype=np.float64)
    span = float(a.max() - a.min())
    if span <= 0:
        return np.zeros(0, dtype=np.int64)
    pad = a.min() - 1.0
    padded = np.concatenate(([pad], a, [pad]))
    peaks, _ = find_peaks(padded, prominence=min_prominence * span)
    return (peaks - 1).astype(np.int64)


def synth_breathing(
    duration: Optional[float] = None,
    mean_period: Optional[float] = None,
    period_jitter: Optional[float] = None,
    amplitude_jitter: Optional[float] = None,
    sample_rate: Optional[float] = None,
    seed: Optional[int] = None,
) -> BreathingSignal:
    """
    Sintetiza una señal cuasi periódica de coseno elevado por ciclo.

    Cada ciclo k tiene periodo T_k y amplitud de pico A_k perturbados por ruido
    gaussiano con semilla. La mitad de espiración usa A_k y la de inspiración
    A_{k+1}, de modo que la señal es continua.

    Args:
        duration: Duración (s)
        mean_period: Periodo medio (s)
        period_jitter: Desviación relativa del periodo
        amplitude_jitter: Desviación relativa de la amplitud de pico
        sample_rate: Frecuencia de muestreo (Hz)
        seed: Semilla del generador

    Returns:
        BreathingSignal con cycle_starts en los picos
    """
    cfg: SignalSettings = get_settings().signal
    duration = cfg.duration_s if duration is None else duration
    mean_period = cfg.mean_period_s if mean_period is None else mean_period
    period_jitter = cfg.period_jitter if period_jitter is None else period_jitter
    amplitude_jitter = cfg.amplitude_jitter if amplitude_jitter is None else amplitude_jitter
    sample_rate = cfg.sample_rate_hz if sample_rate is None else sample_rate
    seed = get_settings().seed if seed is None else seed

    if duration <= 0 or mean_period <= 0 or sample_rate <= 0:
        raise DomainError("duration, mean_period y sample_rate deben ser > 0")
    if period_jitter < 0 or amplitude_jitter < 0:
        raise DomainError("Los jitter deben ser >= 0")
    if not 2.0 <= mean_period <= 6.0:
        logger.warning(f"⚠️ Periodo medio {mean_period} s fuera del rango típico [2, 6] s")
    if duration < 2 * mean_period:
        logger.warning(f"⚠️ Duración {duration} s menor que dos periodos")

    rng = np.random.default_rng(seed)
    n_cycles = int(np.ceil(duration / (0.5 * mean_period))) + 2
    periods = mean_period * (1.0 + period_jitter * rng.standard_normal(n_cycles))
    periods = np.clip(periods, 0.5 * mean_period, 1.5 * mean_period)
    peaks_amp = np.clip(1.0 + amplitude_jitter * rng.standard_normal(n_cycles + 1), 0.0, 1.0)
    peak_times = np.concatenate(([0.0], np.cumsum(periods)))

    n = int(round(duration * sample_rate)) + 1
    times = np.arange(n) / sample_rate
    k = np.searchsorted(peak_times, times, side="right") - 1
    tau = (times - peak_times[k]) / periods[k]
    amp_k = np.where(tau < 0.5, peaks_amp[k], peaks_amp[k + 1])
    amplitudes = amp_k * _raised_cosine(tau)

    in_span = peak_times[peak_times <= times[-1] + _EDGE_EPS]
    starts = np.unique(np.minimum(np.round(in_span * sample_rate).astype(np.int64), n - 1))
    signal = BreathingSignal(times=times, amplitudes=amplitudes, cycle_starts=starts)
    logger.debug(f"🌬️ Señal sintetizada: {duration:.1f} s, {signal.n_cycles} ciclos, semilla {seed}")
    return signal


def phase_amplitudes(n_phases: int) -> np.ndarray:
    """Amplitud representativa (inicio de bin) de cada fase sobre la forma de onda canónica."""
    if n_phases < 1:
        raise DomainError("n_phases debe ser >= 1")
    return _raised_cosine(np.arange(n_phases) / n_phases)


def _check_views(signal: BreathingSignal, view_times: np.ndarray) -> None:
    t0, t1 = signal.span
    if view_times.size and (view_times.min() < t0 - _EDGE_EPS or view_times.max() > t1 + _EDGE_EPS):
        raise DomainError(
            f"Tiempos de vista fuera del rango de la señal [{t0:.3f}, {t1:.3f}] s: "
            f"[{view_times.min():.3f}, {view_times.max():.3f}]"
        )


def phase_sort(signal: BreathingSignal, view_times: Sequence[float], n_phases: int) -> PhaseMap:
    """
    Asigna a cada vista la fase floor(N (t - p_k) / (p_{k+1} - p_k)) de su ciclo.

    Las vistas anteriores al primer pico o posteriores al último se extrapolan
    con la duración del ciclo adyacente.
    """
    if n_phases < 2:
        raise DomainError("phase_sort requiere N >= 2")
    view_times = np.asarray(view_times, dtype=np.float64)
    _check_views(signal, view_times)
    peaks = signal.peak_times
    if peaks.size < 2:
        raise DegenerateSignalError("phase_sort requiere al menos un ciclo completo (dos picos)")

    lengths = np.diff(peaks)
    k = np.searchsorted(peaks, view_times + _EDGE_EPS, side="right") - 1
    before = k < 0
    after = k >= peaks.size - 1
    k_len = np.clip(k, 0, lengths.size - 1)
    k_ref = np.clip(k, 0, peaks.size - 1)
    frac = (view_times - peaks[k_ref]) / lengths[k_len]
    phase = np.floor(n_phases * frac + _EDGE_EPS).astype(np.int64)
    interior = ~(before | after)
    phase = np.where(interior, np.clip(phase, 0, n_phases - 1), np.mod(phase, n_phases))
    return PhaseMap(phase_of_view=phase, n_phases=n_phases)


def amplitude_sort(signal: BreathingSignal, view_times: Sequence[float], n_phases: int) -> PhaseMap:
    """
    Ordenamiento por amplitud y sentido respiratorio.

    El rango de amplitud se divide en N/2 bins de igual ocupación (cuantiles de
    la señal). Las vistas en espiración (pendiente <= 0) van a las fases
    0..N/2-1 con amplitud descendente; las de inspiración a N/2..N-1 con
    amplitud ascendente. Así la fase 0 sigue anclada al fin de inspiración.
    """
    if n_phases < 2 or n_phases % 2:
        raise DomainError(f"amplitude_sort requiere N par >= 2, recibido {n_phases}")
    view_times = np.asarray(view_times, dtype=np.float64)
    _check_views(signal, view_times)
    half = n_phases // 2

    amps = signal.amplitudes
    if float(amps.max() - amps.min()) <= 1e-12:
        logger.warning("⚠️ Señal sin movimiento: todas las vistas comparten una fase")
        return PhaseMap(phase_of_view=np.zeros(view_times.size, dtype=np.int64), n_phases=n_phases, degenerate=True)

    edges = np.quantile(amps, np.linspace(0.0, 1.0, half + 1)[1:-1], method="inverted_cdf")
    slope = np.interp(view_times, signal.times, np.gradient(amps, signal.times))
    a = signal.amplitude_at(view_times)
    b = np.clip(np.searchsorted(edges, a, side="right"), 0, half - 1)
    phase = np.where(slope > 0, half + b, half - 1 - b).astype(np.int64)
    return PhaseMap(phase_of_view=phase, n_phases=n_phases)


def shroud_shift(current: np.ndarray, previous: np.ndarray, max_shift: int) -> float:
    """
    Desplazamiento s en [-max_shift, max_shift] que maximiza la NCC entre
    current[r] y previous[r - s] sobre la zona solapada.

    El máximo entero se refina con la parábola que pasa por él y sus dos
    vecinos; el ajuste queda acotado a medio paso.
    """
    n = current.size
    max_shift = int(min(max_shift, max(n // 2 - 1, 0)))
    shifts = np.arange(-max_shift, max_shift + 1)
    scores = np.full(shifts.size, -np.inf)
    for k, s in enumerate(shifts):
        if s >= 0:
            a, b = current[s:], previous[: n - s]
        else:
            a, b = current[: n + s], previous[-s:]
        a = a - a.mean()
        b = b - b.mean()
        denom = np.sqrt((a * a).sum() * (b * b).sum())
        if denom > 0:
            scores[k] = (a * b).sum() / denom

    best = max_shift
    for k in range(shifts.size):
        # Empates: gana el desplazamiento de menor magnitud
        c, c_best = scores[k], scores[best]
        if c > c_best + 1e-12 or (abs(c - c_best) <= 1e-12 and abs(shifts[k]) < abs(shifts[best])):
            best = k
    if not 0 < best < shifts.size - 1:
        return float(shifts[best])
    left, mid, right = scores[best - 1], scores[best], scores[best + 1]
    curvature = left - 2.0 * mid + right
    if not np.isfinite(curvature) or curvature >= 0:
        return float(shifts[best])
    offset = float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))
    return float(shifts[best]) + offset


def amsterdam_shroud(projections: "ProjectionSet", max_shift: Optional[int] = None) -> BreathingSignal:
    """
    Estima la señal respiratoria desde las proyecciones.

    Args:
        projections: Conjunto de proyecciones (integrales de línea)
        max_shift: Búsqueda de desplazamiento en filas (por defecto rsa.shroud_max_shift)

    Returns:
        BreathingSignal normalizada a [0, 1] sobre los tiempos de las vistas
    """
    max_shift = get_settings().rsa.shroud_max_shift if max_shift is None else max_shift
    data = np.asarray(projections.data, dtype=np.float64)
    if data.shape[0] < 2:
        raise DomainError("amsterdam_shroud requiere al menos 2 vistas")
    if data.shape[1] < 8:
        raise DomainError("amsterdam_shroud requiere al menos 8 filas de detector")

    # Imagen shroud: filas de detector x vistas
    shroud = data.sum(axis=2).T
    deriv = np.gradient(shroud, axis=0)
    if not np.any(np.abs(deriv) > 0):
        raise DegenerateSignalError("Proyecciones planas: no hay perfil craneocaudal")

    shifts = np.zeros(data.shape[0])
    for m in range(1, data.shape[0]):
        shifts[m] = shroud_shift(deriv[:, m], deriv[:, m - 1], max_shift)
    # Fila creciente = +z; el descenso diafragmático (inspiración) da desplazamientos negativos
    trace = detrend(-np.cumsum(shifts), type="linear")
    span = float(trace.max() - trace.min())
    if span <= 1e-12:
        raise DegenerateSignalError("Amsterdam Shroud: no se detectó movimiento entre vistas")
    amplitudes = (trace - trace.min()) / span
    times = np.asarray(projections.times, dtype=np.float64)
    starts = detect_cycle_starts(amplitudes)
    logger.info(f"🌬️ Amsterdam Shroud: {data.shape[0]} vistas, {max(starts.size - 1, 0)} ciclos detectados")
    return BreathingSignal(times=times, amplitudes=amplitudes, cycle_starts=starts)


def write_signal_csv(signal: BreathingSignal, path: Path) -> Path:
    """Exporta la señal como CSV (time_s, amplitude, cycle_start)."""
    path = Path(path)
    starts = set(int(i) for i in signal.cycle_starts)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["time_s", "amplitude", "cycle_start"])
            for i, (t, a) in enumerate(zip(signal.times, signal.amplitudes)):
                writer.writerow([repr(float(t)), repr(float(a)), int(i in starts)])
    except OSError as e:
        raise StorageError(f"No se pudo escribir la señal en {path}: {e}") from e
    logger.debug(f"💾 Señal guardada en {path}")
    return path


def read_signal_csv(path: Path) -> BreathingSignal:
    """Lee una señal CSV; sin columna cycle_start los picos se detectan de nuevo."""
    path = Path(path)
    try:
        with path.open("r", newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise StorageError(f"No se pudo leer la señal {path}: {e}") from e
    if not rows or "time_s" not in rows[0] or "amplitude" not in rows[0]:
        raise StorageError(f"CSV de señal sin columnas time_s/amplitude: {path}")
    try:
        times = np.array([float(r["time_s"]) for r in rows])
        amps = np.array([float(r["amplitude"]) for r in rows])
    except ValueError as e:
        raise StorageError(f"Valor no numérico en {path}: {e}") from e
    if "cycle_start" in rows[0]:
        starts = np.flatnonzero([int(r["cycle_start"]) for r in rows])
    else:
        starts = detect_cycle_starts(amps)
    return BreathingSignal(times=times, amplitudes=amps, cycle_starts=starts)
