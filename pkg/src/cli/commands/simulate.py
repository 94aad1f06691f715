import argparse
from pathlib import Path

from src.core.config import RunConfig
from src.logger.logger_config import LoggerConfig
from src.services.phantom4d import GridSpec, phantom_from_settings, sample_ground_truth_4d
from src.services.respiration import phase_amplitudes, read_signal_csv, synth_breathing, write_signal_csv
from src.services.scanner import ScanGeometry, simulate_4d_scan
from src.services.storage import update_checksums, write_projections, write_volume4d

logger = LoggerConfig.get_logger(__name__)

SCAN_FILE = "scan.rsp"
SIGNAL_FILE = "signal.csv"
TRUTH_DIR = "truth"


def register(subparsers) -> None:
    p = subparsers.add_parser("simulate", help="Simula el escaneo 4D (RSP1), la verdad terreno (RSV1) y la señal (CSV)")
    p.set_defaults(func=run)


def run(args: argparse.Namespace, settings: RunConfig) -> int:
    logger.info("=" * 80)
    logger.info("📥 INICIO: Simulación del escaneo 4D")
    out: Path = settings.output_dir

    phantom = phantom_from_settings(settings.phantom)
    grid = GridSpec.from_settings(settings.phantom)
    geometry = ScanGeometry.from_settings(settings.geometry)
    s = settings.signal
    if s.csv_path is not None:
        logger.info(f"🌬️ Reutilizando señal de {s.csv_path}")
        signal = read_signal_csv(s.csv_path)
    else:
        signal = synth_breathing(
            s.duration_s, s.mean_period_s, s.period_jitter, s.amplitude_jitter, s.sample_rate_hz, seed=settings.seed
        )

    r = settings.recon
    scan = simulate_4d_scan(
        phantom, signal, geometry, n_phases=r.n_phases, quantize=r.quantize, noise_sd=r.noise_sd,
        grid=grid, seed=settings.seed, sorting=r.sorting, mu_water=r.mu_water,
    )
    truth = sample_ground_truth_4d(phantom, phase_amplitudes(r.n_phases), grid, n_phases=r.n_phases)

    written = [write_projections(scan, out / SCAN_FILE), write_signal_csv(signal, out / SIGNAL_FILE)]
    written += write_volume4d(truth, out / TRUTH_DIR)
    update_checksums(out, written)
    logger.info(f"✅ Simulación guardada en {out} ({scan.n_views} vistas, {truth.n_phases} fases)")
    logger.info("=" * 80)
    return 0
