import argparse
from pathlib import Path

from src.cli.commands.simulate import SCAN_FILE
from src.core.config import RunConfig
from src.logger.logger_config import LoggerConfig
from src.services.phantom4d import GridSpec
from src.services.recon import reconstruct_4d
from src.services.storage import read_projections, update_checksums, write_volume, write_volume4d

logger = LoggerConfig.get_logger(__name__)

RECON_DIR = "recon"
AVERAGE_FILE = "f_ave.rsv"


def register(subparsers) -> None:
    p = subparsers.add_parser("reconstruct", help="Gated FDK: f_ave y f_phase{0..N-1} en RSV1")
    p.add_argument("--projections", type=Path, default=None, help=f"Archivo RSP1 (por defecto <output_dir>/{SCAN_FILE})")
    p.set_defaults(func=run)


def run(args: argparse.Namespace, settings: RunConfig) -> int:
    logger.info("=" * 80)
    logger.info("📥 INICIO: Reconstrucción gated FDK")
    out: Path = settings.output_dir / RECON_DIR
    scan = read_projections(args.projections or settings.output_dir / SCAN_FILE)
    r = settings.recon
    grid = GridSpec.from_settings(settings.phantom)
    f_ave, phases = reconstruct_4d(
        scan, scan.phase_map(r.n_phases), grid, kernel=r.kernel, halffan=r.halffan_weighting, mu_water=r.mu_water
    )
    written = [write_volume(f_ave, out / AVERAGE_FILE)] + write_volume4d(phases, out)
    update_checksums(settings.output_dir, written)
    logger.info(f"✅ Reconstrucción guardada en {out}")
    logger.info("=" * 80)
    return 0
