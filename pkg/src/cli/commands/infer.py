import argparse
import time
from pathlib import Path

from src.cli.commands.reconstruct import AVERAGE_FILE, RECON_DIR
from src.cli.commands.train import MODEL_FILE
from src.core.config import RunConfig
from src.logger.logger_config import LoggerConfig
from src.services.rstar4d import count_params_flops, forward_full, forward_tiled, load_checkpoint
from src.services.storage import read_volume, read_volume4d, write_volume4d

logger = LoggerConfig.get_logger(__name__)

RECOVERED_DIR = "recovered"


def register(subparsers) -> None:
    p = subparsers.add_parser("infer", help="Inferencia de la red sobre un 4D degradado y su promedio")
    p.add_argument("--checkpoint", type=Path, default=None, help=f"Checkpoint RSC1 (por defecto <output_dir>/{MODEL_FILE})")
    p.add_argument("--input-dir", type=Path, default=None, help=f"Directorio con f_phase*.rsv y {AVERAGE_FILE}")
    p.add_argument("--tile-z", type=int, default=None, help="Inferencia por bloques en z con solapamiento")
    p.set_defaults(func=run)


def run(args: argparse.Namespace, settings: RunConfig) -> int:
    logger.info("=" * 80)
    logger.info("📥 INICIO: Inferencia RSTAR4D")
    input_dir = args.input_dir or settings.output_dir / RECON_DIR
    net, _, _ = load_checkpoint(args.checkpoint or settings.output_dir / MODEL_FILE)
    degraded = read_volume4d(input_dir)
    average = read_volume(input_dir / AVERAGE_FILE)

    params, macs = count_params_flops(net, (degraded.n_phases,) + degraded.grid.shape)
    start = time.perf_counter()
    if args.tile_z:
        recovered = forward_tiled(net, degraded, average, args.tile_z)
    else:
        recovered = forward_full(net, degraded, average)
    elapsed = time.perf_counter() - start
    logger.info(
        f"⏱️ {params} pesos, {macs / 1e9:.3f} GMAC/corte, {elapsed / degraded.grid.shape[0]:.3f} s/corte"
    )
    out = settings.output_dir / RECOVERED_DIR
    write_volume4d(recovered, out)
    logger.info(f"✅ Volumen recuperado guardado en {out}")
    logger.info("=" * 80)
    return 0
