import argparse
from pathlib import Path

import numpy as np

from src.cli.commands.infer import RECOVERED_DIR
from src.cli.commands.simulate import SCAN_FILE, SIGNAL_FILE, TRUTH_DIR
from src.core.config import RunConfig
from src.logger.logger_config import LoggerConfig
from src.services.metrics import (
    global_mask,
    image_domain_report,
    lung_mask,
    projection_domain_eval,
    structure_positions,
    tumor_mask_from_phantom,
)
from src.services.phantom4d import phantom_from_settings
from src.services.respiration import phase_amplitudes, read_signal_csv
from src.services.storage import read_projections, read_volume4d, write_csv

logger = LoggerConfig.get_logger(__name__)

EVAL_DIR = "eval"


def register(subparsers) -> None:
    p = subparsers.add_parser("evaluate", help="Métricas en dominio imagen (SSIM, RMSE por ROI) y proyección (SSIM, NCC)")
    p.add_argument("--recovered", type=Path, default=None, help=f"Directorio 4D a evaluar (por defecto <output_dir>/{RECOVERED_DIR})")
    p.add_argument("--truth", type=Path, default=None, help=f"Directorio 4D de referencia (por defecto <output_dir>/{TRUTH_DIR})")
    p.add_argument("--projections", type=Path, default=None, help=f"Proyecciones de referencia RSP1 (por defecto <output_dir>/{SCAN_FILE})")
    p.add_argument("--skip-projection", action="store_true", help="Omitir la evaluación en dominio de proyección")
    p.set_defaults(func=run)


def run(args: argparse.Namespace, settings: RunConfig) -> int:
    logger.info("=" * 80)
    logger.info("📥 INICIO: Evaluación")
    out = settings.output_dir / EVAL_DIR
    recovered = read_volume4d(args.recovered or settings.output_dir / RECOVERED_DIR)
    truth = read_volume4d(args.truth or settings.output_dir / TRUTH_DIR)

    # ROIs por fase: global, pulmón segmentado sobre la verdad y tumor analítico del fantoma
    phantom = phantom_from_settings(settings.phantom)
    has_tumor = any(e.name == "tumor" for e in phantom.body)
    amplitudes = phase_amplitudes(truth.n_phases)
    rois = []
    for i, ref in enumerate(truth.phases):
        entry = {"global": global_mask(ref), "lung": lung_mask(ref)}
        if has_tumor:
            entry["tumor"] = tumor_mask_from_phantom(phantom, float(amplitudes[i]), ref.grid)
        rois.append(entry)
    rows = image_domain_report(recovered, truth, rois, out / "image_metrics.csv")
    for name in ("tumor", "lung", "global"):
        sel = [r for r in rows if r["roi"] == name]
        if sel:
            logger.info(
                f"📊 {name}: SSIM {np.mean([r['ssim'] for r in sel]):.4f}, RMSE {np.mean([r['rmse_hu'] for r in sel]):.2f} HU"
            )

    # Posiciones de diafragma y tumor por fase
    column = (0.0, 0.0)
    if any(e.name == "lung_r" for e in phantom.body):
        c = phantom.by_name("lung_r").center
        column = (c[0], c[1])
    tumor_roi = np.any([r["tumor"].mask for r in rois], axis=0) if has_tumor else None
    positions = structure_positions(recovered, column, tumor_roi)
    write_csv(positions, out / "positions.csv", list(positions[0].keys()))

    reference_path = args.projections or settings.output_dir / SCAN_FILE
    if not args.skip_projection and Path(reference_path).is_file():
        reference = read_projections(reference_path)
        signal_path = settings.output_dir / SIGNAL_FILE
        signal = read_signal_csv(signal_path) if signal_path.is_file() else None
        projection_domain_eval(
            recovered, signal, reference.geometry, reference, out / "projection_metrics.csv",
            mu_water=settings.recon.mu_water, window=settings.evaluation.ssim_window,
        )
    elif not args.skip_projection:
        logger.warning(f"⚠️ Sin proyecciones de referencia en {reference_path}; se omite el dominio de proyección")

    logger.info(f"✅ Evaluación guardada en {out}")
    logger.info("=" * 80)
    return 0
