import argparse
from pathlib import Path

from src.cli.commands.reconstruct import AVERAGE_FILE, RECON_DIR
from src.cli.commands.simulate import SCAN_FILE
from src.core.config import RunConfig
from src.logger.logger_config import LoggerConfig
from src.services.rsa import (
    axis_flow_stats,
    cluster_trajectories,
    export_trajectory_features,
    gap_streak_correlation,
    sampling_pattern,
    streak_orientation,
    track_trajectories,
)
from src.services.storage import read_projections, read_volume, read_volume4d, write_csv, write_pgm

logger = LoggerConfig.get_logger(__name__)

RSA_DIR = "rsa"
WINDOW_HU = (-1000.0, 500.0)


def register(subparsers) -> None:
    p = subparsers.add_parser("analyze", help="Análisis de rayas rotacionales: muestreo, orientación y flujo")
    p.add_argument("--recon-dir", type=Path, default=None, help=f"Directorio con f_phase*.rsv (por defecto <output_dir>/{RECON_DIR})")
    p.add_argument("--projections", type=Path, default=None, help=f"Archivo RSP1 (por defecto <output_dir>/{SCAN_FILE})")
    p.add_argument("--no-flow", action="store_true", help="Omitir el seguimiento de trayectorias por flujo óptico")
    p.set_defaults(func=run)


def run(args: argparse.Namespace, settings: RunConfig) -> int:
    logger.info("=" * 80)
    logger.info("📥 INICIO: Análisis RSA")
    recon_dir = args.recon_dir or settings.output_dir / RECON_DIR
    out = settings.output_dir / RSA_DIR
    cfg = settings.rsa
    n = settings.recon.n_phases

    image4d = read_volume4d(recon_dir)
    f_ave = read_volume(recon_dir / AVERAGE_FILE)
    scan = read_projections(args.projections or settings.output_dir / SCAN_FILE)
    z = image4d.grid.shape[0] // 2 if cfg.analysis_slice is None else cfg.analysis_slice

    # Patrón de muestreo angular y orientación de las rayas por fase
    coverage = sampling_pattern(scan.phase_map(n), scan.angles, n)
    orientation_rows, profiles = [], []
    for cov, vol in zip(coverage, image4d.phases):
        profile = streak_orientation(vol.data[z], f_ave.data[z], cfg.wedge_bins)
        profiles.append(profile)
        orientation_rows += [
            {"phase": cov.phase, "bin_center": c, "energy": e} for c, e in zip(profile.bin_centers, profile.energy)
        ]
        write_pgm(vol.data[z], out / f"phase_{cov.phase}.pgm", *WINDOW_HU)
        write_pgm(vol.data[z] - f_ave.data[z], out / f"streak_{cov.phase}.pgm")

    report = gap_streak_correlation(coverage, profiles)
    summary_rows = [
        {
            "phase": cov.phase,
            "n_views": cov.angles.size,
            "n_gaps": len(cov.gaps),
            "gap_orientation": cov.dominant_gap_orientation,
            "pattern_rotation": cov.pattern_rotation,
            "streak_argmax": profile.argmax,
            "streak_orientation": profile.axial_mean,
            "degenerate": int(profile.degenerate),
        }
        for cov, profile in zip(coverage, profiles)
    ]
    write_csv(orientation_rows, out / "orientation.csv", ["phase", "bin_center", "energy"])
    write_csv(summary_rows, out / "sampling.csv", list(summary_rows[0]))
    write_csv(
        [
            {"metric": "gap_streak_circular_correlation", "value": report.correlation},
            {"metric": "phases_correlated", "value": report.used_phases.size},
        ],
        out / "summary.csv", ["metric", "value"],
    )
    logger.info(f"📐 Correlación circular hueco/raya: {report.correlation:.3f} ({report.used_phases.size} fases)")

    if not args.no_flow:
        traj = track_trajectories(image4d, cfg.seed_stride, cfg.flow_mode)
        stats = axis_flow_stats(traj)
        flow_rows = [
            {"phase": i, "mean_dx": row[0], "mean_dy": row[1], "mean_dz": row[2]} for i, row in enumerate(stats.per_phase)
        ]
        flow_rows.append({"phase": "all", "mean_dx": stats.overall[0], "mean_dy": stats.overall[1], "mean_dz": stats.overall[2]})
        write_csv(flow_rows, out / "flow.csv", ["phase", "mean_dx", "mean_dy", "mean_dz"])
        features = export_trajectory_features(traj, out / "trajectories.csv")
        if len(traj) >= 2:
            labels = cluster_trajectories(features, 2, settings.seed)
            write_csv(
                [{"trajectory": k, "cluster": int(c)} for k, c in enumerate(labels)],
                out / "clusters.csv", ["trajectory", "cluster"],
            )
        logger.info(f"🧭 Flujo medio: en plano {stats.in_plane:.3f}, z {stats.through_plane:.3f} vóxeles/fase")

    logger.info(f"✅ Análisis RSA guardado en {out}")
    logger.info("=" * 80)
    return 0
