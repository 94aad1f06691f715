import argparse
from pathlib import Path

from src.core.config import RunConfig
from src.core.errors import StorageError
from src.logger.logger_config import LoggerConfig
from src.services.rstar4d import build_desk_dataset, build_network, read_manifest, save_checkpoint, train
from src.services.rstar4d.network import count_params_flops
from src.services.rstar4d.tetris import STRATEGIES

logger = LoggerConfig.get_logger(__name__)

DATASET_DIR = "dataset"
MODEL_FILE = "model.rsc"
LOG_FILE = "train_log.csv"


def register(subparsers) -> None:
    p = subparsers.add_parser("train", help="Entrenamiento Tetris (etapa I 2D+T y etapa II 4D) con checkpoints RSC1")
    p.add_argument("--manifest", type=Path, default=None, help="Manifiesto CSV (split, name, degraded, average, target)")
    p.add_argument("--build-dataset", action="store_true", help="Generar el conjunto de escritorio si falta el manifiesto")
    p.add_argument("--strategy", choices=STRATEGIES, default=None, help="Estrategia (sobrescribe training.strategy)")
    p.add_argument("--no-resume", action="store_true", help="Ignorar checkpoints existentes")
    p.set_defaults(func=run)


def run(args: argparse.Namespace, settings: RunConfig) -> int:
    logger.info("=" * 80)
    logger.info("📥 INICIO: Entrenamiento RSTAR4D")
    t = settings.training
    manifest = args.manifest or t.manifest or settings.output_dir / DATASET_DIR / "manifest.csv"
    if not Path(manifest).is_file():
        if not args.build_dataset:
            raise StorageError(f"No existe el manifiesto {manifest} (use --build-dataset para generarlo)")
        manifest = build_desk_dataset(Path(manifest).parent, settings)

    train_pairs = read_manifest(manifest, "train")
    val_pairs = read_manifest(manifest, "val")
    if not train_pairs:
        raise StorageError(f"El manifiesto {manifest} no tiene pares de entrenamiento")

    net = build_network(settings.network, seed=settings.seed)
    params, macs = count_params_flops(net, train_pairs[0].shape)
    logger.info(f"🧠 Red: {params} pesos, {macs / 1e9:.3f} GMAC por corte")

    trainer = train(
        train_pairs, val_pairs, strategy=args.strategy, settings=settings, checkpoint_dir=t.checkpoint_dir,
        log_path=settings.output_dir / LOG_FILE, resume=not args.no_resume, net=net,
    )
    save_checkpoint(trainer.net, None, settings.output_dir / MODEL_FILE, {"epoch": trainer.epoch})
    logger.info(f"✅ Modelo guardado en {settings.output_dir / MODEL_FILE}")
    logger.info("=" * 80)
    return 0
