import argparse

from src.core.config import RunConfig
from src.logger.logger_config import LoggerConfig
from src.services.storage import CHECKSUM_FILE, verify_checksums

logger = LoggerConfig.get_logger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("verify", help=f"Comprueba las sumas SHA-256 de {CHECKSUM_FILE} en el directorio de salida")
    p.set_defaults(func=run)


def run(args: argparse.Namespace, settings: RunConfig) -> int:
    logger.info("=" * 80)
    logger.info("📥 INICIO: Verificación de sumas SHA-256")
    n = verify_checksums(settings.output_dir)
    logger.info(f"✅ {n} archivos coinciden con {settings.output_dir / CHECKSUM_FILE}")
    logger.info("=" * 80)
    return 0
